"""Synthetic polychromatic X-ray acquisition.

Tube spectra, a four-material attenuation model, a procedural phantom with an
inserted metal needle, Beer-Lambert forward projection integrated over each
acquisition's spectrum, and Poisson counting noise. Geometry is parallel-beam:
each pixel's path length through a material is just its assigned thickness.

The attenuation model ``mu(E) = a * (E / 30 keV)**-3 + b`` (photoelectric-like
plus a flat Compton-like term) uses synthetic coefficients of plausible
magnitude. They are not measured data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, InvalidKvp, NegativeMean

DEFAULT_ENERGIES = np.arange(10.0, 151.0, 1.0)  # keV
DEFAULT_KVPS = (41.0, 70.0, 125.0)
REFERENCE_ENERGY = 30.0  # keV

# (a, b) in 1/cm
MATERIAL_COEFFICIENTS = {
    "soft_tissue": (0.15, 0.18),
    "bone": (1.2, 0.28),
    "metal": (18.0, 1.0),
    "plastic": (0.10, 0.15),
}
MATERIALS = tuple(MATERIAL_COEFFICIENTS)
METAL = MATERIALS.index("metal")


@dataclass
class EnergySpectrum:
    energies: np.ndarray
    flux: np.ndarray
    kvp_label: float

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=np.float64)
        self.flux = np.asarray(self.flux, dtype=np.float64)
        if self.energies.shape != self.flux.shape:
            raise DimensionMismatch("energies and flux must have the same length")
        if np.any(np.diff(self.energies) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(self.flux < 0) or not self.flux.sum() > 0:
            raise ValueError("flux must be non-negative with positive total")

    @property
    def total(self) -> float:
        return float(self.flux.sum())

    @property
    def support(self) -> tuple[float, float]:
        nz = self.energies[self.flux > 0]
        return float(nz[0]), float(nz[-1])


def make_spectrum(kvp: float, energies=None, total_photons: float = 1e6,
                  low_cutoff: float | None = None) -> EnergySpectrum:
    """Kramers-like tube spectrum ``E * (kvp - E)`` on ``low_cutoff < E < kvp``.

    ``low_cutoff`` defaults to the first grid energy (filtration edge). The flux
    is scaled to sum to ``total_photons``.
    """
    energies = DEFAULT_ENERGIES if energies is None else np.asarray(energies, dtype=np.float64)
    low = float(energies[0]) if low_cutoff is None else float(low_cutoff)
    if not (low < kvp <= energies[-1]):
        raise InvalidKvp(f"kVp {kvp} outside the usable grid range ({low}, {energies[-1]}]")
    inside = (energies > low) & (energies < kvp)
    if not inside.any():
        raise InvalidKvp(f"no grid energies strictly between {low} and {kvp} keV")
    flux = np.where(inside, energies * (kvp - energies), 0.0)
    flux *= total_photons / flux.sum()
    return EnergySpectrum(energies, flux, float(kvp))


@dataclass
class MaterialSet:
    names: tuple
    energies: np.ndarray
    mu: np.ndarray  # (material, energy), 1/cm

    def __post_init__(self):
        self.names = tuple(self.names)
        self.energies = np.asarray(self.energies, dtype=np.float64)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        if self.mu.shape != (len(self.names), self.energies.size):
            raise DimensionMismatch(f"mu has shape {self.mu.shape}, expected "
                                    f"({len(self.names)}, {self.energies.size})")
        if np.any(self.mu < 0):
            raise ValueError("attenuation coefficients must be non-negative")


def attenuation(a: float, b: float, energies) -> np.ndarray:
    energies = np.asarray(energies, dtype=np.float64)
    return a * (energies / REFERENCE_ENERGY) ** -3 + b


def default_materials(energies=None, names=MATERIALS) -> MaterialSet:
    energies = DEFAULT_ENERGIES if energies is None else np.asarray(energies, dtype=np.float64)
    mu = np.array([attenuation(*MATERIAL_COEFFICIENTS[n], energies) for n in names])
    return MaterialSet(names, energies, mu)


def forward_beer_lambert(spec: EnergySpectrum, mats: MaterialSet, lengths) -> np.ndarray:
    """Detected intensity ``sum_k flux_k exp(-sum_i mu_ik l_i)`` per pixel.

    ``lengths`` has materials on its last axis; the result drops that axis.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.shape[-1] != len(mats.names):
        raise DimensionMismatch(f"{lengths.shape[-1]} length channels for {len(mats.names)} materials")
    if spec.energies.shape != mats.energies.shape or np.any(spec.energies != mats.energies):
        raise DimensionMismatch("spectrum and material energy grids differ")
    keep = spec.flux > 0
    transmission = np.exp(-(lengths @ mats.mu[:, keep]))
    return transmission @ spec.flux[keep]


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

@dataclass
class MultiChannelImage:
    data: np.ndarray  # (height, width, channels)
    channel_names: tuple = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise DimensionMismatch("image data must be (height, width, channels)")
        if not self.channel_names:
            self.channel_names = tuple(f"c{k}" for k in range(self.channels))
        self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != self.channels:
            raise DimensionMismatch("one name per channel required")
        if not np.isfinite(self.data).all():
            raise ValueError("image data must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Pixel-major ``(height * width, channels)`` view."""
        return self.data.reshape(-1, self.channels)


def write_raster(path, image: MultiChannelImage) -> tuple[Path, Path]:
    """Write ``<path>.json`` (header) and ``<path>.f64`` (little-endian, pixel-major)."""
    path = Path(path)
    header = {
        "width": image.width,
        "height": image.height,
        "channels": image.channels,
        "channel_names": list(image.channel_names),
        "dtype": "f64le",
    }
    head = path.with_suffix(".json")
    body = path.with_suffix(".f64")
    head.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    body.write_bytes(np.ascontiguousarray(image.data, dtype="<f8").tobytes())
    return head, body


def read_raster(path) -> MultiChannelImage:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    if header.get("dtype") != "f64le":
        raise ValueError(f"unsupported raster dtype {header.get('dtype')!r}")
    data = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8")
    shape = (header["height"], header["width"], header["channels"])
    if data.size != np.prod(shape):
        raise DimensionMismatch(f"raster holds {data.size} values, header implies {np.prod(shape)}")
    return MultiChannelImage(data.reshape(shape).astype(np.float64), tuple(header["channel_names"]))


# --------------------------------------------------------------------------
# phantom
# --------------------------------------------------------------------------

@dataclass
class PhantomConfig:
    width: int = 128
    height: int = 128
    tissue_thickness: float = 6.0    # cm, at the body centre
    bone_thickness: float = 1.5      # cm, at each bone centre
    min_bones: int = 2
    max_bones: int = 4
    needle_length: float = 0.6       # fraction of image width
    needle_width: float = 5.0        # pixels
    needle_diameter: float = 0.12    # cm of metal along the needle axis
    grip_length: float = 0.25        # fraction of needle length
    grip_width: float = 13.0         # pixels
    grip_thickness: float = 1.5      # cm of plastic
    needle_center: tuple | None = None  # (row, col) pixels; random if unset
    needle_angle: float | None = None   # radians; random if unset

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigInvalid("phantom must be at least 8x8 pixels")
        if not 1 <= self.min_bones <= self.max_bones:
            raise ConfigInvalid("need 1 <= min_bones <= max_bones")
        for name in ("tissue_thickness", "bone_thickness", "needle_length", "needle_width",
                     "needle_diameter", "grip_length", "grip_width", "grip_thickness"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be positive")


@dataclass
class PathLengthMap:
    lengths: np.ndarray  # (height, width, material), cm
    names: tuple = MATERIALS
    masks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.float64)
        if self.lengths.ndim != 3 or self.lengths.shape[2] != len(self.names):
            raise DimensionMismatch("lengths must be (height, width, n_materials)")
        if np.any(self.lengths < 0):
            raise ValueError("path lengths must be non-negative")

    @property
    def height(self) -> int:
        return self.lengths.shape[0]

    @property
    def width(self) -> int:
        return self.lengths.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.lengths[:, :, self.names.index(name)]

    def without(self, name: str) -> "PathLengthMap":
        out = self.lengths.copy()
        out[:, :, self.names.index(name)] = 0.0
        return PathLengthMap(out, self.names, dict(self.masks))


def _ellipsoid_profile(rows, cols, center, semi, angle):
    """Normalised chord ``sqrt(1 - rho^2)`` of a rotated ellipse, 0 outside."""
    dr = rows - center[0]
    dc = cols - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    p = (ca * dc + sa * dr) / semi[0]
    q = (-sa * dc + ca * dr) / semi[1]
    rho2 = p * p + q * q
    return np.sqrt(np.clip(1.0 - rho2, 0.0, None)), rho2 < 1.0


def _rect_coords(rows, cols, center, angle):
    """Coordinates along and across an axis through ``center`` at ``angle``."""
    dr = rows - center[0]
    dc = cols - center[1]
    along = np.cos(angle) * dc + np.sin(angle) * dr
    across = -np.sin(angle) * dc + np.cos(angle) * dr
    return along, across


def _needle_geometry(cfg: PhantomConfig, center, angle):
    """Needle shaft and grip as (half-length, half-width, offset-along) rectangles."""
    half_len = 0.5 * cfg.needle_length * cfg.width
    grip_len = cfg.grip_length * 2 * half_len
    shaft = (half_len, 0.5 * cfg.needle_width, 0.0)
    grip = (0.5 * grip_len, 0.5 * cfg.grip_width, half_len - 0.5 * grip_len)
    return shaft, grip


def _rect_corners(center, angle, rect):
    half_len, half_w, offset = rect
    ca, sa = np.cos(angle), np.sin(angle)
    pts = []
    for a in (offset - half_len, offset + half_len):
        for c in (-half_w, half_w):
            pts.append((center[0] + sa * a + ca * c, center[1] + ca * a - sa * c))
    return np.array(pts)


def make_phantom(cfg: PhantomConfig | None = None, seed: int = 0) -> PathLengthMap:
    """Procedural body with bones and a needle whose grip is set in plastic.

    Soft tissue and bones use ellipsoidal thickness profiles; the metal shaft
    has a cylindrical cross-section, so the metal channel is positive exactly on
    the shaft rectangle. The needle is placed fully inside the body unless
    ``needle_center``/``needle_angle`` are given, in which case it only has to
    fit in the image.
    """
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    rows, cols = np.mgrid[0:h, 0:w] + 0.5

    body_center = (h / 2 + rng.uniform(-0.03, 0.03) * h, w / 2 + rng.uniform(-0.03, 0.03) * w)
    body_semi = (rng.uniform(0.40, 0.46) * w, rng.uniform(0.32, 0.40) * h)
    body_angle = rng.uniform(-0.15, 0.15)
    body_prof, body_mask = _ellipsoid_profile(rows, cols, body_center, body_semi, body_angle)
    tissue = cfg.tissue_thickness * body_prof

    bone = np.zeros((h, w))
    n_bones = int(rng.integers(cfg.min_bones, cfg.max_bones + 1))
    for _ in range(n_bones):
        r = rng.uniform(0.0, 0.55)
        phi = rng.uniform(0, 2 * np.pi)
        local = (r * body_semi[0] * np.cos(phi), r * body_semi[1] * np.sin(phi))
        ca, sa = np.cos(body_angle), np.sin(body_angle)
        center = (body_center[0] + sa * local[0] + ca * local[1],
                  body_center[1] + ca * local[0] - sa * local[1])
        semi = (rng.uniform(0.06, 0.16) * w, rng.uniform(0.04, 0.10) * h)
        prof, _ = _ellipsoid_profile(rows, cols, center, semi, rng.uniform(0, np.pi))
        bone = np.maximum(bone, cfg.bone_thickness * rng.uniform(0.6, 1.0) * prof)
    bone *= body_mask

    explicit = cfg.needle_center is not None or cfg.needle_angle is not None
    for _attempt in range(1000):
        center = cfg.needle_center if cfg.needle_center is not None else (
            body_center[0] + rng.uniform(-0.2, 0.2) * h, body_center[1] + rng.uniform(-0.2, 0.2) * w)
        angle = cfg.needle_angle if cfg.needle_angle is not None else rng.uniform(0, np.pi)
        shaft, grip = _needle_geometry(cfg, center, angle)
        corners = np.vstack([_rect_corners(center, angle, shaft), _rect_corners(center, angle, grip)])
        in_image = (np.all(corners >= 0) and np.all(corners[:, 0] <= h) and np.all(corners[:, 1] <= w))
        if explicit:
            if not in_image:
                raise ConfigInvalid("needle does not fit inside the image")
            break
        _, inside = _ellipsoid_profile(corners[:, 0], corners[:, 1], body_center, body_semi, body_angle)
        if in_image and inside.all():
            break
    else:
        raise ConfigInvalid("could not place the needle inside the body; shorten it")

    along, across = _rect_coords(rows, cols, center, angle)
    half_len, half_w, _ = shaft
    shaft_mask = (np.abs(along) <= half_len) & (np.abs(across) < half_w)
    metal = np.where(shaft_mask,
                     cfg.needle_diameter * np.sqrt(np.clip(1 - (across / half_w) ** 2, 0, None)), 0.0)
    g_half_len, g_half_w, g_off = grip
    grip_mask = (np.abs(along - g_off) <= g_half_len) & (np.abs(across) < g_half_w)
    plastic = np.where(grip_mask, cfg.grip_thickness, 0.0)

    lengths = np.stack([tissue, bone, metal, plastic], axis=-1)
    masks = {"body": body_mask, "needle": shaft_mask, "grip": grip_mask}
    return PathLengthMap(lengths, MATERIALS, masks)


# --------------------------------------------------------------------------
# acquisition
# --------------------------------------------------------------------------

def apply_poisson_noise(image: MultiChannelImage, seed: int = 0, enabled: bool = True) -> MultiChannelImage:
    if not enabled:
        return image
    if np.any(image.data < 0):
        raise NegativeMean("Poisson means must be non-negative")
    rng = np.random.default_rng(seed)
    return MultiChannelImage(rng.poisson(image.data).astype(np.float64), image.channel_names)


@dataclass
class Dataset:
    features: MultiChannelImage  # one channel per acquisition
    target: MultiChannelImage    # metal path length, cm
    i0_per_bin: np.ndarray       # flat-field intensity per acquisition

    def feature_matrix(self) -> np.ndarray:
        return self.features.pixels()

    def target_vector(self) -> np.ndarray:
        return self.target.pixels()[:, 0]

    def digest(self) -> str:
        """SHA-256 over feature, target and flat-field bytes."""
        h = hashlib.sha256()
        for arr in (self.features.data, self.target.data, self.i0_per_bin):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def simulate(phantom: PathLengthMap, spectra, mats: MaterialSet) -> MultiChannelImage:
    """Noise-free intensity image, one channel per spectrum."""
    lengths = phantom.lengths.reshape(-1, phantom.lengths.shape[-1])
    chans = [forward_beer_lambert(s, mats, lengths) for s in spectra]
    data = np.stack(chans, axis=-1).reshape(phantom.height, phantom.width, len(spectra))
    return MultiChannelImage(data, tuple(f"kvp{s.kvp_label:g}" for s in spectra))


def make_dataset(phantom: PathLengthMap, spectra, mats: MaterialSet | None = None,
                 noise: bool = True, seed: int = 0) -> Dataset:
    if not spectra:
        raise ValueError("at least one spectrum is required")
    mats = mats or default_materials(spectra[0].energies)
    clean = simulate(phantom, spectra, mats)
    features = apply_poisson_noise(clean, seed=seed, enabled=noise)
    i0 = np.array([forward_beer_lambert(s, mats, np.zeros(len(mats.names))) for s in spectra])
    target = MultiChannelImage(phantom.channel("metal"), ("metal_cm",))
    return Dataset(features, target, i0)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_dataset(dataset: Dataset, out_dir, seeds: dict, config: dict) -> Path:
    """Persist rasters and a manifest JSON; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_raster(out_dir / "features", dataset.features)
    write_raster(out_dir / "target", dataset.target)
    manifest = {
        "features": "features.json",
        "target": "target.json",
        "i0_per_bin": dataset.i0_per_bin.tolist(),
        "seeds": seeds,
        "config_hash": config_hash(config),
        "dataset_sha256": dataset.digest(),
    }
    path = out_dir / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(out_dir) -> Dataset:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "dataset.json").read_text())
    features = read_raster(out_dir / Path(manifest["features"]).stem)
    target = read_raster(out_dir / Path(manifest["target"]).stem)
    return Dataset(features, target, np.asarray(manifest["i0_per_bin"], dtype=np.float64))


def phantom_config_dict(cfg: PhantomConfig) -> dict:
    return asdict(cfg)
