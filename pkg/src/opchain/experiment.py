"""Four-variant material-decomposition study on synthetic data.

Each variant predicts the metal path length per pixel from the vector of
measured intensities ``I`` (one entry per tube voltage) with the same MLP,
differing only in the fixed operators placed in front of it:

=======  ====================  ==========================================
variant  model                 stages before the MLP
=======  ====================  ==========================================
raw      ``F(I)``              standardize
u        ``F(u(I))``           floor, -log, standardize
g        ``F(g(I))``           polynomial, standardize
gu       ``F(g(u(I)))``        floor, -log, polynomial, standardize
=======  ====================  ==========================================
"""

from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigInvalid, DegenerateInput, DimensionMismatch, Divergence, UnknownVariant
from .metrics import SsimConfig, pearson_r, ssim
from .nn import MlpModel, Pipeline, TrainConfig, save_model, train
from .operators import IntensityFloor, NegLogTransform, OutputScale, PolynomialExpansion, Standardizer
from .xray import (DEFAULT_KVPS, Dataset, PhantomConfig, config_hash, default_materials,
                   make_dataset, make_phantom, make_spectrum, write_dataset, write_raster,
                   MultiChannelImage)

log = logging.getLogger(__name__)

VARIANTS = ("raw", "u", "g", "gu")
VARIANT_LABELS = {
    "raw": "F(I)",
    "u": "F(u(I))",
    "g": "F(g(I))",
    "gu": "F(g(u(I)))",
}
INTENSITY_FLOOR = 1e-12  # relative to the flat field


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    kvps: list = field(default_factory=lambda: list(DEFAULT_KVPS))
    noise: bool = True
    photons: float = 1e6
    variants: list = field(default_factory=lambda: list(VARIANTS))
    hidden: list = field(default_factory=lambda: [16, 16])
    train: TrainConfig = field(default_factory=TrainConfig)
    poly_degree: int = 3
    cross_terms: bool = True
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    test_fraction: float = 0.2
    scatter_fraction: float | None = None
    out_dir: str = "results"

    def __post_init__(self):
        if isinstance(self.phantom, dict):
            self.phantom = PhantomConfig(**self.phantom)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.kvps = [float(k) for k in self.kvps]
        self.variants = list(self.variants)
        self.seeds = [int(s) for s in self.seeds]
        if not self.variants:
            raise ConfigInvalid("at least one variant is required")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise UnknownVariant(f"unknown variants {unknown}; choose from {VARIANTS}")
        if not self.seeds:
            raise ConfigInvalid("at least one seed is required")
        if not self.kvps:
            raise ConfigInvalid("at least one kVp setting is required")
        if not 0 < self.test_fraction < 1:
            raise ConfigInvalid("test_fraction must lie in (0, 1)")
        if self.poly_degree <= 0:
            raise ConfigInvalid("poly_degree must be positive")
        if self.photons <= 0:
            raise ConfigInvalid("photons must be positive")
        if self.scatter_fraction is not None and not 0 < self.scatter_fraction <= 1:
            raise ConfigInvalid("scatter_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigInvalid(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        # Where results land does not change what they are.
        d = self.to_dict()
        d.pop("out_dir")
        return config_hash(d)


@dataclass
class VariantResult:
    seed: int
    variant: str
    status: str = "ok"
    pearson_r: float = float("nan")
    ssim: float = float("nan")
    final_loss: float = float("nan")
    prediction: str = ""
    scatter: str = ""
    dataset_sha256: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_seeds(seed: int) -> dict:
    """Independent child seeds for each random consumer of one replicate."""
    state = np.random.SeedSequence(seed).generate_state(5)
    names = ("phantom", "noise", "split", "init", "shuffle")
    return {n: int(s) for n, s in zip(names, state)}


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    seeds = run_seeds(seed)
    spectra = [make_spectrum(k, total_photons=cfg.photons) for k in cfg.kvps]
    mats = default_materials(spectra[0].energies)
    phantom = make_phantom(cfg.phantom, seed=seeds["phantom"])
    return make_dataset(phantom, spectra, mats, noise=cfg.noise, seed=seeds["noise"])


def split_indices(n: int, test_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def build_variant(variant: str, cfg: ExperimentConfig, i0, train_features=None,
                  seed: int = 0) -> Pipeline:
    """Assemble the fixed operators, the standardizer and a fresh MLP.

    With ``train_features`` (raw intensities) the standardizer is fitted on
    their image under the preceding operators; otherwise it is the identity.
    """
    if variant not in VARIANTS:
        raise UnknownVariant(f"unknown variant {variant!r}; choose from {VARIANTS}")
    i0 = np.asarray(i0, dtype=np.float64)
    prefix = []
    if variant in ("u", "gu"):
        prefix += [IntensityFloor(i0, INTENSITY_FLOOR), NegLogTransform(i0)]
    if variant in ("g", "gu"):
        prefix.append(PolynomialExpansion(i0.size, cfg.poly_degree, cfg.cross_terms))
    dim = prefix[-1].out_dim if prefix else i0.size
    if train_features is None:
        norm = Standardizer.unfitted(dim)
    else:
        feats = np.asarray(train_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != i0.size:
            raise DimensionMismatch(f"training features must be (n, {i0.size})")
        for stage in prefix:
            feats = stage.forward(feats)
        norm = Standardizer.fit(feats)
    mlp = MlpModel.initialize([dim, *cfg.hidden, 1], seed=seed)
    return Pipeline([*prefix, norm, mlp])


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_scatter(pred, truth, path, fraction: float | None = None, seed: int | None = None) -> Path:
    """Write ``truth,pred`` rows, optionally keeping ``round(fraction * n)`` pixels.

    Subsampling is stride-based; ``seed`` only picks the offset into the first
    stride.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise DimensionMismatch("prediction and truth differ in size")
    n = pred.size
    idx = np.arange(n)
    if fraction is not None and fraction < 1:
        k = max(1, int(round(fraction * n)))
        step = n / k
        offset = 0 if seed is None else int(np.random.default_rng(seed).integers(0, max(1, int(step))))
        idx = np.minimum(np.floor(np.arange(k) * step).astype(np.int64) + offset, n - 1)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth", "pred"])
        for i in idx:
            w.writerow([_fmt(truth[i]), _fmt(pred[i])])
    return path


def run_variant(dataset: Dataset, variant: str, cfg: ExperimentConfig, seed: int,
                out_dir: Path | None = None, root: Path | None = None) -> VariantResult:
    """Train one variant on one replicate and evaluate it.

    Pearson's r is computed on the held-out pixels, SSIM on the full image with
    the dynamic range of the ground truth. Divergence is recorded, not raised.
    """
    seeds = run_seeds(seed)
    x = dataset.feature_matrix()
    y = dataset.target_vector()
    tr, te = split_indices(x.shape[0], cfg.test_fraction, seeds["split"])
    result = VariantResult(seed=seed, variant=variant, dataset_sha256=dataset.digest())
    pipe = build_variant(variant, cfg, dataset.i0_per_bin, x[tr], seed=seeds["init"])
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seeds["shuffle"]})
    # The metal target is sparse and sub-millimetre; fit it in standard units.
    y_mean = float(y[tr].mean())
    y_std = float(y[tr].std()) or 1.0
    try:
        trained = train(pipe, x[tr], (y[tr] - y_mean) / y_std, tcfg)
    except Divergence as exc:
        log.warning("seed %d variant %s diverged: %s", seed, variant, exc)
        result.status = "diverged"
        return result
    pipe = Pipeline([*trained.pipeline.stages, OutputScale(y_std, y_mean)])
    pred = pipe.forward(x)[:, 0]
    truth_img = dataset.target.data[:, :, 0]
    pred_img = pred.reshape(truth_img.shape)
    result.final_loss = trained.history[-1]
    try:
        result.pearson_r = pearson_r(pred[te], y[te])
    except DegenerateInput:
        result.status = "degenerate"
    result.ssim = ssim(pred_img, truth_img,
                       SsimConfig(dynamic_range=float(truth_img.max() - truth_img.min())))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        root = Path(root) if root is not None else out_dir
        write_raster(out_dir / "prediction", MultiChannelImage(pred_img, ("metal_cm_pred",)))
        scatter = emit_scatter(pred_img, truth_img, out_dir / "scatter.csv",
                               cfg.scatter_fraction, seeds["split"])
        norm = pipe.stages[pipe.mlp_index - 1]
        save_model(out_dir / "model.bin", pipe.mlp, variant=variant, seed=seed,
                   config=cfg.to_dict(), normalizer={"mean": norm.mean.tolist(), "std": norm.std.tolist()},
                   target_scale={"mean": y_mean, "std": y_std})
        with open(out_dir / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for k, v in enumerate(trained.history):
                w.writerow([k, _fmt(v)])
        result.prediction = (out_dir / "prediction.json").relative_to(root).as_posix()
        result.scatter = scatter.relative_to(root).as_posix()
    return result


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

RESULT_FIELDS = [f.name for f in fields(VariantResult)]


def _order(results):
    rank = {v: k for k, v in enumerate(VARIANTS)}
    return sorted(results, key=lambda r: (r.seed, rank[r.variant]))


def write_results_csv(results, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in _order(results):
            row = []
            for name in RESULT_FIELDS:
                v = getattr(r, name)
                row.append(_fmt(v) if isinstance(v, float) else v)
            w.writerow(row)
    return path


def read_results_csv(path) -> list[VariantResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(VariantResult(
                seed=int(row["seed"]), variant=row["variant"], status=row["status"],
                pearson_r=float(row["pearson_r"]), ssim=float(row["ssim"]),
                final_loss=float(row["final_loss"]), prediction=row["prediction"],
                scatter=row["scatter"], dataset_sha256=row["dataset_sha256"]))
    return out


def summarize(results) -> dict:
    """Per-variant mean, min and max of each metric over successful runs."""
    summary = {}
    for v in VARIANTS:
        rows = [r for r in results if r.variant == v and r.ok]
        if not rows:
            continue
        entry = {"n": len(rows)}
        for metric in ("pearson_r", "ssim"):
            vals = np.array([getattr(r, metric) for r in rows])
            entry[metric] = {"mean": float(vals.mean()), "min": float(vals.min()), "max": float(vals.max())}
        summary[v] = entry
    return summary


def summary_markdown(results) -> str:
    """Variants as columns, metrics as rows, percentages; best mean in bold."""
    summary = summarize(results)
    present = [v for v in VARIANTS if v in summary]
    lines = ["| | " + " | ".join(VARIANT_LABELS[v] for v in present) + " |",
             "|---|" + "---|" * len(present)]
    for metric, label in (("pearson_r", "Pearson's r [%]"), ("ssim", "SSIM [%]")):
        means = [round(100 * summary[v][metric]["mean"], 1) for v in present]
        best = int(np.argmax(means)) if means else -1
        cells = [f"**{m:.1f}**" if k == best else f"{m:.1f}" for k, m in enumerate(means)]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    lines += ["", "Range over seeds (min to max, %):", "",
              "| | " + " | ".join(VARIANT_LABELS[v] for v in present) + " |",
              "|---|" + "---|" * len(present)]
    for metric, label in (("pearson_r", "Pearson's r"), ("ssim", "SSIM")):
        cells = [f"{100 * summary[v][metric]['min']:.1f} to {100 * summary[v][metric]['max']:.1f}"
                 for v in present]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    failed = [r for r in _order(results) if not r.ok]
    if failed:
        lines += ["", "Failed runs: " + ", ".join(f"seed {r.seed} {r.variant} ({r.status})" for r in failed)]
    seeds = sorted({r.seed for r in results})
    lines += ["", f"Seeds: {', '.join(map(str, seeds))}. Pearson's r on held-out pixels; "
              "SSIM on the full image."]
    return "\n".join(lines) + "\n"


def emit_report(results, out_dir) -> tuple[Path, Path]:
    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_results_csv(results, out_dir / "results.csv")
    md_path = out_dir / "summary.md"
    md_path.write_text(summary_markdown(results))
    return csv_path, md_path


def write_manifest(out_dir, cfg: ExperimentConfig | None = None, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    files = sorted(p.relative_to(out_dir).as_posix() for p in out_dir.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config_hash": cfg.digest() if cfg is not None else None,
        "versions": {
            "opchain": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "files": files,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def simulate_to_disk(cfg: ExperimentConfig, seed: int, out_dir) -> Dataset:
    dataset = build_dataset(cfg, seed)
    write_dataset(dataset, Path(out_dir), run_seeds(seed), {**cfg.to_dict(), "seed": seed, "out_dir": None})
    return dataset


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple[list[VariantResult], dict]:
    """Every seed x variant: simulate once per seed, train, evaluate, persist."""
    root = Path(out_dir if out_dir is not None else cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in cfg.seeds:
        seed_dir = root / f"seed{seed}"
        dataset = simulate_to_disk(cfg, seed, seed_dir / "dataset")
        for variant in cfg.variants:
            log.info("seed %d: training %s", seed, VARIANT_LABELS[variant])
            res = run_variant(dataset, variant, cfg, seed, seed_dir / variant, root)
            log.info("seed %d %s: r=%.4f ssim=%.4f", seed, variant, res.pearson_r, res.ssim)
            results.append(res)
    emit_report(results, root)
    write_manifest(root, cfg)
    return _order(results), summarize(results)


def prior_knowledge_ordering(summary: dict, tolerance: float = 0.02) -> bool:
    """Mean SSIM of ``gu`` beats ``raw`` and is within ``tolerance`` of the best single operator."""
    s = {v: summary[v]["ssim"]["mean"] for v in summary}
    if "gu" not in s or "raw" not in s:
        return False
    singles = [s[v] for v in ("u", "g") if v in s]
    return s["gu"] > s["raw"] and (not singles or s["gu"] >= max(singles) - tolerance)

