import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opchain.errors import ConfigInvalid, DimensionMismatch, InvalidKvp, NegativeMean
from opchain.xray import (DEFAULT_KVPS, MATERIALS, EnergySpectrum, MaterialSet, MultiChannelImage,
                          PhantomConfig, apply_poisson_noise, default_materials, forward_beer_lambert,
                          make_dataset, make_phantom, make_spectrum, read_dataset, read_raster,
                          write_dataset, write_raster)


def naive_intensity(flux, mu, lengths):
    """Per-bin scalar loop over the Beer-Lambert sum."""
    total = 0.0
    for k in range(len(flux)):
        if flux[k] == 0:
            continue
        total += flux[k] * math.exp(-sum(mu[i][k] * lengths[i] for i in range(len(lengths))))
    return total


@pytest.fixture(scope="module")
def spectra():
    return [make_spectrum(k) for k in DEFAULT_KVPS]


@pytest.fixture(scope="module")
def phantom():
    return make_phantom(PhantomConfig(), seed=0)


class TestSpectrum:
    def test_support_below_kvp(self):
        s = make_spectrum(125)
        assert s.support == (11.0, 124.0)
        assert np.all(s.flux[s.energies >= 125] == 0)

    def test_total_photons(self):
        for kvp in DEFAULT_KVPS:
            assert make_spectrum(kvp, total_photons=1e6).total == pytest.approx(1e6, rel=1e-9)

    def test_kramers_shape(self):
        s = make_spectrum(70, total_photons=1.0)
        inside = s.flux > 0
        shape = s.energies[inside] * (70 - s.energies[inside])
        np.testing.assert_allclose(s.flux[inside] / shape, s.flux[inside][0] / shape[0], rtol=1e-12)

    @pytest.mark.parametrize("kvp", [5.0, 10.0, 200.0])
    def test_invalid_kvp(self, kvp):
        with pytest.raises(InvalidKvp):
            make_spectrum(kvp)

    def test_bad_flux(self):
        with pytest.raises(ValueError):
            EnergySpectrum([1.0, 2.0], [0.0, 0.0], 3.0)


class TestBeerLambert:
    def test_zero_length_is_total_flux(self, spectra):
        mats = default_materials()
        for s in spectra:
            assert forward_beer_lambert(s, mats, np.zeros(4)) == pytest.approx(s.total, rel=1e-12)

    def test_monoenergetic(self):
        mats = MaterialSet(("w",), [60.0], [[0.2]])
        s = EnergySpectrum([60.0], [1e5], 61.0)
        assert forward_beer_lambert(s, mats, [5.0]) == pytest.approx(1e5 * math.exp(-1.0), rel=1e-14)

    def test_matches_naive_loop(self, spectra):
        mats = default_materials()
        rng = np.random.default_rng(0)
        for s in spectra:
            for _ in range(10):
                l = rng.uniform(0, [8, 2, 0.15, 2])
                want = naive_intensity(s.flux, mats.mu, l)
                assert forward_beer_lambert(s, mats, l) == pytest.approx(want, rel=1e-12)

    def test_doubling_squares_transmission(self):
        energies = np.array([40.0, 60.0, 80.0])
        mu = np.array([[0.3, 0.2, 0.15]])
        flux = np.array([1.0, 2.0, 3.0])
        s = EnergySpectrum(energies, flux, 90.0)
        mats = MaterialSet(("w",), energies, mu)
        t = np.exp(-mu[0] * 2.0)
        assert forward_beer_lambert(s, mats, [4.0]) == pytest.approx(np.sum(flux * t * t), rel=1e-14)

    @given(st.lists(st.floats(0, 5), min_size=4, max_size=4), st.integers(0, 3), st.floats(0.01, 2))
    @settings(max_examples=50)
    def test_monotone_and_bounded(self, lengths, i, extra):
        s = make_spectrum(70)
        mats = default_materials()
        base = forward_beer_lambert(s, mats, lengths)
        more = list(lengths)
        more[i] += extra
        assert 0 < forward_beer_lambert(s, mats, more) < base <= s.total * (1 + 1e-12)

    def test_beam_hardening(self):
        # effective attenuation -log(I/I0)/L falls as the beam hardens
        s = make_spectrum(125)
        mats = default_materials()
        thick = np.linspace(0.5, 20, 40)
        lengths = np.zeros((thick.size, 4))
        lengths[:, 0] = thick
        i = forward_beer_lambert(s, mats, lengths)
        mu_eff = -np.log(i / s.total) / thick
        assert np.all(np.diff(mu_eff) < 0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            forward_beer_lambert(make_spectrum(70), default_materials(), np.zeros(3))


class TestPhantom:
    def test_shape_and_channels(self, phantom):
        assert phantom.lengths.shape == (128, 128, 4)
        assert phantom.names == MATERIALS

    def test_metal_exactly_on_needle(self, phantom):
        metal = phantom.channel("metal")
        np.testing.assert_array_equal(metal > 0, phantom.masks["needle"])
        assert metal.max() <= PhantomConfig().needle_diameter

    def test_background_empty(self, phantom):
        outside = ~phantom.masks["body"] & ~phantom.masks["grip"]
        assert np.all(phantom.lengths[outside] == 0)

    def test_needle_inside_body(self, phantom):
        assert np.all(phantom.masks["body"][phantom.masks["needle"]])

    def test_deterministic(self):
        a = make_phantom(seed=7)
        b = make_phantom(seed=7)
        np.testing.assert_array_equal(a.lengths, b.lengths)
        assert not np.array_equal(a.lengths, make_phantom(seed=8).lengths)

    def test_bone_count_bounds(self):
        with pytest.raises(ConfigInvalid):
            PhantomConfig(min_bones=3, max_bones=2)

    def test_needle_must_fit(self):
        with pytest.raises(ConfigInvalid):
            make_phantom(PhantomConfig(needle_center=(2.0, 2.0), needle_angle=0.0))

    def test_too_long_needle(self):
        with pytest.raises(ConfigInvalid):
            make_phantom(PhantomConfig(needle_length=1.5))


class TestNoise:
    def test_zero_mean(self):
        img = MultiChannelImage(np.zeros((4, 4, 1)))
        np.testing.assert_array_equal(apply_poisson_noise(img, seed=1).data, 0)

    def test_moments(self):
        img = MultiChannelImage(np.full((100, 1000, 1), 1000.0))
        out = apply_poisson_noise(img, seed=2).data
        assert abs(out.mean() - 1000) < 0.5
        assert out.var() == pytest.approx(1000, rel=0.02)

    def test_disabled_is_identity(self):
        img = MultiChannelImage(np.full((2, 2, 1), 3.7))
        assert apply_poisson_noise(img, enabled=False) is img

    def test_negative_mean(self):
        with pytest.raises(NegativeMean):
            apply_poisson_noise(MultiChannelImage(-np.ones((2, 2, 1))))


class TestDataset:
    def test_shapes(self, phantom, spectra):
        ds = make_dataset(phantom, spectra, noise=True, seed=0)
        assert ds.feature_matrix().shape == (128 * 128, 3)
        assert ds.target_vector().shape == (128 * 128,)
        assert ds.target.channel_names == ("metal_cm",)

    def test_flat_field_rows(self, phantom, spectra):
        ds = make_dataset(phantom, spectra, noise=False)
        empty = np.all(phantom.lengths == 0, axis=-1).ravel()
        assert empty.any()
        np.testing.assert_allclose(ds.feature_matrix()[empty], np.tile(ds.i0_per_bin, (empty.sum(), 1)),
                                   rtol=1e-12)

    def test_removing_metal_changes_only_needle(self, phantom, spectra):
        a = make_dataset(phantom, spectra, noise=False).features.data
        b = make_dataset(phantom.without("metal"), spectra, noise=False).features.data
        changed = np.any(a != b, axis=-1)
        np.testing.assert_array_equal(changed, phantom.masks["needle"])
        assert np.all(b[changed] > a[changed])

    def test_noise_is_seeded(self, phantom, spectra):
        a = make_dataset(phantom, spectra, seed=3)
        assert a.digest() == make_dataset(phantom, spectra, seed=3).digest()
        assert a.digest() != make_dataset(phantom, spectra, seed=4).digest()

    def test_round_trip(self, phantom, spectra, tmp_path):
        ds = make_dataset(phantom, spectra, seed=0)
        write_dataset(ds, tmp_path, {"noise": 0}, {"x": 1})
        back = read_dataset(tmp_path)
        assert back.digest() == ds.digest()


class TestRaster:
    def test_round_trip(self, tmp_path):
        img = MultiChannelImage(np.random.default_rng(0).normal(size=(5, 7, 2)), ("a", "b"))
        head, body = write_raster(tmp_path / "img", img)
        assert body.stat().st_size == 5 * 7 * 2 * 8
        back = read_raster(tmp_path / "img")
        np.testing.assert_array_equal(back.data, img.data)
        assert back.channel_names == ("a", "b")

    def test_pixel_major_layout(self, tmp_path):
        data = np.arange(12, dtype=float).reshape(2, 3, 2)
        _, body = write_raster(tmp_path / "img", MultiChannelImage(data))
        np.testing.assert_array_equal(np.frombuffer(body.read_bytes(), "<f8"), np.arange(12))

    def test_truncated_body(self, tmp_path):
        _, body = write_raster(tmp_path / "img", MultiChannelImage(np.ones((2, 2, 1))))
        body.write_bytes(body.read_bytes()[:8])
        with pytest.raises(DimensionMismatch):
            read_raster(tmp_path / "img")
