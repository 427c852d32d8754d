import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfslamlab import channel, datagen, superres
from rfslamlab.geometry import C, rectangle_room


def random_hermitian(rng, n):
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return 0.5 * (A + A.conj().T)


@pytest.fixture(scope="module")
def ofdm():
    return channel.OfdmConfig(carrier_hz=2e9, bandwidth_hz=400e6,
                              n_subcarriers=128, snapshots=4)


class TestDelayGrid:
    def test_taus_cover_range(self):
        g = superres.DelayGrid(t_min=0.0, t_max=1e-7, step=1e-9)
        taus = g.taus()
        assert taus[0] == 0.0
        assert taus[-1] <= 1e-7
        # rounding at the endpoint may drop the final step
        assert len(taus) in (100, 101)

    def test_too_coarse(self):
        with pytest.raises(ValueError):
            superres.DelayGrid(t_min=0.0, t_max=1e-9, step=1e-9)

    def test_default_grid(self, ofdm):
        g = superres.default_grid(ofdm, room_diameter=np.sqrt(50.0),
                                  max_bounce=1)
        assert g.step == pytest.approx(1.0 / (64 * 400e6))
        assert g.t_max >= 2 * np.sqrt(50.0) / C


class TestSmoothedCovariance:
    def test_hermitian_and_shape(self, ofdm):
        rng = np.random.default_rng(0)
        csi = rng.normal(size=(4, 128)) + 1j * rng.normal(size=(4, 128))
        R = superres.smoothed_covariance(csi, 64)
        assert R.shape == (64, 64)
        assert np.abs(R - R.conj().T).max() < 1e-14

    def test_forward_backward_persymmetry(self, ofdm):
        rng = np.random.default_rng(1)
        csi = rng.normal(size=(2, 32)) + 1j * rng.normal(size=(2, 32))
        R = superres.smoothed_covariance(csi, 16, forward_backward=True)
        J = np.fliplr(np.eye(16))
        assert np.abs(R - J @ R.conj() @ J).max() < 1e-12

    def test_bad_subarray(self):
        with pytest.raises(ValueError):
            superres.smoothed_covariance(np.zeros((2, 16), complex), 17)


class TestJacobiEigen:
    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 24))
    @settings(max_examples=25, deadline=None)
    def test_matches_numpy(self, seed, n):
        rng = np.random.default_rng(seed)
        A = random_hermitian(rng, n)
        w, V = superres.eig_hermitian(A)
        scale = max(np.abs(A).max(), 1e-30)
        # eigen residual A V = V diag(w)
        assert np.abs(A @ V - V @ np.diag(w)).max() / scale < 1e-9
        # orthonormality
        assert np.abs(V.conj().T @ V - np.eye(n)).max() < 1e-9
        # eigenvalues (descending) match LAPACK's
        assert np.allclose(w, np.linalg.eigvalsh(A)[::-1],
                           atol=1e-9 * scale)

    def test_rejects_non_hermitian(self):
        with pytest.raises(ValueError):
            superres.eig_hermitian(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestMdl:
    def test_three_sources(self):
        # [DERIVED] MDL evaluated on constructed eigenvalues: three strong
        # sources over a flat noise floor
        lam = np.array([100.0, 50.0, 20.0] + [1.0] * 17)
        assert superres.mdl_order(lam, n_obs=200) == 3

    def test_pure_noise(self):
        lam = np.ones(16)
        assert superres.mdl_order(lam, n_obs=100) == 0

    def test_noiseless_tail(self):
        # numerically zero tail must behave as a flat floor, not inflate k
        lam = np.array([1.0, 0.5, 1e-17, 3e-18, 1e-18])
        assert superres.mdl_order(lam, n_obs=500) == 2


class TestExtraction:
    def test_single_path_within_half_step(self, ofdm):
        tau = 17.3e-9
        paths = [datagen.PathRecord(tof=tau, gain=1.0 + 0j, bounces=0,
                                    va_index=0)]
        csi = channel.synthesize(paths, ofdm)
        grid = superres.DelayGrid(t_min=0.0, t_max=60e-9, step=1e-10)
        cfg = superres.ExtractConfig(grid=grid, subarray_len=64)
        fs = superres.extract_features(csi, cfg, ofdm.subcarrier_spacing)
        assert len(fs) == 1
        assert abs(fs.values[0] - tau) <= grid.step / 2

    def test_preset_sample_accuracy(self, ofdm):
        scene = rectangle_room(5.0, 5.0, (0.1, 0.1))
        sample = datagen.trace(scene, [3.2, 1.4], max_bounce=1)
        csi = channel.synthesize(sample.paths, ofdm)
        grid = superres.default_grid(ofdm, scene.diameter(), 1)
        cfg = superres.ExtractConfig(grid=grid)
        fs = superres.extract_features(csi, cfg, ofdm.subcarrier_spacing)
        true = sample.tofs()
        assert len(fs) == len(true)
        assert np.abs(fs.values - true).max() * C < 0.05

    def test_tdoa_leading_zero(self, ofdm):
        scene = rectangle_room(5.0, 5.0, (0.1, 0.1))
        sample = datagen.trace(scene, [1.2, 3.4], max_bounce=1)
        csi = channel.synthesize(sample.paths, ofdm)
        grid = superres.default_grid(ofdm, scene.diameter(), 1)
        fs = superres.extract_features(csi, superres.ExtractConfig(grid=grid),
                                       ofdm.subcarrier_spacing,
                                       modality="tdoa")
        assert fs.values[0] == 0.0
        assert np.all(np.diff(fs.values) >= 0)

    def test_feature_set_validation(self):
        with pytest.raises(ValueError):
            superres.FeatureSet(values=np.array([2.0, 1.0]), modality="tof")
        with pytest.raises(ValueError):
            superres.FeatureSet(values=np.array([1e-9]), modality="tdoa")
        with pytest.raises(ValueError):
            superres.FeatureSet(values=np.array([]), modality="tof")


class TestRefinePaths:
    def test_recovers_exact_delays_and_gains(self, ofdm):
        scene = rectangle_room(5.0, 5.0, (0.1, 0.1),
                               gamma=(0.9, 0.8, 0.6, 0.5))
        sample = datagen.trace(scene, [3.1, 1.7], max_bounce=1)
        csi = channel.synthesize(sample.paths, ofdm)
        grid = superres.default_grid(ofdm, scene.diameter(), 1)
        fs = superres.extract_features(csi, superres.ExtractConfig(grid=grid),
                                       ofdm.subcarrier_spacing)
        taus, amps, rel = superres.refine_paths(csi, fs.values,
                                                ofdm.subcarrier_spacing)
        true_taus = np.sort(sample.tofs())
        assert taus.size == true_taus.size
        assert np.abs(taus - true_taus).max() < 1e-13
        assert rel < 1e-9
        # gain magnitudes match the 1/d * Gamma channel model
        true_gains = np.abs(sample.gains()[np.argsort(sample.tofs())])
        assert np.abs(np.abs(amps) - true_gains).max() < 1e-9

    def test_rel_residual_reflects_noise(self, ofdm):
        scene = rectangle_room(5.0, 5.0, (0.1, 0.1))
        sample = datagen.trace(scene, [2.0, 2.5], max_bounce=1)
        noisy = channel.OfdmConfig(carrier_hz=2e9, bandwidth_hz=400e6,
                                   n_subcarriers=128, snapshots=16,
                                   snr_db=10.0)
        csi = channel.synthesize(sample.paths, noisy, seed=3)
        _, _, rel = superres.refine_paths(csi, np.sort(sample.tofs()),
                                          ofdm.subcarrier_spacing)
        assert 1e-3 < rel < superres.amplitude_rel_max(10.0, 16)


class TestPathRanges:
    def _exact(self):
        scene = rectangle_room(5.0, 5.0, (0.1, 0.1),
                               gamma=(0.9, 0.8, 0.6, 0.5))
        sample = datagen.trace(scene, [3.1, 1.7], max_bounce=1)
        order = np.argsort(sample.tofs())
        taus = sample.tofs()[order]
        amps = sample.gains()[order]
        return scene, sample, taus, amps

    def test_orders_by_reflection_coefficient(self):
        scene, sample, taus, amps = self._exact()
        vec = superres.path_ranges(taus, amps, 5, 20.0, rel=0.0)
        assert vec is not None and vec.shape == (5,)
        assert vec[0] == pytest.approx(sample.paths[0].tof * C, abs=1e-9)
        refl = sorted((p for p in sample.paths if p.bounces == 1),
                      key=lambda p: -abs(p.gain) * C * p.tof)
        assert vec[1:] == pytest.approx([p.tof * C for p in refl], abs=1e-9)

    def test_rejects_wrong_count_and_bad_fit(self):
        _, _, taus, amps = self._exact()
        assert superres.path_ranges(taus[:4], amps[:4], 5, 20.0, 0.0) is None
        assert superres.path_ranges(taus, amps, 5, 20.0, rel=0.5) is None
        assert superres.path_ranges(taus, amps, 5, 0.5, rel=0.0) is None
        merged = taus.copy()
        merged[2] = merged[1]
        assert superres.path_ranges(merged, amps, 5, 20.0, 0.0) is None
        weak = amps.copy()
        weak[3] *= 1e-3  # implausible reflection coefficient
        assert superres.path_ranges(taus, weak, 5, 20.0, 0.0) is None

    def test_rel_max_thresholds(self):
        assert superres.amplitude_rel_max(None, 16) == pytest.approx(1e-3)
        expected = 3.0 * 10.0 ** (-0.5) / 4.0
        assert superres.amplitude_rel_max(10.0, 16) == pytest.approx(expected)
