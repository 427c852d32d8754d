import numpy as np
import pytest

from rfslamlab import datagen, nn, slam
from rfslamlab.geometry import C, Isometry, rectangle_room
from rfslamlab.superres import FeatureSet


def random_rotation(rng, dim):
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_model(rng, dim=2, n_vas=4, modality="tof"):
    encoder = nn.mlp(n_vas + 1, dim, [8], rng)
    return slam.SlamModel(encoder, dim, n_vas, rng, modality=modality)


class TestDecode:
    def test_tof_oracle(self, rng):
        model = make_model(rng)
        pos = np.array([1.0, 2.0])
        rec = model.decode(pos)
        expected = np.linalg.norm(model.va - pos, axis=1) / C
        assert np.allclose(rec, expected, atol=0, rtol=1e-15)

    def test_tdoa_leading_zero(self, rng):
        model = make_model(rng, modality="tdoa")
        rec = model.decode(np.array([1.0, 2.0]))
        assert rec[0] == 0.0

    def test_batch_matches_single(self, rng):
        model = make_model(rng)
        P = rng.normal(size=(6, 2))
        rec, _, _ = model.decode_batch(P)
        for i in range(6):
            assert np.allclose(rec[i], model.decode(P[i]))

    @pytest.mark.parametrize("modality", ["tof", "tdoa"])
    def test_joint_isometry_invariance(self, rng, modality):
        """Applying one isometry to the position and every anchor must not
        change the decoded vector (<= 1e-10)."""
        model = make_model(rng, modality=modality)
        T = Isometry(R=random_rotation(rng, 2), t=rng.normal(size=2))
        pos = rng.normal(size=2)
        before = model.decode(pos)
        model.va = T.apply(model.va)
        after = model.decode(T.apply(pos))
        assert np.abs(after - before).max() <= 1e-10

    @pytest.mark.parametrize("modality", ["tof", "tdoa"])
    def test_decoder_gradient_finite_diff(self, rng, modality):
        model = make_model(rng, modality=modality)
        P = rng.normal(size=(3, 2)) * 2.0
        g_rec = rng.normal(size=(3, model.n_vas + 1))
        if modality == "tdoa":
            g_rec[:, 0] = 0.0
        rec, units, _ = model.decode_batch(P)
        model.va_grad[...] = 0.0
        dpos = model.accumulate_decoder_grads(g_rec, units)
        eps = 1e-7

        def total(positions, va):
            saved = model.va
            model.va = va
            out = 0.0
            for i in range(3):
                out += float(g_rec[i] @ model.decode(positions[i]))
            model.va = saved
            return out

        for i in range(3):
            for d in range(2):
                hi = P.copy()
                hi[i, d] += eps
                lo = P.copy()
                lo[i, d] -= eps
                fd = (total(hi, model.va) - total(lo, model.va)) / (2 * eps)
                assert dpos[i, d] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        for r in range(model.va.shape[0]):
            for d in range(2):
                hi = model.va.copy()
                hi[r, d] += eps
                lo = model.va.copy()
                lo[r, d] -= eps
                fd = (total(P, hi) - total(P, lo)) / (2 * eps)
                assert model.va_grad[r, d] == pytest.approx(fd, rel=1e-5,
                                                            abs=1e-9)


class TestConstraints:
    def test_mask_layout_2d(self, rng):
        model = make_model(rng, dim=2, n_vas=3)
        assert model.frozen[0].all()          # anchor at the origin
        assert model.frozen[1, 0] and not model.frozen[1, 1]
        assert model.va[0] == pytest.approx([0.0, 0.0])
        assert model.va[1, 0] == 0.0

    def test_mask_layout_3d(self, rng):
        encoder = nn.mlp(4, 3, [8], rng)
        model = slam.SlamModel(encoder, 3, 3, rng)
        assert model.frozen[1, :2].all() and not model.frozen[1, 2]
        assert model.frozen[2, 0] and not model.frozen[2, 1:].any()

    def test_frozen_bits_survive_1000_steps(self, rng):
        """Pinned coordinates are bit-identical across optimizer steps."""
        model = make_model(rng, dim=2, n_vas=3)
        frozen_before = model.va[model.frozen].copy()
        opt = nn.Adam([("va", model.va, model.va_grad)], lr=1e-2)
        for _ in range(1000):
            model.va_grad[...] = rng.normal(size=model.va_grad.shape)
            model.va_grad[model.frozen] = 0.0
            opt.step()
            model.apply_constraints()
        assert np.array_equal(model.va[model.frozen], frozen_before)
        assert not np.allclose(model.va[~model.frozen],
                               np.zeros(np.count_nonzero(~model.frozen)))

    def test_freeze_all(self, rng):
        model = make_model(rng, dim=2, n_vas=2)
        coords = rng.normal(size=(3, 2))
        model.freeze_all_vas(coords)
        assert model.frozen.all()
        assert np.array_equal(model.va, coords)


class TestInputs:
    def test_tof_input_layout(self):
        scene = rectangle_room(5.0, 5.0, (0.1, 0.1))
        s = datagen.trace(scene, [2.0, 3.0], max_bounce=1)
        v = slam.tof_input(s, 4)
        assert v.shape == (5,)
        for p in s.paths:
            assert v[p.va_index] == pytest.approx(p.tof * C)

    def test_feature_input_padding(self):
        fs = FeatureSet(values=np.array([1.0, 2.0]) / C, modality="tof")
        v = slam.feature_input(fs, 4)
        assert v == pytest.approx([1.0, 2.0, 2.0, 2.0])

    def test_set_input_meters(self):
        fs = FeatureSet(values=np.array([1.0, 2.0]) / C, modality="tof")
        assert slam.set_input(fs) == pytest.approx([1.0, 2.0])

    def test_csi_input_normalized(self, rng):
        csi = rng.normal(size=(4, 16)) + 1j * rng.normal(size=(4, 16))
        x = slam.csi_input(csi)
        assert x.shape == (2, 16)
        assert np.mean(np.hypot(x[0], x[1])) == pytest.approx(1.0)


def tiny_problem(rng, n=40, modality="tof"):
    scene = rectangle_room(5.0, 5.0, (0.1, 0.1))
    pos = datagen.sample_positions(scene, n, margin=0.25, seed=2)
    samples = [datagen.trace(scene, p, 1) for p in pos]
    if modality == "tdoa":
        feats = [FeatureSet(values=datagen.to_tdoa(s), modality="tdoa")
                 for s in samples]
        inputs = [slam.feature_input(f, 5) for f in feats]
    else:
        feats = [s.tofs() for s in samples]
        inputs = [slam.tof_input(s, 4) for s in samples]
    return samples, feats, inputs


class TestTraining:
    def test_loss_decreases(self, rng):
        samples, feats, inputs = tiny_problem(rng)
        model = make_model(rng, n_vas=4)
        cfg = slam.TrainConfig(epochs=30, batch_size=16, lr=1e-2, n_vas=4,
                               seed=0, pretrain_epochs=5)
        history = slam.train(feats, inputs, model, cfg)
        assert len(history) == 30
        assert history[-1] < history[0]

    def test_budget_validation(self, rng):
        model = make_model(rng, n_vas=2)
        feats = [np.array([1.0, 2.0, 3.0, 4.0]) / C]
        with pytest.raises(ValueError):
            slam.train(feats, [np.zeros(3)], model,
                       slam.TrainConfig(epochs=1, n_vas=2))

    def test_zero_epochs_no_change(self, rng):
        samples, feats, inputs = tiny_problem(rng)
        model = make_model(rng, n_vas=4)
        va_before = model.va.copy()
        w_before = next(iter(model.encoder.named_params()))[1].copy()
        history = slam.train(feats, inputs, model,
                             slam.TrainConfig(epochs=0, n_vas=4))
        assert history == []
        assert np.array_equal(model.va, va_before)
        assert np.array_equal(next(iter(model.encoder.named_params()))[1],
                              w_before)

    def test_supervised_fits(self, rng):
        samples, feats, inputs = tiny_problem(rng)
        labels = np.stack([s.user for s in samples])
        model = make_model(rng, n_vas=4)
        cfg = slam.TrainConfig(epochs=60, batch_size=16, lr=1e-2, n_vas=4)
        history = slam.train_supervised(inputs, labels, model, cfg)
        assert history[-1] < history[0]
        pred = slam.predict_positions(model, inputs)
        assert np.median(np.linalg.norm(pred - labels, axis=1)) < 1.0

    def test_restart_selection_prefers_labeled_fit(self, rng):
        samples, feats, inputs = tiny_problem(rng)
        labels = np.stack([s.user for s in samples])
        cfg = slam.TrainConfig(epochs=20, batch_size=16, lr=3e-3, n_vas=4,
                               seed=0, n_restarts=2, pretrain_epochs=10)
        model, history, all_hist = slam.train_restarts(
            feats, inputs, cfg, 2,
            lambda r: nn.mlp(5, 2, [8], r),
            labeled_indices=list(range(10)),
            labeled_positions=labels[:10])
        assert len(all_hist) == 2
        assert len(history) == 20

    def test_prune_keeps_anchor(self, rng):
        samples, feats, inputs = tiny_problem(rng)
        model = make_model(rng, n_vas=4)
        retained = slam.prune_vas(model, feats[:10], inputs[:10])
        assert retained[0] == 0
        all_kept = slam.prune_vas(model, feats[:10], inputs[:10],
                                  rho_min=0.0)
        assert all_kept == list(range(5))


class TestRefineVas:
    def test_recovers_anchors_from_exact_ranges(self, rng):
        # identity encoder: inputs are the positions themselves
        enc = nn.Dense(2, 2, rng)
        enc.params["W"][...] = np.eye(2)
        enc.params["b"][...] = 0.0
        model = slam.SlamModel(enc, 2, 3, rng, constrain=False)
        true_va = np.array([[0.0, 0.0], [4.0, 1.0], [-2.0, 3.0],
                            [1.0, -5.0]])
        # keep the anchor row the nearest point, as the direct path is
        # in a convex room
        pos = rng.uniform(-1.0, 1.0, size=(40, 2))
        feats = [np.sort(np.linalg.norm(true_va - p, axis=1)) / C
                 for p in pos]
        inputs = list(pos)
        model.va[...] = true_va + rng.normal(scale=0.05,
                                             size=true_va.shape)
        model.va[0] = 0.0  # frozen anchor row
        start_err = np.abs(model.va[1:] - true_va[1:]).max()
        slam.refine_vas(model, feats, inputs)
        end_err = np.abs(model.va[1:] - true_va[1:]).max()
        # occasional matching swaps between nearby anchors keep this from
        # being exact, but the polish must clearly tighten the map
        assert end_err < 0.02 < start_err
        assert np.array_equal(model.va[0], np.zeros(2))


class TestSaveRun:
    def test_artifacts(self, rng, tmp_path):
        samples, feats, inputs = tiny_problem(rng)
        model = make_model(rng, n_vas=4)
        cfg = slam.TrainConfig(epochs=2, batch_size=16, n_vas=4,
                               pretrain_epochs=0)
        history = slam.train(feats, inputs, model, cfg)
        out = tmp_path / "run"
        slam.save_run(out, model, cfg, history, retained=[0, 1])
        for name in ("config.json", "loss_history.csv", "encoder.ckpt",
                     "va_coords.npy", "retained_vas.json"):
            assert (out / name).exists()
        assert np.array_equal(np.load(out / "va_coords.npy"), model.va)


class TestCalibrateFromRanges:
    def _ranges(self, rng, true_va, n):
        dim = true_va.shape[1]
        pos = rng.uniform(0.5, 4.5, size=(n, dim))
        return pos, np.stack(
            [np.linalg.norm(pos - va, axis=1) for va in true_va], axis=1)

    def test_exact_recovery_2d(self, rng):
        true_va = np.array([[0.0, 0.0], [-1.0, 2.0], [6.0, 1.0],
                            [2.0, -3.0], [1.5, 8.0]])
        pos_true, X = self._ranges(rng, true_va, 200)
        model = make_model(rng, dim=2, n_vas=4)
        pos = slam.calibrate_from_ranges(model, X)
        assert pos is not None
        # gauge-invariant check: calibrated geometry reproduces every
        # observed range
        assert np.abs(np.linalg.norm(pos, axis=1) - X[:, 0]).max() < 1e-8
        for k in range(1, 5):
            d = np.linalg.norm(pos - model.va[k], axis=1)
            assert np.abs(d - X[:, k]).max() < 1e-8
        assert model.va[1, 0] == 0.0  # constraint gauge

    def test_exact_recovery_3d(self, rng):
        true_va = np.array([[0.0, 0.0, 0.0], [-1.0, 2.0, 1.0],
                            [6.0, 1.0, -2.0], [2.0, -3.0, 4.0],
                            [1.5, 8.0, 0.5]])
        pos_true, X = self._ranges(rng, true_va, 300)
        encoder = nn.mlp(5, 3, [8], rng)
        model = slam.SlamModel(encoder, 3, 4, rng)
        pos = slam.calibrate_from_ranges(model, X)
        assert pos is not None
        assert np.abs(np.linalg.norm(pos, axis=1) - X[:, 0]).max() < 1e-7
        for k in range(1, 5):
            d = np.linalg.norm(pos - model.va[k], axis=1)
            assert np.abs(d - X[:, k]).max() < 1e-7
        assert np.abs(model.va[1, :2]).max() < 1e-9
        assert abs(model.va[2, 0]) < 1e-9

    def test_distills_encoder(self, rng):
        true_va = np.array([[0.0, 0.0], [-1.0, 2.0], [6.0, 1.0],
                            [2.0, -3.0], [1.5, 8.0]])
        _, X = self._ranges(rng, true_va, 300)
        model = make_model(rng, dim=2, n_vas=4)
        cfg = slam.TrainConfig(epochs=0, batch_size=32, lr=1e-2, n_vas=4)
        pos = slam.calibrate_from_ranges(model, X, inputs=list(X),
                                         distill_epochs=150, cfg=cfg)
        pred = slam.predict_positions(model, list(X))
        med = np.median(np.linalg.norm(pred - pos, axis=1))
        assert med < 0.25

    def test_degenerate_returns_none(self, rng):
        # rank-deficient observations: all ranges from a single point
        X = np.ones((50, 3))
        model = make_model(rng, dim=2, n_vas=2)
        va_before = model.va.copy()
        assert slam.calibrate_from_ranges(model, X) is None
        assert np.array_equal(model.va, va_before)


class TestRangedInput:
    def test_uses_identified_ranges(self):
        fs = FeatureSet(values=np.array([0.0, 1e-9, 2e-9]),
                        modality="tdoa",
                        ranges=np.array([2.0, 5.0, 3.0]))
        v = slam.ranged_input(fs, 4)
        assert v == pytest.approx([2.0, 5.0, 3.0, 3.0])

    def test_none_without_ranges(self):
        fs = FeatureSet(values=np.array([0.0, 1e-9]), modality="tdoa")
        assert slam.ranged_input(fs, 4) is None


class TestBundleAdjust:
    def test_snaps_anchors_to_exact_geometry(self, rng):
        enc = nn.Dense(2, 2, rng)
        enc.params["W"][...] = np.eye(2)
        enc.params["b"][...] = 0.0
        model = slam.SlamModel(enc, 2, 3, rng, constrain=False)
        true_va = np.array([[0.0, 0.0], [4.0, 1.0], [-2.0, 3.0],
                            [1.0, -5.0]])
        pos = rng.uniform(-1.0, 1.0, size=(60, 2))
        feats = [np.sort(np.linalg.norm(true_va - p, axis=1)) / C
                 for p in pos]
        model.va[...] = true_va + rng.normal(scale=0.05,
                                             size=true_va.shape)
        model.va[0] = 0.0
        start = np.abs(model.va[1:] - true_va[1:]).max()
        slam.bundle_adjust(model, feats, list(pos), rounds=4)
        end = np.abs(model.va[1:] - true_va[1:]).max()
        assert end < 0.5 * start
        assert end < 0.03
