import numpy as np
import pytest

from cloudseg import infer, net
from cloudseg.autoconfig import PipelineConfig
from cloudseg.errors import ArgumentError
from cloudseg.infer import (
    EnsembleModel,
    binarize,
    ensemble_mean,
    ensemble_predict_patch,
    predict_patch,
    sliding_window_predict,
)

TOY = PipelineConfig((16, 16), 2, 1, (4, 8), 2, 4)


class TestPredictPatch:
    def test_zero_weights_gives_half_everywhere(self):
        model = net.UNetModel(TOY)  # zero logits, symmetric softmax
        x = np.zeros((2, 16, 16), dtype=np.float32)
        prob = predict_patch(model, x)
        assert prob.shape == (16, 16)
        assert prob.dtype == np.float32
        assert np.allclose(prob, 0.5)

    def test_constant_head_bias_matches_hand_softmax(self):
        model = net.UNetModel(TOY)
        model.parameters()["head.b"][:] = [0.3, 1.1]
        prob = predict_patch(model, np.zeros((2, 16, 16), dtype=np.float32))
        expected = np.exp(1.1) / (np.exp(0.3) + np.exp(1.1))
        assert np.allclose(prob, expected, atol=1e-6)

    def test_range_and_determinism(self):
        model = net.init_params(TOY, 4)
        x = np.random.default_rng(0).normal(size=(2, 16, 16)).astype(np.float32)
        p1 = predict_patch(model, x)
        p2 = predict_patch(model, x)
        assert np.array_equal(p1, p2)
        assert p1.min() >= 0.0 and p1.max() <= 1.0

    def test_rejects_batched_input(self):
        model = net.init_params(TOY, 0)
        with pytest.raises(ArgumentError):
            predict_patch(model, np.zeros((1, 2, 16, 16), dtype=np.float32))


class TestEnsemble:
    def test_mean_in_list_order(self):
        a = np.full((4, 4), 0.2, dtype=np.float32)
        b = np.full((4, 4), 0.8, dtype=np.float32)
        out = ensemble_mean([a, b])
        assert np.allclose(out, 0.5)
        assert out.dtype == np.float32

    def test_single_member_identity(self):
        a = np.random.default_rng(0).random((4, 4)).astype(np.float32)
        assert np.array_equal(ensemble_mean([a]), a)

    def test_shape_mismatch(self):
        with pytest.raises(ArgumentError):
            ensemble_mean([np.zeros((4, 4)), np.zeros((5, 4))])

    def test_empty(self):
        with pytest.raises(ArgumentError):
            ensemble_mean([])

    def test_config_mismatch_rejected(self):
        other = PipelineConfig((16, 16), 2, 1, (4, 4), 2, 4)
        with pytest.raises(ArgumentError):
            EnsembleModel((net.init_params(TOY, 0), net.init_params(other, 0)))

    def test_ensemble_predict_equals_mean_of_members(self):
        members = tuple(net.init_params(TOY, s) for s in range(3))
        ens = EnsembleModel(members)
        x = np.random.default_rng(1).normal(size=(2, 16, 16)).astype(np.float32)
        direct = ensemble_mean([predict_patch(m, x) for m in members])
        assert np.array_equal(ensemble_predict_patch(ens, x), direct)


class TestSlidingWindow:
    def test_scene_equals_patch_size_matches_direct(self):
        ens = EnsembleModel((net.init_params(TOY, 2),))
        scene = np.random.default_rng(3).normal(size=(2, 16, 16)).astype(np.float32)
        direct = ensemble_predict_patch(ens, scene)
        for blend in ("uniform", "gaussian"):
            stitched = sliding_window_predict(ens, scene, overlap=0.5, blend=blend)
            assert np.array_equal(stitched, direct)

    def test_larger_scene_shape_and_range(self):
        ens = EnsembleModel((net.init_params(TOY, 2),))
        scene = np.random.default_rng(4).normal(size=(2, 40, 48)).astype(np.float32)
        out = sliding_window_predict(ens, scene, overlap=0.5)
        assert out.shape == (40, 48)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_overlap_reduces_seam_discontinuity(self):
        # jump across the overlap-0 patch boundaries should not grow when
        # overlapping with gaussian blending is enabled
        ens = EnsembleModel((net.init_params(TOY, 5),))
        # smooth scene: intra-patch maps vary gently, so any jump at a
        # seam row is a stitching artifact rather than pixel noise
        yy, xx = np.mgrid[0:48, 0:48] / 48.0
        scene = np.stack([yy, xx]).astype(np.float32)
        hard = sliding_window_predict(ens, scene, overlap=0.0)
        soft = sliding_window_predict(ens, scene, overlap=0.5)

        def seam_jump(m):
            jumps = []
            for r in (16, 32):  # overlap-0 seam rows/cols
                jumps.append(np.abs(m[r] - m[r - 1]).mean())
                jumps.append(np.abs(m[:, r] - m[:, r - 1]).mean())
            return float(np.mean(jumps))

        assert seam_jump(soft) <= seam_jump(hard)


class TestBinarize:
    def test_threshold_inclusive(self):
        prob = np.array([[0.49, 0.5], [0.51, 0.0]], dtype=np.float32)
        out = binarize(prob, 0.5)
        assert out.dtype == np.uint8
        assert out.tolist() == [[0, 1], [1, 0]]

    def test_bad_threshold(self):
        for tau in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ArgumentError):
                binarize(np.zeros((2, 2)), tau)

    def test_extreme_thresholds_monotone(self):
        prob = np.random.default_rng(0).random((8, 8)).astype(np.float32)
        lo = binarize(prob, 0.1)
        hi = binarize(prob, 0.9)
        assert np.all(hi <= lo)
