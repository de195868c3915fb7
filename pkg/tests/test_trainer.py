import math

import numpy as np
import pytest
from scipy import stats as sstats

from tdet.boxes import BBox
from tdet.data import GroundTruth, SyntheticSceneConfig, Video, generate_video
from tdet.detector import DetectorConfig, forward, init_base_params, transfer_weights
from tdet.tensor import ContractError, GradTape, Tensor, backward
from tdet.trainer import (
    Adam,
    SampleRejected,
    TrainConfig,
    TrainingSample,
    backbone_checksum,
    detection_loss,
    expected_train_tape_nodes,
    pretrain_base,
    sample_sequence,
    train,
    train_step,
)

from oracles import scalar_yolo_loss

TOY = DetectorConfig(input_size=16, backbone_channels=(4, 4), anchor=(8.0, 8.0))


def toy_modified(seed=0):
    base = init_base_params(TOY, np.random.default_rng(seed))
    return transfer_weights(base, init_seed=seed + 1)


def toy_video(num_frames=12, seed=0):
    cfg = SyntheticSceneConfig(image_size=16, object_size=(6, 8),
                               velocity=(0.3, 0.8), num_occluders=0,
                               num_frames=num_frames, seed=seed)
    return generate_video(cfg)


def gt_box(x, y, w, h, frame=0, vis=1.0):
    return GroundTruth(frame, 1, BBox(x, y, w, h), vis)


class TestDetectionLoss:
    def test_perfect_background_limit(self):
        grid = np.zeros((5, 4, 4))
        grid[4] = -40.0
        loss = detection_loss(Tensor(grid), [], TOY)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-10)

    def test_perfect_fit_coordinate_terms_vanish(self):
        # gt centered mid-cell (2, 2) of cell (0,0), size equal to the anchor
        grid = np.zeros((5, 4, 4))
        grid[4] = -40.0
        grid[4, 0, 0] = 40.0
        loss = detection_loss(Tensor(grid), [gt_box(-2.0, -2.0, 8.0, 8.0)], TOY)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-10)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        grid = rng.normal(size=(5, 4, 4))
        gts = [gt_box(1.0, 2.0, 6.0, 7.0), gt_box(9.0, 9.0, 5.0, 6.0)]
        got = float(detection_loss(Tensor(grid), gts, TOY).data)
        want = scalar_yolo_loss(grid, [(1.0, 2.0, 6.0, 7.0), (9.0, 9.0, 5.0, 6.0)],
                                TOY.stride_px, TOY.anchor, TOY.input_size)
        assert got == pytest.approx(want, abs=1e-10)

    def test_same_cell_second_gt_skipped(self):
        grid = np.zeros((5, 4, 4))
        stats = {}
        gts = [gt_box(0.0, 0.0, 3.0, 3.0), gt_box(1.0, 1.0, 3.0, 3.0)]
        detection_loss(Tensor(grid), gts, TOY, stats=stats)
        assert stats["skipped_gt"] == 1

    def test_out_of_bounds_center_rejected(self):
        with pytest.raises(ContractError):
            detection_loss(Tensor(np.zeros((5, 4, 4))), [gt_box(20.0, 2.0, 8.0, 4.0)], TOY)

    def test_fused_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        grid0 = rng.normal(size=(5, 4, 4)) * 0.5
        gts = [gt_box(1.0, 2.0, 6.0, 7.0), gt_box(9.0, 9.0, 5.0, 6.0)]
        probe = Tensor(grid0.copy(), trainable=True)
        tape = GradTape()
        loss = detection_loss(probe, gts, TOY, tape)
        analytic = backward(tape, loss)[probe].data
        eps = 1e-6
        flat = probe.data.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(detection_loss(probe, gts, TOY).data)
            flat[i] = orig - eps
            down = float(detection_loss(probe, gts, TOY).data)
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        denom = np.maximum(1e-10, np.abs(analytic.ravel()) + np.abs(num))
        assert np.max(np.abs(analytic.ravel() - num) / denom) < 1e-5


class TestSampleSequence:
    def test_single_frame_degenerate(self):
        v = toy_video(6)
        sample = sample_sequence(v, None, 1, np.random.default_rng(0))
        assert sample.supervised_index == 0
        assert len(sample.frames) == 1

    def test_deterministic(self):
        v = toy_video(12)
        a = sample_sequence(v, None, 4, np.random.default_rng(5))
        b = sample_sequence(v, None, 4, np.random.default_rng(5))
        assert a.supervised_index == b.supervised_index
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))

    def test_unannotated_window_rejected(self):
        v = toy_video(8)
        v = Video(v.frames, [], name=v.name)
        with pytest.raises(SampleRejected):
            sample_sequence(v, None, 4, np.random.default_rng(0))

    def test_supervised_index_uniform_chi2(self):
        v = toy_video(32)
        rng = np.random.default_rng(7)
        counts = np.zeros(8, dtype=int)
        for _ in range(10_000):
            counts[sample_sequence(v, None, 8, rng).supervised_index] += 1
        _, p = sstats.chisquare(counts)
        assert p > 0.01


class TestTrain:
    def _dataset(self):
        return [toy_video(12, seed=s) for s in range(2)]

    def test_zero_learning_rate_is_identity(self):
        params = toy_modified()
        before = [t.data.copy() for t in params.trainable_tensors()]
        cfg = TrainConfig(seq_len=3, epochs=2, learning_rate=0.0, seed=0,
                          steps_per_epoch=5)
        train(self._dataset(), cfg, params)
        for b, t in zip(before, params.trainable_tensors()):
            assert b.tobytes() == t.data.tobytes()

    def test_frozen_backbone_checksum_unchanged(self):
        params = toy_modified()
        checksum = backbone_checksum(params)
        cfg = TrainConfig(seq_len=3, epochs=1, learning_rate=1e-3, steps_per_epoch=10)
        train(self._dataset(), cfg, params)
        assert backbone_checksum(params) == checksum

    def test_reproducible_loss_trace(self):
        cfg = TrainConfig(seq_len=3, epochs=1, learning_rate=1e-3, steps_per_epoch=8)
        _, trace_a = train(self._dataset(), cfg, toy_modified())
        _, trace_b = train(self._dataset(), cfg, toy_modified())
        assert trace_a == trace_b

    def test_requires_transfer_params(self):
        base = init_base_params(TOY, np.random.default_rng(0))
        with pytest.raises(ContractError):
            train(self._dataset(), TrainConfig(), base)

    def test_overfit_single_sequence(self):
        params = toy_modified(seed=3)
        video = toy_video(4, seed=9)
        cfg = TrainConfig(seq_len=4, epochs=1, learning_rate=2e-2,
                          steps_per_epoch=500, seed=1)
        _, trace = train([video], cfg, params)
        losses = [v for _, _, v in trace]
        assert losses[-1] < 0.1 * losses[0]

    def test_tape_node_count_matches_closed_form(self):
        params = toy_modified()
        video = toy_video(8, seed=2)
        adam = Adam(params.trainable_tensors(), 0.0)
        rng = np.random.default_rng(3)
        for _ in range(5):
            sample = sample_sequence(video, None, 5, rng)
            _, nodes = train_step(params, sample, adam)
            assert nodes == expected_train_tape_nodes(sample.supervised_index)

    def test_tape_node_count_independent_of_backbone_depth(self):
        shallow = DetectorConfig(input_size=16, backbone_channels=(4, 4),
                                 anchor=(8.0, 8.0))
        deep = DetectorConfig(input_size=64, backbone_channels=(4, 4, 4, 4),
                              anchor=(8.0, 8.0))
        counts = []
        for cfg, size in ((shallow, 16), (deep, 64)):
            params = transfer_weights(init_base_params(cfg, np.random.default_rng(0)), 1)
            frames = [np.zeros((3, size, size))] * 3
            sample = TrainingSample(frames, 2, [gt_box(1.0, 1.0, 4.0, 4.0)])
            adam = Adam(params.trainable_tensors(), 0.0)
            _, nodes = train_step(params, sample, adam)
            counts.append(nodes)
        assert counts[0] == counts[1]


class TestFrozenPrefixGradients:
    def test_full_path_matches_finite_differences(self):
        params = toy_modified(seed=5)
        rng = np.random.default_rng(6)
        # nonzero history weights so the ConvLSTM path carries signal
        c = params.config.feature_channels
        params.head_kernel.data[:, c:] = rng.normal(size=(5, c, 1, 1)) * 0.3
        frames = [Tensor(rng.uniform(0, 1, (3, 16, 16))) for _ in range(3)]
        gts = [gt_box(3.0, 4.0, 6.0, 7.0)]

        def loss_and_tape():
            tape = GradTape()
            grid = forward(frames, "sequenced", params, tape)
            return detection_loss(grid, gts, params.config, tape), tape

        loss, tape = loss_and_tape()
        grads = backward(tape, loss)
        eps = 1e-5
        worst = 0.0
        # per-tensor norm-wise relative error: elementwise comparison is not
        # meaningful for entries at the finite-difference roundoff floor
        for t in params.trainable_tensors():
            analytic = grads[t].data.ravel()
            flat = t.data.ravel()
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_and_tape()[0].data)
                flat[i] = orig - eps
                down = float(loss_and_tape()[0].data)
                flat[i] = orig
                num[i] = (up - down) / (2 * eps)
            denom = max(1e-12, np.linalg.norm(analytic) + np.linalg.norm(num))
            worst = max(worst, float(np.linalg.norm(analytic - num) / denom))
        assert worst < 1e-4


class TestPretrain:
    def test_improves_loss(self):
        params = init_base_params(TOY, np.random.default_rng(8))
        videos = [toy_video(12, seed=s) for s in range(2)]
        cfg = TrainConfig(seq_len=1, epochs=1, learning_rate=5e-3,
                          steps_per_epoch=200, seed=2)
        _, trace = pretrain_base(videos, cfg, params)
        first = np.mean([v for _, _, v in trace[:20]])
        last = np.mean([v for _, _, v in trace[-20:]])
        assert last < first

    def test_rejects_modified_params(self):
        with pytest.raises(ContractError):
            pretrain_base([toy_video(8)], TrainConfig(), toy_modified())
