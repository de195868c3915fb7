import numpy as np
import pytest
from sklearn.base import clone

from tdet.boxes import Detection
from tdet.data import SyntheticSceneConfig, generate_video
from tdet.estimator import TemporalObjectDetector
from tdet.tensor import ContractError


def tiny_video(seed=0, num_frames=8):
    cfg = SyntheticSceneConfig(image_size=16, object_size=(6, 8),
                               velocity=(0.3, 0.8), num_occluders=0,
                               num_frames=num_frames, seed=seed)
    return generate_video(cfg)


def tiny_estimator(**kw):
    defaults = dict(input_size=16, seq_len=3, epochs=1, steps_per_epoch=4,
                    pretrain_epochs=0, conf_threshold=0.0, seed=0)
    defaults.update(kw)
    return TemporalObjectDetector(**defaults)


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = tiny_estimator()
        params = est.get_params()
        assert params["input_size"] == 16
        est.set_params(epochs=3)
        assert est.get_params()["epochs"] == 3

    def test_clone_unfitted(self):
        est = tiny_estimator(seq_len=5)
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert not hasattr(c, "model_params_")

    def test_fit_returns_self(self):
        est = tiny_estimator()
        assert est.fit([tiny_video()]) is est
        assert hasattr(est, "model_params_")
        assert est.loss_trace_


class TestValidation:
    def test_predict_before_fit(self):
        with pytest.raises(ContractError):
            tiny_estimator().predict(tiny_video())

    def test_score_before_fit(self):
        with pytest.raises(ContractError):
            tiny_estimator().score([tiny_video()])

    def test_fit_empty(self):
        with pytest.raises(ValueError):
            tiny_estimator().fit([])

    def test_predict_wrong_frame_shape(self):
        est = tiny_estimator().fit([tiny_video()])
        with pytest.raises(ValueError):
            est.predict([np.zeros((3, 8, 8))])


class TestPredict:
    def test_per_frame_detection_lists(self):
        v = tiny_video(seed=1)
        est = tiny_estimator().fit([v])
        out = est.predict(v)
        assert len(out) == v.num_frames
        for dets in out:
            assert all(isinstance(d, Detection) for d in dets)
        for t, dets in enumerate(out):
            assert all(d.frame_index == t for d in dets)

    def test_deterministic_refit(self):
        v = tiny_video(seed=2)
        a = tiny_estimator().fit([v])
        b = tiny_estimator().fit([v])
        assert a.loss_trace_ == b.loss_trace_

    def test_score_in_unit_interval(self):
        v = tiny_video(seed=3)
        est = tiny_estimator().fit([v])
        assert 0.0 <= est.score([v]) <= 1.0
