import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from affordet.core import Detection
from affordet.estimator import AffordanceDetector
from affordet.metrics import EvalReport
from affordet.validation import check_image, check_images, check_samples
from conftest import tiny_config


def test_params_roundtrip_and_clone():
    cfg = tiny_config()
    est = AffordanceDetector(config=cfg, mode="light")
    params = est.get_params()
    assert params["mode"] == "light" and params["config"] is cfg
    assert clone(est).get_params()["mode"] == "light"


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        AffordanceDetector(config=tiny_config()).predict(np.zeros((1, 64, 64, 3), np.float32))


def test_fit_predict_transform_score(samples, tmp_path):
    cfg = tiny_config(**{"train.epochs": 1, "train.warmup_epochs": 0, "train.eval_every": 0})
    est = AffordanceDetector(config=cfg).fit(samples[:4])
    imgs = np.stack([s.image for s in samples[4:6]])
    dets = est.predict(imgs)
    assert len(dets) == 2 and all(isinstance(d, Detection) for row in dets for d in row)
    maps = est.transform(imgs)
    assert maps.shape == (2, 64, 64, len(cfg.data.affordance_classes))
    assert (maps >= 0).all() and (maps <= 1).all()
    maps_from_samples = est.transform(samples[4:6])
    assert np.array_equal(maps, maps_from_samples)
    rep = est.evaluate(samples[4:])
    assert isinstance(rep, EvalReport) and 0 <= est.score(samples[4:]) <= 1
    est.trainer_.save(tmp_path / "ck")
    again = AffordanceDetector.from_checkpoint(tmp_path / "ck")
    assert np.array_equal(again.transform(imgs), maps)


def test_image_validation():
    assert check_image(np.zeros((4, 4, 3), np.uint8)).dtype == np.float32
    assert check_image(np.full((2, 2, 3), 255, np.uint8)).max() == 1.0
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_image(np.full((4, 4, 3), 2.0))
    with pytest.raises(ValueError):
        check_image(np.full((4, 4, 3), np.nan))
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4, 3)), size=8)
    assert check_images(np.zeros((4, 4, 3))).shape == (1, 4, 4, 3)


def test_sample_validation(samples):
    check_samples(samples, 5, 5)
    with pytest.raises(ValueError, match="class id"):
        check_samples(samples, 1, 5)
    with pytest.raises(ValueError, match="affordance map"):
        check_samples(samples, 5, 2)
    with pytest.raises(ValueError, match="unique"):
        check_samples([samples[0], samples[0]], 5, 5)
    with pytest.raises(TypeError):
        check_samples([object()], 5, 5)
