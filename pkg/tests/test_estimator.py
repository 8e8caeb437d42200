import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from msdetr import MSDETRDetector
from msdetr.data import generate

TINY = dict(num_levels=3, d_model=16, enc_layers=1, dec_layers=1, n_heads=2, n_points=2, n_queries=8,
            backbone_widths=(8, 16, 16, 16), backbone_blocks=(1, 2, 1), ca_reduction=4, vov_blocks=1)


@pytest.fixture(scope="module")
def data():
    pairs = generate(12, image_size=32, seed=4)
    X = np.stack([s.image for s, _ in pairs])
    y = [{"boxes": s.boxes, "labels": s.labels} for s, _ in pairs]
    return X, y


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return MSDETRDetector(model_params=TINY, epochs=2, batch_size=4, lr=1e-3, warmup_steps=0,
                          top_k=10).fit(X[:8], y[:8], X[8:], y[8:])


def test_get_set_params_and_clone():
    est = MSDETRDetector(model_params=TINY, epochs=3)
    params = est.get_params()
    assert params["epochs"] == 3 and params["model_params"] == TINY
    c = clone(est.set_params(lr=5e-4))
    assert c.lr == 5e-4 and not hasattr(c, "model_")


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        MSDETRDetector().predict(data[0])


def test_fit_records_history(fitted):
    assert len(fitted.history_) == 2
    assert 1 <= fitted.best_epoch_ <= 2


def test_predict_format(fitted, data):
    preds = fitted.predict(data[0][:3])
    assert len(preds) == 3
    for p in preds:
        assert p["boxes"].shape == (10, 4)
        assert np.all(np.diff(p["scores"]) <= 0)
        assert np.all((p["labels"] >= 0) & (p["labels"] < 5))


def test_score_in_unit_interval(fitted, data):
    X, y = data
    assert 0.0 <= fitted.score(X[8:], y[8:]) <= 1.0


def test_fuse_preserves_predictions(fitted, data):
    import copy
    est = copy.deepcopy(fitted)
    before = est.predict(data[0][:2])
    est.fuse()
    assert est.model_.rep_blocks() == []
    after = est.predict(data[0][:2])
    for a, b in zip(before, after):
        np.testing.assert_allclose(a["scores"], b["scores"], atol=1e-9)
        np.testing.assert_allclose(a["boxes"], b["boxes"], atol=1e-9)


def test_fit_is_seeded(data):
    X, y = data
    kw = dict(model_params=TINY, epochs=1, batch_size=4, lr=1e-3, warmup_steps=0)
    a = MSDETRDetector(**kw).fit(X[:8], y[:8])
    b = MSDETRDetector(**kw).fit(X[:8], y[:8])
    assert a.history_[0]["train_objective"] == b.history_[0]["train_objective"]


def test_fit_validates_inputs(data):
    X, y = data
    est = MSDETRDetector(model_params=TINY, epochs=1)
    with pytest.raises(ValueError, match="targets"):
        est.fit(X[:4], y[:3])
    with pytest.raises(ValueError, match="square"):
        est.fit(np.zeros((2, 3, 32, 64)), y[:2])
