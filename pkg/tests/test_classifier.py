import math

import numpy as np
import pytest
import torch
from sklearn.base import clone

from bpa.classifier import ClassifierConfig, LesionClassifier, class_weights, weighted_loss
from bpa.toy import render_batch

from oracles import central_difference
from oracles import class_weights as oracle_weights
from oracles import weighted_bce

FAST = dict(backbone="small_cnn", input_size=16, learning_rate=0.01, epochs=2, batch_size=8, randaugment_n=2)


@pytest.fixture(scope="module")
def toy():
    X = np.concatenate([render_batch(12, 16, seed=0), render_batch(6, 16, seed=1, grid=True)])
    y = np.array([0] * 12 + [1] * 6)
    return X, y


def test_class_weights():
    assert class_weights(100, 100) == (1.0, 1.0)
    assert class_weights(1, 1) == (1.0, 1.0)
    w_neg, w_pos = class_weights(10000, 230)
    assert round(w_neg, 4) == 0.5115 and round(w_pos, 4) == 22.2391
    assert math.isclose(w_neg * 10000, w_pos * 230)
    assert (w_neg, w_pos) == oracle_weights(10000, 230)
    with pytest.raises(ValueError):
        class_weights(0, 5)


def test_weighted_loss_hand_value():
    loss = weighted_loss(torch.tensor([0.8, 0.2]), torch.tensor([1, 0]), (2.0, 1.0))
    assert loss.item() == pytest.approx(1.5 * -math.log(0.8), abs=1e-6)
    assert round(loss.item(), 4) == 0.3347


def test_unit_weights_equal_plain_bce():
    rng = np.random.default_rng(0)
    s = torch.as_tensor(rng.uniform(0.01, 0.99, 20))
    y = torch.as_tensor(rng.integers(0, 2, 20)).double()
    plain = torch.nn.functional.binary_cross_entropy(s, y)
    assert weighted_loss(s, y, (1.0, 1.0)).item() == pytest.approx(plain.item(), rel=1e-12)
    assert weighted_loss(s, y, (0.7, 3.0)).item() == pytest.approx(weighted_bce(s.tolist(), y.tolist(), 0.7, 3.0), rel=1e-12)


def test_clamped_perfect_scores_are_bounded():
    w = (2.0, 5.0)
    loss = weighted_loss(torch.tensor([1.0, 0.0, 1.0]), torch.tensor([1, 0, 1]), w)
    assert loss.item() <= max(w) * -math.log(1 - 1e-7) + 1e-12
    with pytest.raises(ValueError):
        weighted_loss(torch.tensor([]), torch.tensor([]), w)


def test_weighted_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    head = torch.nn.Sequential(torch.nn.Linear(6, 5), torch.nn.Tanh(), torch.nn.Linear(5, 1)).double()
    x = torch.randn(12, 6, dtype=torch.float64)
    y = torch.tensor([0, 1] * 6)
    w = (0.6, 3.0)

    def loss_fn():
        return weighted_loss(torch.sigmoid(head(x)).view(-1), y, w)

    params = list(head.parameters())
    grads = torch.autograd.grad(loss_fn(), params)
    rng = np.random.default_rng(1)

    def f():
        with torch.no_grad():
            return loss_fn().item()

    for _ in range(10):
        k = int(rng.integers(len(params)))
        flat = params[k].data.view(-1)
        i = int(rng.integers(flat.numel()))
        numeric = central_difference(f, flat, i, 1e-6)
        analytic = grads[k].view(-1)[i].item()
        assert abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8) <= 1e-3


def test_config_defaults():
    cfg = ClassifierConfig()
    assert (cfg.backbone, cfg.input_size, cfg.learning_rate, cfg.momentum, cfg.weight_decay) == (
        "efficientnet_b1_imagenet", 240, 1e-5, 0.9, 1e-6)
    assert (cfg.crop_scale, cfg.flip_p, cfg.randaugment_n, cfg.randaugment_m) == ((0.5, 1.0), 0.5, 6, 8)
    with pytest.raises(ValueError, match="weight_decay_mode"):
        ClassifierConfig(weight_decay_mode="cosine")
    est = cfg.to_estimator()
    assert isinstance(est, LesionClassifier) and est.get_params()["input_size"] == 240


def test_fit_predict_and_determinism(toy):
    X, y = toy
    a = LesionClassifier(**FAST).fit(X, y, X_val=X, y_val=y)
    b = LesionClassifier(**FAST).fit(X, y)
    assert all(np.isfinite(r["loss"]) for r in a.history_)
    assert "val_auc" in a.history_[0]
    assert a.history_[-1]["loss"] == b.history_[-1]["loss"]
    s = a.decision_function(X)
    assert s.shape == (18,) and (s >= 0).all() and (s <= 1).all()
    assert np.array_equal(s, a.decision_function(X))
    assert a.predict_proba(X).shape == (18, 2)
    assert set(a.predict(X)) <= {0, 1}
    assert a.class_weights_ == pytest.approx((0.75, 1.5))
    assert a.decision_function(np.zeros((0, 16, 16, 3))).shape == (0,)


def test_fit_validation(toy):
    X, y = toy
    with pytest.raises(ValueError, match="both classes"):
        LesionClassifier(**FAST).fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError, match="outside"):
        LesionClassifier(**FAST).fit(X * 3, y)
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        LesionClassifier().decision_function(X)


def test_lr_decay_mode(toy):
    X, y = toy
    m = LesionClassifier(**{**FAST, "epochs": 3}, weight_decay=0.5, weight_decay_mode="lr_decay").fit(X, y)
    assert m.optimizer_.param_groups[0]["lr"] == pytest.approx(0.01 / 2.0)
    assert m.optimizer_.param_groups[0]["weight_decay"] == 0.0


def test_save_load_and_clone(toy, tmp_path):
    X, y = toy
    m = LesionClassifier(**{**FAST, "epochs": 1}).fit(X, y)
    m.save(tmp_path / "c.ckpt")
    loaded = LesionClassifier.load(tmp_path / "c.ckpt")
    assert np.array_equal(loaded.decision_function(X), m.decision_function(X))
    assert loaded.get_params() == m.get_params()
    assert clone(m).get_params() == m.get_params()
