import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from fractoseg.errors import ShapeMismatch
from fractoseg.losses import (
    RampSchedule,
    consistency_loss,
    consistency_terms,
    cross_entropy,
    dice_loss,
    lambda_at,
    negative_learning,
    one_hot,
    supervised_loss,
)

torch.set_default_dtype(torch.float32)


def central_diff(f, x, h=1e-4):
    """Numerical gradient of scalar f at x (float64 numpy), one coordinate at a time."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def _autograd(fn, x):
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy()


def _setup(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 1.5, (1, 7, 4, 4))
    y = torch.from_numpy(rng.integers(0, 7, (1, 4, 4)))
    return rng, z, y


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradient(seed):
    _, z, y = _setup(seed)
    f = lambda v: float(cross_entropy(torch.tensor(v), y))
    assert rel_err(_autograd(lambda t: cross_entropy(t, y), z), central_diff(f, z)) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_dice_gradient_wrt_probabilities_and_logits(seed):
    rng, z, y = _setup(seed)
    target = one_hot(y, 7, torch.float64)
    p = rng.uniform(0.01, 1, z.shape)
    f = lambda v: float(dice_loss(torch.tensor(v), target))
    assert rel_err(_autograd(lambda t: dice_loss(t, target), p), central_diff(f, p)) < 1e-3
    g = lambda v: float(dice_loss(F.softmax(torch.tensor(v), 1), target))
    assert rel_err(_autograd(lambda t: dice_loss(F.softmax(t, 1), target), z), central_diff(g, z)) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_negative_learning_gradient(seed):
    rng, z, _ = _setup(seed)
    k = torch.from_numpy(rng.integers(0, 7, (1, 4, 4)))
    f = lambda v: float(negative_learning(torch.tensor(v), k))
    assert rel_err(_autograd(lambda t: negative_learning(t, k), z), central_diff(f, z)) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_supervised_and_consistency_gradients(seed):
    rng, z, y = _setup(seed)
    f = lambda v: float(supervised_loss(torch.tensor(v), y))
    assert rel_err(_autograd(lambda t: supervised_loss(t, y), z), central_diff(f, z)) < 1e-3
    zw = torch.tensor(rng.normal(0, 3, z.shape))
    h = lambda v: float(consistency_loss(zw, torch.tensor(v), tau=0.5))
    assert rel_err(_autograd(lambda t: consistency_loss(zw, t, tau=0.5), z), central_diff(h, z)) < 1e-3


def test_uniform_logits_give_log7():
    z = torch.zeros(2, 7, 3, 3, dtype=torch.float64)
    y = torch.randint(0, 7, (2, 3, 3))
    assert abs(float(cross_entropy(z, y)) - math.log(7)) < 1e-6


def test_cross_entropy_limit_and_scalar_oracle():
    y = torch.zeros(1, 2, 2, dtype=torch.long)
    vals = []
    for gap in (5, 10, 20):
        z = torch.zeros(1, 7, 2, 2, dtype=torch.float64)
        z[:, 0] = gap
        vals.append(float(cross_entropy(z, y)))
    assert vals[0] > vals[1] > vals[2] > 0
    z = np.array([[1.0, 2.0, 0.5, -1.0, 0.0, 0.3, 0.1]] * 4).T.reshape(1, 7, 2, 2)
    labels = np.array([[0, 1], [2, 6]])
    ref = 0.0
    for i in range(2):
        for j in range(2):
            col = z[0, :, i, j]
            ref += -(col[labels[i, j]] - math.log(sum(math.exp(v) for v in col)))
    assert float(cross_entropy(torch.tensor(z), torch.from_numpy(labels)[None])) == pytest.approx(ref / 4, abs=1e-12)


def test_dice_examples():
    y = torch.tensor([[[0, 1], [1, 1]]])
    t = one_hot(y, 7, torch.float64)
    assert float(dice_loss(t, t)) == pytest.approx(0.0, abs=1e-9)
    # single class, truth on one of 4 pixels, prediction on it plus another
    t1 = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    t1[0, 0, 0, 0] = 1
    p1 = t1.clone()
    p1[0, 0, 1, 1] = 1
    assert float(dice_loss(p1, t1, eps=0.0)) == pytest.approx(1 / 3, abs=1e-12)
    disjoint = torch.zeros_like(t1)
    disjoint[0, 0, 1, 0] = 1
    assert float(dice_loss(disjoint, t1)) == pytest.approx(1.0, abs=1e-6)


def test_supervised_is_sum_and_perfect_prediction():
    _, z, y = _setup(9)
    z = torch.tensor(z)
    assert float(supervised_loss(z, y)) == float(cross_entropy(z, y) + dice_loss(F.softmax(z, 1), one_hot(y, 7, z.dtype)))
    perfect = one_hot(y, 7, torch.float64) * 40
    assert float(supervised_loss(perfect, y)) < 1e-6
    with pytest.raises(ShapeMismatch):
        cross_entropy(z, y[:, :3])


def test_negative_learning_single_pixel_oracle():
    z = torch.tensor([0.4, -1.0, 2.0, 0.1, 0.0, -0.5, 1.2], dtype=torch.float64).view(1, 7, 1, 1)
    k = torch.tensor([[[1]]])
    p = np.exp(z.numpy().ravel()) / np.exp(z.numpy().ravel()).sum()
    assert float(negative_learning(z, k)) == pytest.approx(-math.log(1 - p[1]), abs=1e-12)


def test_consistency_gating():
    rng = np.random.default_rng(0)
    zw = torch.tensor(rng.normal(0, 1, (2, 7, 4, 4)))
    zs = torch.tensor(rng.normal(0, 1, (2, 7, 4, 4)), requires_grad=True)
    terms = consistency_terms(zw, zs, tau=1.0)
    assert float(terms.loss) == 0.0 and terms.valid_fraction == 0.0
    assert not terms.loss.requires_grad
    terms = consistency_terms(zw, zs, tau=0.0)
    assert terms.valid_fraction == 1.0
    terms.loss.backward()
    assert zs.grad.abs().sum() > 0


def test_self_consistency_near_zero():
    y = torch.randint(0, 7, (2, 4, 4))
    z = one_hot(y, 7, torch.float64) * 30
    t = consistency_terms(z, z.clone(), tau=0.8)
    assert float(t.ce) < 1e-9 and float(t.dice) < 1e-6


def test_ramp_schedule():
    s = RampSchedule(lambda_max=2.0, ramp_epochs=200)
    assert lambda_at(0, s) == pytest.approx(2.0 * math.exp(-5))
    assert lambda_at(0, s) < 0.01 * 2.0
    assert lambda_at(200, s) == 2.0 and lambda_at(350, s) == 2.0
    vals = [lambda_at(e, s) for e in range(201)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lambda_at(-1, s)


@given(st.floats(0, 5), st.integers(1, 400), st.floats(0, 1000))
def test_ramp_bounds(lmax, ramp, epoch):
    v = lambda_at(epoch, RampSchedule(lmax, ramp))
    assert 0 <= v <= lmax
