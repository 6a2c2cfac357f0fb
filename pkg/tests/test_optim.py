import numpy as np
import pytest

from calcpheno.optim import (LbfgsConfig, MlpParams, TrainingBatch, TrainingError,
                             cross_entropy_loss, lbfgs_minimize, mlp_forward, mlp_loss_grad,
                             mlp_predict, softmax)


def quad(x):
    return 0.5 * float(x @ x), x.copy()


def rosen(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_quadratic_fast():
    r = lbfgs_minimize(quad, np.array([3.0, -4.0, 1.0]))
    assert np.linalg.norm(r.x) < 1e-8
    assert r.n_iter <= 5
    assert r.converged


def test_rosenbrock():
    r = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), LbfgsConfig(grad_tol=1e-12, max_iters=200))
    assert r.fun < 1e-10
    assert r.n_iter <= 100


def test_start_at_minimum():
    r = lbfgs_minimize(quad, np.zeros(4))
    assert r.n_iter == 0 and r.converged


def test_trace_monotone():
    r = lbfgs_minimize(rosen, np.array([-1.2, 1.0]))
    assert all(b <= a for a, b in zip(r.trace, r.trace[1:]))


def test_nan_raises():
    with pytest.raises(TrainingError):
        lbfgs_minimize(lambda x: (float("nan"), x), np.ones(2))


def test_callback_stops():
    r = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), callback=lambda k, x, f: k >= 3)
    assert r.n_iter == 3 and r.stopped_early


def test_softmax_rows():
    p = softmax(np.array([[1000.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(p.sum(1), 1.0)
    assert p[0, 0] == 1.0 and p[1, 0] == 0.5


def test_cross_entropy_sum_and_floor():
    T = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert cross_entropy_loss(np.array([[0.5, 0.5], [0.5, 0.5]]), T) == pytest.approx(2 * np.log(2))
    assert cross_entropy_loss(np.array([[0.0, 1.0], [0.0, 1.0]]), T) == pytest.approx(-np.log(1e-12))


def test_forward_shape_and_rows():
    p = MlpParams.init(6, 20, 2, seed=3)
    X = np.random.default_rng(0).random((50, 6))
    P = mlp_forward(p, X)
    assert P.shape == (50, 2)
    np.testing.assert_allclose(P.sum(1), 1.0)
    assert mlp_predict(p, X).shape == (50,)
    with pytest.raises(ValueError):
        mlp_forward(p, X[:, :5])


def test_onehot_validation():
    with pytest.raises(ValueError):
        TrainingBatch(np.zeros((2, 3)), np.array([[1.0, 1.0], [0.0, 1.0]]))


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def test_gradient_central_differences():
    rng = np.random.default_rng(7)
    p = MlpParams.init(6, 12, 2, seed=1)
    X = rng.normal(size=(40, 6))
    batch = TrainingBatch.from_labels(X, rng.integers(0, 2, 40))
    _, g = mlp_loss_grad(p, batch)
    v, gv = p.flat(), g.flat()
    h = 1e-6
    for i in rng.choice(len(v), 30, replace=False):
        e = np.zeros_like(v)
        e[i] = h
        fp, _ = mlp_loss_grad(p.with_flat(v + e), batch)
        fm, _ = mlp_loss_grad(p.with_flat(v - e), batch)
        assert _rel_err((fp - fm) / (2 * h), gv[i]) < 1e-4


def test_params_roundtrip(tmp_path):
    p = MlpParams.init(6, 9, 2, seed=5)
    p.save(tmp_path / "m.bin", stage="sample")
    q = MlpParams.load(tmp_path / "m.bin")
    np.testing.assert_array_equal(p.flat(), q.flat())


def test_mlp_learns_separable():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    batch = TrainingBatch.from_labels(X, y)
    p0 = MlpParams.init(2, 16, 2, seed=0)
    r = lbfgs_minimize(lambda v: (lambda lg: (lg[0], lg[1].flat()))(mlp_loss_grad(p0.with_flat(v), batch)),
                       p0.flat(), LbfgsConfig(max_iters=200))
    acc = np.mean(mlp_predict(p0.with_flat(r.x), X) == y)
    assert acc > 0.97
