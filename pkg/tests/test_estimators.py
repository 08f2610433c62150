import math

import numpy as np
import pytest

from jaclab import linalg
from jaclab import neural as nn
from jaclab.collection import Dataset, collect
from jaclab.environments import EnvKind, make_env
from jaclab.estimators import (Broyden, BroydenState, EstimatorContext, LocalLinearKnn, NeuralJacobian,
                               NeuralKinematics, TrueJacobian, broyden_init, broyden_update,
                               llknn_estimate, neural_jacobian_estimate, neural_kinematics_estimate)
from jaclab.kinematics import PlanarArm2, planar_jacobian


def _ctx(q, m):
    q = np.asarray(q, dtype=float)
    return EstimatorContext(q, np.zeros(m), np.zeros(m), np.zeros_like(q))


class LinearEnv:
    """x = A q, with the probing interface Broyden needs."""

    def __init__(self, a, q0):
        self.a = np.asarray(a, dtype=float)
        self.n = self.a.shape[1]
        self._q = np.asarray(q0, dtype=float)

    @property
    def q(self):
        return self._q.copy()

    @property
    def x(self):
        return self.a @ self._q

    def set_joints(self, q):
        self._q = np.asarray(q, dtype=float).copy()
        return self


def test_true_estimator_planar():
    env = make_env("planar2")
    est = TrueJacobian(env.kinematics)
    q = [0.0, math.pi / 2]
    np.testing.assert_array_equal(est.estimate(_ctx(q, 2)), planar_jacobian(PlanarArm2(), q))


def test_true_jacobian_lyapunov_criterion(rng):
    env = make_env("single_point7")
    checked = 0
    for _ in range(1000):
        q = rng.uniform(-math.pi, math.pi, 7)
        j = env.true_jacobian(q)
        if linalg.cond(j) > 1e8:
            continue
        assert linalg.is_positive_definite(j @ linalg.pinv(j))
        checked += 1
    assert checked > 950


def test_broyden_init_examples():
    env = make_env("planar2")
    j = broyden_init(env, 1e-4)
    assert np.max(np.abs(j - planar_jacobian(PlanarArm2(), [0, 0]))) < 1e-3
    np.testing.assert_array_equal(env.q, [0, 0])
    a = np.array([[1.0, -2.0, 0.5], [0.3, 4.0, 1.0]])
    for probe in (1e-3, 0.1, 2.0):
        lin = LinearEnv(a, [0.2, -0.1, 0.4])
        np.testing.assert_allclose(broyden_init(lin, probe), a, atol=1e-12)
        np.testing.assert_array_equal(lin.q, [0.2, -0.1, 0.4])
    with pytest.raises(ValueError):
        broyden_init(env, 0.0)


def test_broyden_update_examples():
    st = broyden_update(BroydenState(np.eye(2), 0.1), [1.0, 0.0], [2.0, 0.0])
    np.testing.assert_allclose(st.j_hat, [[1.1, 0.0], [0.0, 1.0]])
    st = broyden_update(BroydenState(np.eye(2), 0.1), [0.01, 0.0], [5.0, 5.0])
    np.testing.assert_array_equal(st.j_hat, np.eye(2))
    j = np.array([[1.0, 2.0], [3.0, 4.0]])
    dq = np.array([0.5, -0.7])
    for alpha in (0.1, 0.5, 1.0):
        st = broyden_update(BroydenState(j, alpha), dq, j @ dq)
        np.testing.assert_array_equal(st.j_hat, j)


def test_broyden_secant_and_gate(rng):
    worst = 0.0
    for _ in range(500):
        m, n = rng.integers(1, 13), rng.integers(1, 8)
        j = rng.standard_normal((m, n))
        dq = rng.standard_normal(n)
        dq *= max(1.0, 0.2 / np.linalg.norm(dq))
        de = rng.standard_normal(m)
        st = broyden_update(BroydenState(j, alpha=1.0), dq, de)
        worst = max(worst, np.linalg.norm(st.j_hat @ dq - de))
    assert worst < 1e-12
    # exactly at the gate the update runs, just under it nothing changes
    j = np.eye(2)
    at_gate = np.array([0.1, 0.0])
    assert at_gate @ at_gate >= 0.01
    assert not np.array_equal(broyden_update(BroydenState(j), at_gate, [1.0, 1.0]).j_hat, j)
    below = np.array([np.nextafter(0.1, 0.0), 0.0])
    assert below @ below < 0.01
    np.testing.assert_array_equal(broyden_update(BroydenState(j), below, [1.0, 1.0]).j_hat, j)


def test_broyden_estimator_lifecycle():
    env = make_env("planar2")
    est = Broyden(probe_angle=0.05)
    with pytest.raises(RuntimeError):
        est.estimate(_ctx([0, 0], 2))
    env.reset(np.array([0.2, 0.2]))
    est.begin(env)
    j0 = broyden_init(env, 0.05)
    np.testing.assert_array_equal(est.estimate(_ctx(env.q, 2)), j0)
    est.feedback(np.array([0.3, 0.0]), np.array([0.0, 0.1]))
    assert not np.array_equal(est.estimate(_ctx(env.q, 2)), j0)


def _linear_data(a, q):
    kind = {(2, 2): EnvKind.PLANAR2, (3, 7): EnvKind.SINGLE_POINT7}[a.shape]
    return Dataset(kind, np.zeros(len(q), dtype=np.int64), np.arange(len(q)), q, q @ a.T)


def test_llknn_examples(rng):
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    ds = _linear_data(a, rng.uniform(-1, 1, (200, 2)))
    assert np.linalg.norm(llknn_estimate(ds, [0.1, 0.2], 10) - a) < 1e-8
    flat = _linear_data(a, np.ones((20, 2)))
    j = llknn_estimate(flat, [1.0, 1.0], 5)
    np.testing.assert_array_equal(j, np.zeros((2, 2)))
    assert linalg.cond(j) == math.inf


@pytest.mark.parametrize("k", [10, 50, 128])
def test_llknn_recovers_linear_map(rng, k):
    a = rng.standard_normal((3, 7))
    ds = _linear_data(a, rng.uniform(-1, 1, (1000, 7)))
    for q in rng.uniform(-1, 1, (5, 7)):
        assert np.linalg.norm(llknn_estimate(ds, q, k) - a) < 1e-8


def test_llknn_is_least_squares_optimum(rng):
    from jaclab.collection import knn_indices, ordered_pairs

    q = rng.uniform(-1, 1, (300, 2))
    x = np.column_stack([np.sin(q[:, 0]) + q[:, 1] ** 2, np.cos(q[:, 1])])
    ds = Dataset(EnvKind.PLANAR2, np.zeros(300, dtype=np.int64), np.arange(300), q, x)
    qa = np.array([0.1, -0.3])
    j = llknn_estimate(ds, qa, 20)
    nb = knn_indices(q, qa[None], 20)[0]
    pi, pj = ordered_pairs(20)
    dx, dq = x[nb][pi] - x[nb][pj], q[nb][pi] - q[nb][pj]

    def loss(m):
        r = dx - dq @ m.T
        return float(np.sum(r * r))

    base = loss(j)
    for _ in range(50):
        assert loss(j + 1e-4 * rng.standard_normal((2, 2))) >= base


def test_neural_jacobian_estimate_examples():
    net = nn.Mlp(nn.MlpSpec(3, 6, 0), [np.zeros((6, 3))], [np.arange(1.0, 7.0)])
    np.testing.assert_array_equal(neural_jacobian_estimate(net, _ctx(np.zeros(3), 2), 2, 3),
                                  [[1, 2, 3], [4, 5, 6]])
    zero = nn.Mlp(nn.MlpSpec(3, 6, 0), [np.zeros((6, 3))], [np.zeros(6)])
    np.testing.assert_array_equal(neural_jacobian_estimate(zero, _ctx(np.ones(3), 2), 2, 3), 0.0)
    with pytest.raises(ValueError):
        neural_jacobian_estimate(zero, _ctx(np.ones(3), 3), 3, 3)


def test_neural_kinematics_estimate_examples(rng):
    w = rng.standard_normal((2, 3))
    lin = nn.Mlp(nn.MlpSpec(3, 2, 0), [w], [np.zeros(2)])
    for q in rng.standard_normal((4, 3)):
        np.testing.assert_array_equal(neural_kinematics_estimate(lin, _ctx(q, 2)), w)
    trig = nn.init_mlp(nn.MlpSpec(4, 2, 1, 8, "tanh", 0, "trig"))
    j = neural_kinematics_estimate(trig, _ctx(np.zeros(2), 2))
    np.testing.assert_allclose(j, nn.input_jacobian(trig, nn.embed(np.zeros(2), "trig"))[:, 2:])


@pytest.fixture(scope="module")
def planar_nk():
    env = make_env("planar2")
    ds = collect(env, 100, 100, seed=0)
    spec = nn.MlpSpec(4, 2, 1, 100, "tanh", 0, "trig")
    res = nn.train_neural_kinematics(nn.embed(ds.q, "trig"), ds.x, spec, nn.TrainConfig(epochs=45))
    return ds, res


def test_planar_nk_training_oracle(planar_nk):
    _, res = planar_nk
    assert math.sqrt(res.best_val_loss / 2) < 0.01


def test_planar_nk_jacobian_accuracy(planar_nk):
    ds, res = planar_nk
    est = NeuralKinematics(res.model)
    idx = np.random.default_rng(3).choice(len(ds), 100, replace=False)
    errs = [np.linalg.norm(est.estimate(_ctx(q, 2)) - planar_jacobian(PlanarArm2(), q)) for q in ds.q[idx]]
    assert np.mean(errs) < 0.05


@pytest.mark.parametrize("kind", ["single_point7", "multi_point7", "planar2"])
def test_every_estimator_shape(rng, kind):
    env = make_env(kind)
    m, n = env.m, env.n
    ds = collect(env, 2, 80, seed=0)
    emb = nn.embed_input_dim(n, "trig")
    estimators = [
        TrueJacobian(env.kinematics),
        Broyden(),
        LocalLinearKnn(ds, 10),
        NeuralJacobian(nn.init_mlp(nn.MlpSpec(emb, m * n, 1, 8, "relu", 0, "trig")), m, n),
        NeuralKinematics(nn.init_mlp(nn.MlpSpec(emb, m, 1, 8, "tanh", 0, "trig"))),
    ]
    env.reset(env.sample_target(rng))
    for est in estimators:
        est.begin(env)
        for q in rng.uniform(-1, 1, (3, n)):
            assert est.estimate(_ctx(q, m)).shape == (m, n)
