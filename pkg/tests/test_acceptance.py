"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line."""
import csv
import math
import time

import numpy as np
import pytest

from jaclab import experiment as ex
from jaclab import linalg, metrics
from jaclab import neural as nn
from jaclab.cli import main
from jaclab.collection import Dataset
from jaclab.config import parse_config
from jaclab.environments import EnvKind, make_env
from jaclab.estimators import BroydenState, broyden_update, llknn_estimate
from jaclab.kinematics import PlanarArm2, planar_fk, planar_jacobian
from conftest import central_diff, random_matrix, rel_err


@pytest.fixture
def report(capsys):
    def _report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return _report


def _eval_success(cfg):
    t0 = time.perf_counter()
    traces = ex.evaluate(cfg)
    spec = ex.threshold_spec(cfg)
    score = metrics.mean_success([ex.scored_distance(t) for t in traces], spec)
    return score, time.perf_counter() - t0, len(traces)


def test_true_jacobian_control_single_point(report):
    cfg = parse_config({"env": "single_point7", "estimators": {"TJ": {}}})
    score, secs, n = _eval_success(cfg)
    report("TJ control, single point", score >= 90.0 and secs < 120.0 and n == 110,
           f"mean success {score:.2f}% over {n} targets (need >= 90), {secs:.1f}s (need < 120)")


def test_true_jacobian_control_multi_point(report):
    cfg = parse_config({"env": "multi_point7", "estimators": {"TJ": {}}})
    score, secs, n = _eval_success(cfg)
    report("TJ control, multi point", score >= 75.0 and secs < 180.0 and n == 110,
           f"mean success {score:.2f}% over {n} targets (need >= 75), {secs:.1f}s (need < 180)")


def test_condition_number_contrast(report):
    # A 7-joint arm moving a rigid body has a rank-6 multi-point Jacobian, so
    # "non-singular" there means rank 6 and cond() reports the sentinel inf.
    rng = np.random.default_rng(0)
    single, multi = make_env("single_point7"), make_env("multi_point7")
    cs, cm, raw = [], [], []
    while len(cs) < 1000:
        q = rng.uniform(-math.pi, math.pi, 7)
        js, jm = single.true_jacobian(q), multi.true_jacobian(q)
        sig = linalg.svd(jm).sigma
        rank = int(np.sum(sig > linalg.default_tol(sig[0], jm.shape)))
        a = linalg.cond(js)
        if math.isfinite(a) and rank == 6:
            cs.append(a)
            cm.append(linalg.cond(jm))
            raw.append(sig[0] / sig[-1] if sig[-1] > 0 else math.inf)
    ratio = np.median(cm) / np.median(cs)
    report("condition-number contrast", ratio >= 10.0,
           f"median multi {np.median(cm):.3g} / single {np.median(cs):.3g} = {ratio:.3g}x (need >= 10x); "
           f"multi-point rank 6 of 7, raw sigma ratio median {np.median(raw):.3g}")


def test_true_jacobian_correctness(report):
    rng = np.random.default_rng(1)
    worst = {}
    for kind in ("single_point7", "multi_point7", "planar2"):
        env = make_env(kind)
        err = 0.0
        for _ in range(100):
            q = rng.uniform(-math.pi, math.pi, env.n)
            fd = central_diff(env.kinematics.features, q, 1e-6)
            err = max(err, float(np.max(np.abs(env.true_jacobian(q) - fd))))
        worst[kind] = err
    arm = PlanarArm2()
    planar = 0.0
    for _ in range(100):
        q = rng.uniform(-math.pi, math.pi, 2)
        fd = central_diff(lambda v: planar_fk(arm, v), q, 1e-5)
        planar = max(planar, float(np.max(np.abs(planar_jacobian(arm, q) - fd))))
    ok = max(worst.values()) < 1e-5 and planar < 1e-8
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("true Jacobian vs finite differences", ok,
           f"max abs error {detail} (need < 1e-5); planar closed form {planar:.1e} (need < 1e-8)")


def _param_fd(mlp, loss_fn, h=1e-6):
    params = mlp.params
    out = []
    for k, p in enumerate(params):
        def f(v, k=k):
            ps = list(params)
            ps[k] = v
            return loss_fn(mlp.with_params(ps))
        out.append(central_diff(f, p, h))
    return out


def test_neural_gradient_fidelity(report):
    rng = np.random.default_rng(2)
    worst_in = 0.0
    for in_dim, out_dim, layers in [(2, 2, 1), (7, 3, 2), (14, 12, 4), (14, 3, 2), (4, 12, 4)]:
        for seed in range(2):
            mlp = nn.init_mlp(nn.MlpSpec(in_dim, out_dim, layers, 100, "tanh", seed))
            mlp = mlp.with_params([p if i % 2 == 0 else 0.2 * rng.standard_normal(p.shape)
                                   for i, p in enumerate(mlp.params)])
            x = rng.standard_normal(in_dim)
            fd = central_diff(lambda v: nn.forward(mlp, v), x, 1e-5)
            worst_in = max(worst_in, rel_err(nn.input_jacobian(mlp, x), fd))

    small = nn.init_mlp(nn.MlpSpec(4, 6, 2, 12, "tanh", 3))
    small = small.with_params([p if i % 2 == 0 else 0.5 * rng.standard_normal(p.shape)
                               for i, p in enumerate(small.params)])
    x = rng.standard_normal((5, 4))
    t = rng.standard_normal((5, 6))
    dx = rng.standard_normal((5, 8, 2))
    dq = rng.standard_normal((5, 8, 3))
    losses = {
        "mse": lambda m: nn.mse_backprop(m, x, t),
        "hyperplane b=0": lambda m: nn.hyperplane_backprop(m, x, dx, dq, 0.0)[:2],
        "hyperplane b=1": lambda m: nn.hyperplane_backprop(m, x, dx, dq, 1.0)[:2],
    }
    worst_p = {}
    for name, fn in losses.items():
        _, grads = fn(small)
        fd = _param_fd(small, lambda m: fn(m)[0])
        worst_p[name] = max(rel_err(g, f) for g, f in zip(grads, fd))
    ok = worst_in < 1e-4 and max(worst_p.values()) < 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst_p.items())
    report("neural gradient fidelity", ok,
           f"input Jacobian rel err {worst_in:.1e}; parameter grads {detail} (need < 1e-4)")


def test_pseudo_inverse_suite(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(1000):
        m, n = int(rng.integers(1, 13)), int(rng.integers(1, 8))
        rank = int(rng.integers(0, min(m, n) + 1)) if i % 2 else None
        a = random_matrix(rng, m, n, rank)
        p = linalg.pinv(a)
        res = max(np.max(np.abs(a @ p @ a - a)), np.max(np.abs(p @ a @ p - p)),
                  np.max(np.abs((a @ p).T - a @ p)), np.max(np.abs((p @ a).T - p @ a)))
        worst = max(worst, res / max(1.0, np.max(np.abs(a))))
    worst_d = 0.0
    h = 1e-6
    for _ in range(200):
        m, n = int(rng.integers(1, 13)), int(rng.integers(1, 8))
        j, dj = rng.standard_normal((m, n)), rng.standard_normal((m, n))
        fd = (linalg.pinv(j + h * dj) - linalg.pinv(j - h * dj)) / (2 * h)
        worst_d = max(worst_d, rel_err(linalg.pinv_directional_derivative(j, dj), fd))
    report("pseudo-inverse suite", worst < 1e-8 and worst_d < 1e-5,
           f"Penrose residual {worst:.1e} (need < 1e-8); derivative rel err {worst_d:.1e} (need < 1e-5)")


def test_llknn_exactness(report):
    rng = np.random.default_rng(4)
    errs = {}
    for k in (10, 50, 128):
        a = rng.standard_normal((3, 7))
        q = rng.uniform(-1, 1, (2000, 7))
        ds = Dataset(EnvKind.SINGLE_POINT7, np.zeros(2000, dtype=np.int64), np.arange(2000), q, q @ a.T)
        errs[k] = max(np.linalg.norm(llknn_estimate(ds, qq, k) - a) for qq in rng.uniform(-1, 1, (5, 7)))
    report("LL-KNN exactness", max(errs.values()) < 1e-8,
           ", ".join(f"k={k} {v:.1e}" for k, v in errs.items()) + " (need < 1e-8)")


def test_broyden_algebra(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        m, n = int(rng.integers(1, 13)), int(rng.integers(1, 8))
        dq = rng.standard_normal(n)
        dq *= max(1.0, 0.2 / np.linalg.norm(dq))
        de = rng.standard_normal(m)
        st = broyden_update(BroydenState(rng.standard_normal((m, n)), alpha=1.0), dq, de)
        worst = max(worst, float(np.linalg.norm(st.j_hat @ dq - de)))
    j = np.eye(2)
    below = np.array([np.nextafter(0.1, 0.0), 0.0])
    at = np.array([0.1, 0.0])
    blocked = np.array_equal(broyden_update(BroydenState(j, 1.0), below, [1.0, 1.0]).j_hat, j)
    passes = not np.array_equal(broyden_update(BroydenState(j, 1.0), at, [1.0, 1.0]).j_hat, j)
    report("Broyden algebra", worst < 1e-12 and blocked and passes,
           f"secant residual {worst:.1e} (need < 1e-12); gate blocks |dq|^2<0.01: {blocked}, "
           f"admits |dq|^2=0.01: {passes}")


def _summary(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return {r["estimator"]: r for r in csv.DictReader(lines)}


def test_end_to_end_planar_demo(report, tmp_path):
    t0 = time.perf_counter()
    code = main(["demo", "--out", str(tmp_path / "demo")])
    secs = time.perf_counter() - t0
    rows = _summary(tmp_path / "demo" / "summary.csv")
    traj = [ln for ln in (tmp_path / "demo" / "trajectories.csv").read_text().splitlines()
            if ",Tanh-NK," in ln]
    score = float(rows["Tanh-NK"]["overall"])
    ok = code == 0 and score >= 80.0 and secs < 600 and len(traj) == 50
    report("planar demo pipeline", ok,
           f"Tanh-NK mean success {score:.2f}% on {len(traj)} targets (need >= 80), {secs:.1f}s (need < 600)")


def test_scaled_single_point_ordering(report, tmp_path):
    cfg = parse_config({
        "env": "single_point7",
        "collection": {"n_traj": 200},
        "estimators": {"Tanh-NK": {}, "Broyden": {}},
    })
    ds = ex.collect_for_seed(cfg, 0)
    res = ex.train_estimator(cfg, "Tanh-NK", ds)
    nn.save_model(ex.model_path(tmp_path, "Tanh-NK", 0), res.model)
    traces = ex.evaluate(cfg, tmp_path)
    spec = ex.threshold_spec(cfg)
    score = {name: metrics.mean_success([ex.scored_distance(t) for t in traces if t.estimator == name], spec)
             for name in ("Tanh-NK", "Broyden")}
    report("scaled single point: Tanh-NK >= Broyden", score["Tanh-NK"] >= score["Broyden"] and len(ds) == 20000,
           f"Tanh-NK {score['Tanh-NK']:.2f}% vs Broyden {score['Broyden']:.2f}% "
           f"({len(ds)} samples, 2x100 tanh, 110 targets)")


def test_metric_unit_checks(report):
    exact = metrics.mean_success([0.0505], metrics.SINGLE_THRESHOLDS) == 50.0
    rng = np.random.default_rng(6)
    pd_ok = 0
    for _ in range(1000):
        m = int(rng.integers(1, 8))
        j = rng.standard_normal((m, int(rng.integers(m, 8))))
        pd_ok += metrics.pd_criterion(j, j)
    flags = [rng.random(10) > 0.05 for _ in range(37)]
    a, b = metrics.classify_pd_trajectories(range(37), flags).percentages
    report("metric unit checks", exact and pd_ok == 1000 and a + b == 100.0,
           f"mean_success(0.0505) == 50.0: {exact}; pd_criterion(J, J) {pd_ok}/1000; "
           f"PD percentages sum {a + b}")


def test_determinism(report, tmp_path):
    import json
    cfg = {"env": "planar2", "collection": {"n_traj": 8, "traj_len": 50},
           "estimators": {"NJ": {"training": {"epochs": 2}, "network": {"hidden_width": 16}},
                          "Tanh-NK": {"training": {"epochs": 3}}, "Broyden": {}, "LL-KNN": {"k": 10}},
           "evaluation": {"targets_per_seed": 5, "max_steps": 30}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    dirs = [tmp_path / "r1", tmp_path / "r2"]
    for d in dirs:
        for cmd in (["collect"], ["train"], ["eval"]):
            assert main(cmd + ["--config", str(path), "--out", str(d)]) == 0
    files = sorted(p.name for p in dirs[0].iterdir())
    same = [f for f in files if (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()]
    kinds = {".njds", ".njlm", ".csv"}
    covered = {p.suffix for p in dirs[0].iterdir()} >= kinds
    report("determinism", same == files and covered,
           f"{len(same)}/{len(files)} files byte-identical across two runs ({', '.join(files)})")
