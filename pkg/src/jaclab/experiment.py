"""Config-driven pipeline stages shared by the CLI and the tests."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg, metrics
from .collection import Dataset, OuConfig, build_pairs, collect, load_dataset
from .config import ExperimentConfig
from .control import ControllerConfig, EvalTrace, run_trajectory
from .environments import Env, SimConfig
from .estimators import Broyden, LocalLinearKnn, NeuralJacobian, NeuralKinematics, TrueJacobian
from .kinematics import DhChain
from .neural import (MlpSpec, TrainConfig, TrainResult, embed, embed_input_dim, load_model,
                     train_neural_jacobian, train_neural_kinematics)

log = logging.getLogger(__name__)

NEURAL_TYPES = ("neural_jacobian", "neural_kinematics")
_TARGET_STREAM = 0x7A59


class MissingInputError(FileNotFoundError):
    pass


def dataset_path(directory, seed: int) -> Path:
    return Path(directory) / f"dataset_s{seed}.njds"


def model_path(directory, name: str, seed: int) -> Path:
    return Path(directory) / f"{name}_s{seed}.njlm"


def build_env(cfg: ExperimentConfig) -> Env:
    d = cfg.data
    iq = None if d["initial_q"] is None else tuple(float(v) for v in d["initial_q"])
    chain = DhChain.from_dicts(d["chain"]) if d.get("chain") else None
    return Env(cfg.env, SimConfig(dt=float(d["dt"]), initial_q=iq), chain=chain)


def collect_for_seed(cfg: ExperimentConfig, seed: int) -> Dataset:
    col = cfg.collection
    return collect(build_env(cfg), int(col["n_traj"]), int(col["traj_len"]),
                   OuConfig(**col["ou"]), seed=seed, policy=col["policy"],
                   perturb_prob=float(col["perturb_prob"]), perturb_std=float(col["perturb_std"]))


def check_dataset(cfg: ExperimentConfig, ds: Dataset) -> None:
    if ds.kind is not cfg.env:
        raise ValueError(f"dataset was collected in {ds.kind.value}, config uses {cfg.env.value}")


def _specs(cfg: ExperimentConfig, name: str, seed: int) -> tuple[MlpSpec, TrainConfig]:
    est = cfg.estimators[name]
    net = est["network"]
    m, n = cfg.env.dims
    out = m * n if est["type"] == "neural_jacobian" else m
    spec = MlpSpec(embed_input_dim(n, net["embedding"]), out, int(net["hidden_layers"]),
                   int(net["hidden_width"]), net["activation"], seed, net["embedding"])
    tr = dict(est["training"])
    tr["epochs"] = int(tr["epochs"])
    tr["batch_size"] = int(tr["batch_size"])
    return spec, TrainConfig(seed=seed, **tr)


def train_estimator(cfg: ExperimentConfig, name: str, ds: Dataset, seed: int | None = None,
                    on_epoch=None) -> TrainResult:
    if name not in cfg.estimators:
        raise KeyError(f"unknown estimator '{name}'")
    est = cfg.estimators[name]
    if est["type"] not in NEURAL_TYPES:
        raise ValueError(f"estimator '{name}' ({est['type']}) has nothing to train")
    check_dataset(cfg, ds)
    seed = ds.seed if seed is None else seed
    spec, tcfg = _specs(cfg, name, seed)
    inputs = embed(ds.q, spec.embedding)
    if est["type"] == "neural_kinematics":
        return train_neural_kinematics(inputs, ds.x, spec, tcfg, on_epoch)
    pairs = build_pairs(ds, int(est["k"]))
    return train_neural_jacobian(inputs, pairs, spec, tcfg, float(est["beta"]), on_epoch)


def make_estimator(cfg: ExperimentConfig, name: str, env: Env, model=None, dataset=None):
    est = cfg.estimators[name]
    kind = est["type"]
    if kind == "true":
        e = TrueJacobian(env.kinematics)
    elif kind == "broyden":
        e = Broyden(float(est["alpha"]), float(est["gate"]), float(est["probe_angle"]))
    elif kind == "llknn":
        if dataset is None:
            raise MissingInputError(f"estimator '{name}' needs a dataset")
        e = LocalLinearKnn(dataset, int(est["k"]))
    elif kind == "neural_jacobian":
        e = NeuralJacobian(model, env.m, env.n)
    else:
        e = NeuralKinematics(model)
    if kind in NEURAL_TYPES and model is None:
        raise MissingInputError(f"estimator '{name}' needs a trained model")
    e.name = name
    return e


def eval_targets(cfg: ExperimentConfig, env: Env, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TARGET_STREAM]))
    count = int(cfg.evaluation["targets_per_seed"])
    return np.stack([env.sample_target(rng) for _ in range(count)])


def controller_config(cfg: ExperimentConfig) -> ControllerConfig:
    ev = cfg.evaluation
    y = None if ev["y"] is None else tuple(float(v) for v in ev["y"])
    return ControllerConfig(float(ev["gain"]), int(ev["max_steps"]), bool(ev["null_space"]), y)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class _Task:
    seed: int
    target_id: int
    estimator: str


class _Runner:
    """Loads inputs lazily and runs single trajectories; one per process."""

    def __init__(self, cfg: ExperimentConfig, models_dir):
        self.cfg = cfg
        self.models_dir = None if models_dir is None else Path(models_dir)
        self.env = build_env(cfg)
        self.ctrl = controller_config(cfg)
        self._targets: dict[int, np.ndarray] = {}
        self._models: dict[tuple[str, int], object] = {}
        self._datasets: dict[int, Dataset] = {}

    def targets(self, seed):
        if seed not in self._targets:
            self._targets[seed] = eval_targets(self.cfg, self.env, seed)
        return self._targets[seed]

    def _model(self, name, seed):
        key = (name, seed)
        if key not in self._models:
            path = model_path(self.models_dir or ".", name, seed)
            if not path.exists():
                raise MissingInputError(f"missing model file {path}")
            self._models[key] = load_model(path)
        return self._models[key]

    def _dataset(self, seed):
        if seed not in self._datasets:
            path = dataset_path(self.models_dir or ".", seed)
            if not path.exists():
                raise MissingInputError(f"missing dataset file {path}")
            ds = load_dataset(path)
            check_dataset(self.cfg, ds)
            self._datasets[seed] = ds
        return self._datasets[seed]

    def prepare(self, name, seed):
        kind = self.cfg.estimators[name]["type"]
        model = self._model(name, seed) if kind in NEURAL_TYPES else None
        dataset = self._dataset(seed) if kind == "llknn" else None
        return make_estimator(self.cfg, name, self.env, model, dataset)

    def run(self, task: _Task) -> EvalTrace:
        est = self.prepare(task.estimator, task.seed)
        target = self.targets(task.seed)[task.target_id]
        return run_trajectory(self.env, est, target, self.ctrl, task.seed, task.target_id)


_WORKER: _Runner | None = None


def _init_worker(data, source, models_dir):
    global _WORKER
    _WORKER = _Runner(ExperimentConfig(data, source), models_dir)


def _run_task(task: _Task) -> EvalTrace:
    return _WORKER.run(task)


def evaluate(cfg: ExperimentConfig, models_dir=None, jobs: int = 1,
             estimators: list[str] | None = None) -> list[EvalTrace]:
    """Run every (seed, target, estimator) trajectory; result order is canonical."""
    names = estimators or cfg.eval_estimators()
    runner = _Runner(cfg, models_dir)
    for seed in cfg.seeds:
        for name in names:
            runner.prepare(name, seed)  # fail fast on missing inputs
    count = int(cfg.evaluation["targets_per_seed"])
    tasks = [_Task(s, t, n) for s in cfg.seeds for t in range(count) for n in names]
    if jobs <= 1:
        return [runner.run(t) for t in tasks]
    with ProcessPoolExecutor(jobs, initializer=_init_worker,
                             initargs=(cfg.data, cfg.source, models_dir)) as pool:
        return list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * jobs))))


def scored_distance(tr: EvalTrace) -> float:
    """Final distance used for scoring; aborted trajectories never succeed."""
    return math.inf if tr.failure else tr.final_distance


@dataclass
class StepTable:
    traj_index: np.ndarray
    step: np.ndarray
    distance: np.ndarray
    frobenius: np.ndarray
    cond: np.ndarray
    pd_flag: np.ndarray


def step_table(env: Env, traces: list[EvalTrace]) -> StepTable:
    """Per-step Jacobian error, condition number and PD flag against the true Jacobian."""
    rows = [(i, t) for i, tr in enumerate(traces) for t in range(tr.steps)]
    idx = np.array([r[0] for r in rows], dtype=np.int64)
    step = np.array([r[1] for r in rows], dtype=np.int64)
    if not rows:
        empty = np.zeros(0)
        return StepTable(idx, step, empty, empty, empty, np.zeros(0, dtype=bool))
    j_hat = np.stack([j for tr in traces for j in tr.jacobians])
    j_true = np.stack([env.true_jacobian(q) for tr in traces for q in tr.qs])
    dist = np.array([d for tr in traces for d in tr.distances])
    frob = np.linalg.norm((j_true - j_hat).reshape(j_hat.shape[0], -1), axis=1)
    conds = np.empty(j_hat.shape[0])
    pd = np.empty(j_hat.shape[0], dtype=bool)
    for start in range(0, j_hat.shape[0], 4096):
        sl = slice(start, start + 4096)
        conds[sl] = linalg.cond_batched(j_hat[sl])
        pd[sl] = metrics.pd_flags_batched(j_true[sl], j_hat[sl])
    return StepTable(idx, step, dist, frob, conds, pd)


# ---------------------------------------------------------------------------
# CSV output


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def run_header(cfg: ExperimentConfig) -> str:
    env = build_env(cfg)
    iq = " ".join(fmt(v) for v in env.initial_q)
    return f"# env={cfg.env.value} dt={fmt(env.sim.dt)} initial_q={iq}\n"


def _write_csv(path: Path, header: str, columns: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) if not isinstance(v, str) else v for v in r])
    path.write_text(buf.getvalue())


def threshold_spec(cfg: ExperimentConfig) -> metrics.ThresholdSpec:
    th = cfg.evaluation["thresholds"]
    return metrics.ThresholdSpec(float(th["low"]), float(th["high"]), float(th["step"]))


def bucket_spec(cfg: ExperimentConfig) -> metrics.BucketSpec:
    return metrics.BucketSpec(tuple(float(e) for e in cfg.evaluation["buckets"]))


def summary_rows(cfg: ExperimentConfig, traces: list[EvalTrace], names: list[str]):
    """One row per estimator: success per initial-distance bucket, then overall."""
    spec, bspec = threshold_spec(cfg), bucket_spec(cfg)
    rows = []
    for name in names:
        mine = [t for t in traces if t.estimator == name]
        b = metrics.bucketize(mine, bspec)
        row = [name]
        for group in b.groups:
            row.append(metrics.mean_success([scored_distance(t) for t in group], spec) if group else "")
        row.append(metrics.mean_success([scored_distance(t) for t in mine], spec) if mine else "")
        rows.append(row)
    return bspec.labels(), rows


def write_results(cfg: ExperimentConfig, traces: list[EvalTrace], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = run_header(cfg)
    names = list(dict.fromkeys(t.estimator for t in traces))
    paths = {k: out / f"{k}.csv" for k in ("trajectories", "steps", "summary", "bucket_counts")}

    _write_csv(paths["trajectories"], header,
               ["trajectory", "estimator", "seed", "target_id", "initial_distance",
                "final_distance", "steps", "failure"],
               ([i, t.estimator, t.seed, t.target_id, t.initial_distance, scored_distance(t),
                 t.steps, t.failure or ""] for i, t in enumerate(traces)))

    tab = step_table(build_env(cfg), traces)
    _write_csv(paths["steps"], header,
               ["trajectory", "estimator", "step", "distance", "frobenius_error", "cond", "pd_flag"],
               ([int(i), traces[i].estimator, int(s), d, f, c, bool(p)] for i, s, d, f, c, p in
                zip(tab.traj_index, tab.step, tab.distance, tab.frobenius, tab.cond, tab.pd_flag)))

    labels, rows = summary_rows(cfg, traces, names)
    _write_csv(paths["summary"], header, ["estimator"] + labels + ["overall"], rows)

    # one estimator's targets suffice: every estimator sees the same ones
    first = [t for t in traces if names and t.estimator == names[0]]
    b = metrics.bucketize(first, bucket_spec(cfg))
    _write_csv(paths["bucket_counts"], header, ["bucket", "count"],
               [[lab, c] for lab, c in zip(b.labels, b.counts)] + [["overflow", len(b.overflow)]])
    return paths


# ---------------------------------------------------------------------------
# Analysis of a results directory


def _read_csv(path: Path) -> tuple[str, list[dict]]:
    if not path.exists():
        raise MissingInputError(f"missing results file {path}")
    lines = path.read_text().splitlines(keepends=True)
    header = "".join(line for line in lines if line.startswith("#"))
    body = [line for line in lines if not line.startswith("#")]
    return header, list(csv.DictReader(body))


def _float(s: str) -> float:
    return float(s)  # float() already parses "inf"


def analyze(results_dir, out_dir=None) -> dict[str, Path]:
    """Frobenius error over time, condition number distributions and PD partitions."""
    src = Path(results_dir)
    out = Path(out_dir) if out_dir is not None else src
    out.mkdir(parents=True, exist_ok=True)
    header, steps = _read_csv(src / "steps.csv")
    names = list(dict.fromkeys(r["estimator"] for r in steps))
    per_est: dict[str, dict[str, np.ndarray]] = {}
    for name in names:
        mine = [r for r in steps if r["estimator"] == name]
        per_est[name] = {
            "traj": np.array([int(r["trajectory"]) for r in mine]),
            "step": np.array([int(r["step"]) for r in mine]),
            "distance": np.array([_float(r["distance"]) for r in mine]),
            "frob": np.array([_float(r["frobenius_error"]) for r in mine]),
            "cond": np.array([_float(r["cond"]) for r in mine]),
            "pd": np.array([r["pd_flag"] == "1" for r in mine]),
        }
    paths = {k: out / f"{k}.csv" for k in
             ("frobenius_over_time", "condition", "condition_summary", "pd_partition", "pd_distance")}

    rows = []
    for name, d in per_est.items():
        for s in np.unique(d["step"]):
            mean, sem = metrics.mean_and_sem(d["frob"][d["step"] == s])
            rows.append([name, int(s), mean, sem, int(np.sum(d["step"] == s))])
    _write_csv(paths["frobenius_over_time"], header,
               ["estimator", "step", "mean_frobenius_error", "sem", "n"], rows)

    def cond_rows():
        for name, d in per_est.items():
            for t, s, c in zip(d["traj"], d["step"], d["cond"]):
                yield [name, int(t), int(s), c, math.log(c) if math.isfinite(c) else math.inf]
    _write_csv(paths["condition"], header, ["estimator", "trajectory", "step", "cond", "log_cond"],
               cond_rows())

    rows = []
    for name, d in per_est.items():
        st = metrics.condition_stats(conds=d["cond"]) if d["cond"].size else None
        if st is None:
            continue
        rows.append([name, st.mean, st.median, st.stddev, st.fraction_infinite])
    _write_csv(paths["condition_summary"], header,
               ["estimator", "mean", "median", "stddev", "fraction_infinite"], rows)

    part_rows, dist_rows = [], []
    for name, d in per_est.items():
        trajs = list(dict.fromkeys(int(t) for t in d["traj"]))
        flags = [d["pd"][d["traj"] == t] for t in trajs]
        part = metrics.classify_pd_trajectories(trajs, flags)
        a, b = part.percentages
        part_rows.append([name, len(part.always_pd), len(part.not_always_pd), a, b])
        for label, members in (("always_pd", part.always_pd), ("not_always_pd", part.not_always_pd)):
            mask = np.isin(d["traj"], members)
            for s in np.unique(d["step"][mask]):
                sel = mask & (d["step"] == s)
                mean, sem = metrics.mean_and_sem(d["distance"][sel])
                dist_rows.append([name, label, int(s), mean, sem, int(sel.sum())])
    _write_csv(paths["pd_partition"], header,
               ["estimator", "always_pd", "not_always_pd", "always_pd_pct", "not_always_pd_pct"],
               part_rows)
    _write_csv(paths["pd_distance"], header,
               ["estimator", "partition", "step", "mean_distance", "sem", "n"], dist_rows)
    return paths


__all__ = [
    "MissingInputError", "dataset_path", "model_path", "build_env", "collect_for_seed",
    "check_dataset", "train_estimator", "make_estimator", "eval_targets", "controller_config",
    "evaluate", "scored_distance", "StepTable", "step_table", "write_results", "analyze",
    "summary_rows", "threshold_spec", "bucket_spec", "run_header", "fmt",
]
