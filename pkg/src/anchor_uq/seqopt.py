"""Bayesian optimization with expected improvement over neural and GP surrogates.

Each iteration refits the surrogate from scratch on every observation,
scores a uniform candidate pool by EI, refines the best few candidates with
a coordinate pattern search, and evaluates the winner (one point per
iteration).  Targets are standardized before fitting, so EI and ``xi``
live in standardized units.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _accel, nn
from .anchoring import Dataset, predict_delta_uq, sample_anchors, train_delta_uq
from .baselines import (
    gp_fit, gp_predict, member_seed, predict_deep_ensemble, predict_mc_dropout,
    train_deep_ensemble, train_mc_dropout,
)
from .benchmarks import BlackboxFunction, evaluate, f_range, get_function
from .errors import ConfigurationError, EvaluationError, ScoringError

log = logging.getLogger(__name__)

SURROGATES = ("delta_uq", "deep_ensemble", "mc_dropout", "gp")
# acquisition-time forward precision of the neural surrogates; training is always float64
_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class BoConfig:
    n_init: int = 5
    n_steps: int = 25
    pool_size: int = 2000
    n_restarts: int = 15
    xi: float = 0.01
    q: int = 1
    seeds: tuple = (0, 1, 2, 3, 4)
    trials_per_seed: int = 5
    # surrogate settings shared by the neural surrogates
    hidden_layers: tuple = (128, 128, 128, 128)
    pe_frequencies: int = 2
    learning_rate: float = 1e-4
    epochs: int = 500
    batch_size: int = 64
    max_anchors: int = 20
    ensemble_members: int = 5
    mc_passes: int = 50
    dropout_rate: float = 0.1
    pattern_steps: int = 50
    pattern_step0: float = 0.05
    pattern_min_step: float = 1e-4
    inference_dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.n_init < 2:
            raise ConfigurationError("n_init must be >= 2")
        if self.n_steps < 0:
            raise ConfigurationError("n_steps must be >= 0")
        if self.q != 1:
            raise ConfigurationError("only q = 1 (one candidate per iteration) is supported")
        if self.pool_size < self.n_restarts or self.n_restarts < 1:
            raise ConfigurationError("need pool_size >= n_restarts >= 1")
        if self.inference_dtype not in _DTYPES:
            raise ConfigurationError(f"inference_dtype must be one of {sorted(_DTYPES)}")

    def replace(self, **changes) -> "BoConfig":
        data = asdict(self)
        data.update(changes)
        return BoConfig(**data)

    def to_json(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(d["seeds"])
        d["hidden_layers"] = list(d["hidden_layers"])
        return d


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------


def expected_improvement(mu, sigma, f_best, xi=0.01):
    """EI for maximization; exactly 0 wherever ``sigma == 0``.

    ``(mu - f_best - xi) * Phi(z) + sigma * phi(z)`` with
    ``z = (mu - f_best - xi) / sigma``.
    """
    mu_arr = np.asarray(mu, dtype=np.float64)
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr < 0):
        raise ValueError("sigma must be non-negative")
    mu_b, sigma_b = np.broadcast_arrays(mu_arr, sigma_arr)
    out = _accel.ei_batch(mu_b, sigma_b, f_best, xi).reshape(mu_b.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# surrogates
# ---------------------------------------------------------------------------


class _Surrogate:
    """``fit(dataset)`` then ``predict(x) -> (mu, sigma)`` as 1-D arrays."""

    def fit(self, dataset: Dataset):
        raise NotImplementedError

    def predict(self, x):
        raise NotImplementedError


class DeltaUqSurrogate(_Surrogate):
    def __init__(self, config: BoConfig, seed: int):
        self.config, self.seed = config, seed

    def fit(self, dataset):
        cfg = self.config
        mlp = nn.MlpConfig(2 * dataset.dim, cfg.hidden_layers, 1, pe_frequencies=cfg.pe_frequencies, seed=self.seed)
        tc = nn.TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size)
        self.model = train_delta_uq(dataset, mlp, tc)
        k = min(cfg.max_anchors, dataset.n)
        self.anchors = sample_anchors(dataset.inputs, k, np.random.default_rng([self.seed, dataset.n]))
        return self

    def predict(self, x):
        est = predict_delta_uq(self.model, x, self.anchors, _DTYPES[self.config.inference_dtype])
        sigma = est.std[:, 0] if est.std is not None else np.zeros(len(est.mean))
        return est.mean[:, 0], sigma


class DeepEnsembleSurrogate(_Surrogate):
    def __init__(self, config: BoConfig, seed: int):
        self.config, self.seed = config, seed

    def fit(self, dataset):
        cfg = self.config
        mlp = nn.MlpConfig(dataset.dim, cfg.hidden_layers, 1, pe_frequencies=cfg.pe_frequencies, seed=self.seed)
        tc = nn.TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size)
        self.model = train_deep_ensemble(dataset, mlp, tc, cfg.ensemble_members)
        return self

    def predict(self, x):
        est = predict_deep_ensemble(self.model, x, _DTYPES[self.config.inference_dtype])
        return est.mean[:, 0], est.std[:, 0]


class McDropoutSurrogate(_Surrogate):
    def __init__(self, config: BoConfig, seed: int):
        self.config, self.seed = config, seed

    def fit(self, dataset):
        cfg = self.config
        mlp = nn.MlpConfig(dataset.dim, cfg.hidden_layers, 1, dropout_rate=cfg.dropout_rate,
                           pe_frequencies=cfg.pe_frequencies, seed=self.seed)
        tc = nn.TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size)
        self.model = train_mc_dropout(dataset, mlp, tc)
        return self

    def predict(self, x):
        # reseeded per call so repeated queries of one point agree
        est = predict_mc_dropout(self.model, x, self.config.mc_passes, np.random.default_rng([self.seed, 7]),
                                 dtype=_DTYPES[self.config.inference_dtype])
        return est.mean[:, 0], est.std[:, 0]


class GpSurrogateWrapper(_Surrogate):
    def __init__(self, config: BoConfig, seed: int):
        self.config, self.seed = config, seed

    def fit(self, dataset):
        # targets arrive standardized already; keep the GP in those units
        self.model = gp_fit(dataset, normalize_y=False)
        return self

    def predict(self, x):
        est = gp_predict(self.model, x)
        return est.mean[:, 0], est.std[:, 0]


_SURROGATE_TYPES = {
    "delta_uq": DeltaUqSurrogate,
    "deep_ensemble": DeepEnsembleSurrogate,
    "mc_dropout": McDropoutSurrogate,
    "gp": GpSurrogateWrapper,
}


def make_surrogate(kind: str, config: BoConfig, seed: int) -> _Surrogate:
    try:
        return _SURROGATE_TYPES[kind](config, seed)
    except KeyError:
        raise ConfigurationError(f"unknown surrogate {kind!r}; choose from {SURROGATES}") from None


# ---------------------------------------------------------------------------
# proposal
# ---------------------------------------------------------------------------


def _scaled(u, bounds):
    return bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])


def pattern_search(score, starts, n_steps=50, step0=0.05, min_step=1e-4):
    """Coordinate pattern search maximizing ``score`` inside the unit box.

    Each active start polls ``+-step`` along every coordinate; it moves to
    its best neighbor when that strictly improves, otherwise halves its
    step.  A start retires once its step drops below ``min_step``.  Returns
    ``(points, values)`` in the order of ``starts``.
    """
    x = np.array(starts, dtype=np.float64)
    vals = np.asarray(score(x), dtype=np.float64)
    n, d = x.shape
    steps = np.full(n, float(step0))
    offsets = np.concatenate([np.eye(d), -np.eye(d)])
    for _ in range(n_steps):
        active = np.flatnonzero(steps >= min_step)
        if active.size == 0:
            break
        cand = x[active, None, :] + steps[active, None, None] * offsets[None, :, :]
        np.clip(cand, 0.0, 1.0, out=cand)
        cvals = np.asarray(score(cand.reshape(-1, d)), dtype=np.float64).reshape(active.size, 2 * d)
        best = np.argmax(cvals, axis=1)
        best_val = cvals[np.arange(active.size), best]
        improved = best_val > vals[active]
        moved = active[improved]
        x[moved] = cand[np.flatnonzero(improved), best[improved]]
        vals[moved] = best_val[improved]
        steps[active[~improved]] *= 0.5
    return x, vals


def propose(surrogate, bounds, observed_best, config: BoConfig, rng):
    """Pick the next point: EI over a uniform pool, pattern-search refinement of the top starts.

    Ties in EI resolve to the lowest pool index (and then the lowest
    restart rank), so an all-zero EI surface returns the first pool point.
    Returns ``(x, ei_value)``.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    d = bounds.shape[0]
    pool = rng.random((config.pool_size, d))

    def score(u):
        mu, sigma = surrogate.predict(_scaled(u, bounds))
        return expected_improvement(mu, sigma, observed_best, config.xi)

    pool_ei = score(pool)
    top = np.argsort(-pool_ei, kind="stable")[: config.n_restarts]
    if config.pattern_steps > 0:
        refined, vals = pattern_search(score, pool[top], config.pattern_steps,
                                       config.pattern_step0, config.pattern_min_step)
    else:
        refined, vals = pool[top], pool_ei[top]
    pick = int(np.argmax(vals))
    return _scaled(refined[pick], bounds), float(vals[pick])


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


@dataclass
class TraceRecord:
    iteration: int
    x: np.ndarray
    value: float
    best_so_far: float


@dataclass
class OptimizationTrace:
    function_tag: str
    surrogate_tag: str
    seed: int
    trial: int
    n_init: int
    records: list = field(default_factory=list)

    @property
    def values(self):
        return np.array([r.value for r in self.records])

    @property
    def best_so_far(self):
        return np.array([r.best_so_far for r in self.records])

    def append(self, x, value):
        best = value if not self.records else max(self.records[-1].best_so_far, value)
        rec = TraceRecord(len(self.records), np.asarray(x, dtype=np.float64).copy(), float(value), float(best))
        self.records.append(rec)
        return rec

    def csv_header(self):
        d = self.records[0].x.size if self.records else 0
        return ["iteration"] + [f"x{i}" for i in range(d)] + ["f", "best"]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.csv_header())
            for r in self.records:
                w.writerow(trace_row(r))


def trace_row(rec: TraceRecord):
    return [rec.iteration, *(repr(float(v)) for v in rec.x), repr(rec.value), repr(rec.best_so_far)]


def read_trace_csv(path, function_tag="", surrogate_tag="", seed=0, trial=0, n_init=0):
    trace = OptimizationTrace(function_tag, surrogate_tag, seed, trial, n_init)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        x = np.array([float(v) for v in row[1:-2]])
        trace.records.append(TraceRecord(int(row[0]), x, float(row[-2]), float(row[-1])))
    return trace


def _design_rng(seed, trial):
    return np.random.default_rng([int(seed), int(trial), 0])


def run_bo(function: BlackboxFunction, surrogate_kind: str, config: BoConfig, seed: int = 0, trial: int = 0,
           on_record=None) -> OptimizationTrace:
    """One optimization run: ``n_init`` uniform points, then ``n_steps`` EI proposals.

    The initial design depends only on ``(seed, trial)``, so every surrogate
    kind starts from the same points.  ``on_record(record)`` is called after
    each evaluation (used for append-only trace files).  A failing
    evaluation raises ``EvaluationError`` with ``.trace`` holding the
    partial trace.
    """
    if surrogate_kind not in SURROGATES:
        raise ConfigurationError(f"unknown surrogate {surrogate_kind!r}")
    trace = OptimizationTrace(function.key, surrogate_kind, int(seed), int(trial), config.n_init)
    bounds = function.bounds
    lo, hi = bounds[:, 0], bounds[:, 1]
    design = lo + (hi - lo) * _design_rng(seed, trial).random((config.n_init, function.dim))

    def observe(x):
        try:
            value = evaluate(function, x)
        except EvaluationError as exc:
            exc.trace = trace
            raise
        rec = trace.append(x, value)
        if on_record is not None:
            on_record(rec)

    for x in design:
        observe(x)

    net_seed = member_seed(seed, 1000 + trial)
    for it in range(config.n_steps):
        xs = np.array([r.x for r in trace.records])
        ys = trace.values
        mean, scale = ys.mean(), ys.std()
        scale = scale if scale > 0 else 1.0
        ds = Dataset(xs, (ys - mean) / scale, bounds=bounds)
        surrogate = make_surrogate(surrogate_kind, config, net_seed).fit(ds)
        best_std = (trace.records[-1].best_so_far - mean) / scale
        rng = np.random.default_rng([int(seed), int(trial), 2, it])
        x_next, _ = propose(surrogate, bounds, best_std, config, rng)
        observe(x_next)
        log.debug("%s %s s%d t%d it%d f=%.6g best=%.6g", function.key, surrogate_kind, seed, trial, it,
                  trace.records[-1].value, trace.records[-1].best_so_far)
    return trace


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def normalized_curve(trace: OptimizationTrace, frange):
    """Best-so-far after each post-init iteration, mapped to ``[0, 1]`` by ``(worst, best)``."""
    worst, best = frange
    if not best > worst:
        raise ScoringError(f"degenerate f_range {frange}")
    b = trace.best_so_far[trace.n_init:]
    return np.clip((b - worst) / (best - worst), 0.0, 1.0)


def auc_score(trace: OptimizationTrace, frange) -> float:
    """Normalized area under the iteration-vs-best-value curve over the post-init steps.

    Trapezoid rule over unit-spaced iterations, divided by the iteration
    span; a single step scores its own normalized value.  With no steps
    the score is the normalized best of the initial design.
    """
    curve = normalized_curve(trace, frange)
    if curve.size == 0:
        worst, best = frange
        return float(np.clip((trace.best_so_far[-1] - worst) / (best - worst), 0.0, 1.0))
    if curve.size == 1:
        return float(curve[0])
    return float(np.sum((curve[1:] + curve[:-1]) * 0.5) / (curve.size - 1))


def function_range(function: BlackboxFunction):
    return f_range(function.name, function.dim)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def trace_filename(function: BlackboxFunction, kind: str, seed: int, trial: int) -> str:
    return f"{function.key}__{kind}__s{seed}_t{trial}.csv"


def _run_job(args):
    fname, fdim, kind, config, seed, trial, out_dir = args
    function = get_function(fname, fdim)
    path = Path(out_dir) / "traces" / trace_filename(function, kind, seed, trial) if out_dir else None
    fh = None
    writer = None
    try:
        if path is not None:
            tmp = path.with_suffix(".partial")
            fh = open(tmp, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(["iteration"] + [f"x{i}" for i in range(function.dim)] + ["f", "best"])

        def on_record(rec):
            if writer is not None:
                writer.writerow(trace_row(rec))
                fh.flush()

        trace = run_bo(function, kind, config, seed, trial, on_record=on_record)
        if fh is not None:
            fh.close()
            fh = None
            os.replace(tmp, path)
        return {"function": function.key, "surrogate": kind, "seed": seed, "trial": trial,
                "auc": auc_score(trace, function_range(function)),
                "best": float(trace.best_so_far[-1]), "ok": True}
    except Exception as exc:  # noqa: BLE001 - a failed cell is reported, not fatal to the sweep
        log.error("cell %s/%s s%d t%d failed: %s", fname, kind, seed, trial, exc)
        return {"function": function.key, "surrogate": kind, "seed": seed, "trial": trial,
                "auc": None, "ok": False, "error": f"{type(exc).__name__}: {exc}"}
    finally:
        if fh is not None:
            fh.close()


def summarize(results):
    """Per (function, surrogate) cell: mean, std, median AUC and run counts."""
    cells = {}
    for r in results:
        cells.setdefault((r["function"], r["surrogate"]), []).append(r)
    out = []
    for (fkey, kind), rows in sorted(cells.items()):
        aucs = np.array([r["auc"] for r in rows if r["ok"]])
        entry = {"function": fkey, "surrogate": kind, "runs": len(rows), "failed": sum(not r["ok"] for r in rows)}
        if aucs.size:
            entry.update(mean=float(aucs.mean()), std=float(aucs.std()), median=float(np.median(aucs)),
                         formatted=f"{aucs.mean():.2f} ± {aucs.std():.2f}")
        out.append(entry)
    return out


def run_sweep(functions, kinds, config: BoConfig, out_dir=None, jobs: int = 1, skip=None):
    """Run every (function, kind, seed, trial) job; returns the per-run result dicts.

    ``functions`` holds ``(name, dim)`` pairs.  Jobs listed in ``skip`` (a
    set of trace filenames) are not rerun; their AUC is recomputed from the
    existing trace file.
    """
    skip = skip or set()
    tasks, done = [], []
    for fname, fdim in functions:
        function = get_function(fname, fdim)
        for kind in kinds:
            for seed in config.seeds:
                for trial in range(config.trials_per_seed):
                    name = trace_filename(function, kind, seed, trial)
                    if name in skip and out_dir is not None:
                        tr = read_trace_csv(Path(out_dir) / "traces" / name, function.key, kind, seed, trial,
                                            config.n_init)
                        done.append({"function": function.key, "surrogate": kind, "seed": seed, "trial": trial,
                                     "auc": auc_score(tr, function_range(function)),
                                     "best": float(tr.best_so_far[-1]), "ok": True})
                        continue
                    tasks.append((function.name, function.dim, kind, config, seed, trial,
                                  str(out_dir) if out_dir else None))
    if out_dir is not None:
        (Path(out_dir) / "traces").mkdir(parents=True, exist_ok=True)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, tasks))
    else:
        results = [_run_job(t) for t in tasks]
    return done + results


def write_summary(path, results, config: BoConfig, extra=None):
    payload = {"config": config.to_json(), "cells": summarize(results),
               "failed": [r for r in results if not r["ok"]],
               "runs": sorted(results, key=lambda r: (r["function"], r["surrogate"], r["seed"], r["trial"]))}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload
