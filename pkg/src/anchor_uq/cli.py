"""Command-line interface: ``anchor-uq {fit,uq,bo,ntk,bench,metrics}``.

Settings resolve as command-line flags, then ``--config`` (a flat
``key = value`` file whose keys are flag names), then defaults.
``ANCHOR_UQ_SEED`` sets the default seed.  Every command that writes
results writes a ``RunManifest`` first.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import anchoring, baselines, benchmarks, metrics, nn, ntk, seqopt
from .errors import DataFormatError
from .io import (
    MANIFEST_NAME, RunManifest, echo, read_dataset, read_table, read_text_table, write_json,
    write_table,
)

log = logging.getLogger("anchor_uq")

FIT_METHODS = ("delta_uq", "anchor_ensemble", "deep_ensemble", "mc_dropout", "gp")


def _default_seed():
    raw = os.environ.get("ANCHOR_UQ_SEED")
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"ANCHOR_UQ_SEED must be an integer, got {raw!r}") from None


def _int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_list(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment.  Dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: expected key = value", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------------------
# fit / uq
# ---------------------------------------------------------------------------


def _mlp_settings(args, input_dim, dropout=0.0):
    return nn.MlpConfig(input_dim, args.hidden, 1 if args.targets == 1 else args.targets,
                        dropout_rate=dropout, pe_frequencies=args.pe, seed=args.seed)


def _write_gp(path, gp):
    payload = {
        "lengthscale": gp.lengthscale, "signal_variance": gp.signal_variance, "noise": gp.noise,
        "jitter": gp.jitter, "x_train": gp.x_train, "y_train": gp.y_train,
        "bounds": gp.bounds, "y_mean": gp.y_mean, "y_scale": gp.y_scale,
        "log_marginal_likelihood": gp.log_marginal_likelihood,
    }
    write_json(path, payload)


def _read_gp(path):
    from scipy.linalg import cho_solve, cholesky

    d = json.loads(Path(path).read_text())
    x = np.asarray(d["x_train"], dtype=np.float64)
    y = np.asarray(d["y_train"], dtype=np.float64)
    from . import _accel

    k = _accel.rbf_gram(x, x, d["lengthscale"], d["signal_variance"])
    k += (d["noise"] + d["jitter"]) * np.eye(len(y))
    chol = cholesky(k, lower=True, check_finite=False)
    alpha = cho_solve((chol, True), y, check_finite=False)
    return baselines.GpSurrogate(
        d["lengthscale"], d["signal_variance"], d["noise"], d["jitter"], x, y, chol, alpha,
        None if d["bounds"] is None else np.asarray(d["bounds"]), d["y_mean"], d["y_scale"],
        d["log_marginal_likelihood"],
    )


def cmd_fit(args):
    x, y, header = read_dataset(args.data, args.targets)
    if args.method == "gp" and y.shape[1] != 1:
        raise SystemExit("gp supports a single target column")
    bounds = None
    if args.bounds:
        b = _float_list(args.bounds)
        bounds = np.array(b).reshape(-1, 2) if len(b) == 2 * x.shape[1] else None
        if bounds is None:
            raise SystemExit(f"--bounds needs 2*d = {2 * x.shape[1]} numbers")
    ds = anchoring.Dataset(x, y, bounds=bounds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"delta_uq": ["weights.auqw"], "mc_dropout": ["weights.auqw"], "gp": ["gp.json"],
             "anchor_ensemble": ["members.json"], "deep_ensemble": ["members.json"]}[args.method]
    manifest = RunManifest("fit", _config_of(args), [args.seed], [str(out / f) for f in files] + [str(out / "model.json")],
                           argv=args.argv)
    manifest.write(out / MANIFEST_NAME)

    tc = nn.TrainConfig(args.lr, args.epochs, args.batch_size)
    meta = {"method": args.method, "bounds": ds.bounds, "input_names": header[:x.shape[1]],
            "target_names": header[x.shape[1]:], "seed": args.seed}
    if args.method == "delta_uq":
        model = anchoring.train_delta_uq(ds, _mlp_settings(args, 2 * ds.dim), tc)
        nn.save_checkpoint(model.base, out / "weights.auqw", {"train_inputs": model.train_inputs.tolist()})
        meta["final_loss"] = model.loss_history[-1]
    elif args.method == "mc_dropout":
        model = baselines.train_mc_dropout(ds, _mlp_settings(args, ds.dim, args.dropout), tc)
        nn.save_checkpoint(model.model, out / "weights.auqw")
    elif args.method == "deep_ensemble":
        ens = baselines.train_deep_ensemble(ds, _mlp_settings(args, ds.dim), tc, args.members)
        names = []
        for i, member in enumerate(ens.members):
            name = f"member_{i:02d}.auqw"
            nn.save_checkpoint(member, out / name, {"seed": ens.seeds[i]})
            names.append(name)
        write_json(out / "members.json", {"files": names, "seeds": ens.seeds})
    elif args.method == "anchor_ensemble":
        k = min(args.members, ds.n)
        anchors = anchoring.sample_anchors(ds.inputs, k, np.random.default_rng([args.seed, 1]))
        ens = anchoring.train_anchor_ensemble(ds, _mlp_settings(args, ds.dim), tc, anchors)
        names = []
        for i, member in enumerate(ens.members):
            name = f"member_{i:02d}.auqw"
            nn.save_checkpoint(member, out / name)
            names.append(name)
        write_json(out / "members.json", {"files": names, "anchors": ens.anchors})
    else:
        _write_gp(out / "gp.json", baselines.gp_fit(ds))
    write_json(out / "model.json", meta)
    echo(f"wrote {args.method} checkpoint to {out}")
    return 0


def _query_points(args, bounds):
    if args.query:
        _, q = read_table(args.query)
        if q.shape[1] != bounds.shape[0]:
            raise DataFormatError(f"{args.query}: expected {bounds.shape[0]} columns, got {q.shape[1]}")
        return q
    if bounds.shape[0] == 1:
        return np.linspace(bounds[0, 0], bounds[0, 1], args.grid)[:, None]
    axes = [np.linspace(lo, hi, args.grid) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def cmd_uq(args):
    ckpt = Path(args.checkpoint)
    if not (ckpt / "model.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt} (model.json missing)")
    meta = json.loads((ckpt / "model.json").read_text())
    bounds = np.asarray(meta["bounds"], dtype=np.float64)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    RunManifest("uq", _config_of(args), [args.anchor_seed], [str(out)], argv=args.argv).write(
        out.with_name(out.name + ".manifest.json"))

    xq = _query_points(args, bounds)
    method = meta["method"]
    if method == "delta_uq":
        base, extra = nn.load_checkpoint(ckpt / "weights.auqw")
        train_x = np.asarray(extra["train_inputs"], dtype=np.float64)
        model = anchoring.AnchoredModel(base, bounds, meta["seed"], train_x)
        anchors = anchoring.sample_anchors(train_x, args.anchors, np.random.default_rng(args.anchor_seed))
        est = anchoring.predict_delta_uq(model, xq, anchors)
    elif method == "mc_dropout":
        base, _ = nn.load_checkpoint(ckpt / "weights.auqw")
        est = baselines.predict_mc_dropout(baselines.DropoutModel(base, bounds), xq, args.passes,
                                           np.random.default_rng(args.anchor_seed))
    elif method == "deep_ensemble":
        info = json.loads((ckpt / "members.json").read_text())
        members = [nn.load_checkpoint(ckpt / f)[0] for f in info["files"]]
        est = baselines.predict_deep_ensemble(baselines.DeepEnsemble(members, info["seeds"], bounds), xq)
    elif method == "anchor_ensemble":
        info = json.loads((ckpt / "members.json").read_text())
        members = [nn.load_checkpoint(ckpt / f)[0] for f in info["files"]]
        ens = anchoring.AnchorEnsemble(np.asarray(info["anchors"]), members, bounds, meta["seed"])
        est = anchoring.predict_anchor_ensemble(ens, xq)
    else:
        est = baselines.gp_predict(_read_gp(ckpt / "gp.json"), xq)

    in_names = meta["input_names"]
    t_names = meta["target_names"]
    header = list(in_names) + [f"mu_{t}" for t in t_names] + [f"sigma_{t}" for t in t_names]
    rows = []
    for i in range(xq.shape[0]):
        sig = [None] * len(t_names) if est.std is None else list(est.std[i])
        rows.append(list(xq[i]) + list(est.mean[i]) + sig)
    write_table(out, header, rows)
    echo(f"wrote {len(rows)} predictions to {out}")
    return 0


# ---------------------------------------------------------------------------
# bo
# ---------------------------------------------------------------------------


def _bo_config(args):
    return seqopt.BoConfig(
        n_init=args.init, n_steps=args.steps, pool_size=args.pool, n_restarts=args.restarts, xi=args.xi,
        seeds=tuple(range(args.seed, args.seed + args.seeds)), trials_per_seed=args.trials,
        hidden_layers=args.hidden, pe_frequencies=args.pe, learning_rate=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, dropout_rate=args.dropout, ensemble_members=args.members,
        mc_passes=args.passes, inference_dtype=args.precision,
    )


def _bo_functions(args):
    """``(name, dim, init, steps)`` rows; the whole suite uses each row's own budget."""
    if args.function in ("all", "table3"):
        return [tuple(row) for row in benchmarks.TABLE3]
    return [(args.function, args.dim, args.init, args.steps)]


def cmd_bo(args):
    out = Path(args.out)
    config = _bo_config(args)
    functions = _bo_functions(args)
    for name, dim, _, _ in functions:
        benchmarks.get_function(name, dim)  # fail early on unknown names
    kinds = seqopt.SURROGATES if args.surrogate == "all" else tuple(args.surrogate.split(","))
    for k in kinds:
        if k not in seqopt.SURROGATES:
            raise SystemExit(f"unknown surrogate {k!r}; choose from {', '.join(seqopt.SURROGATES)} or all")
    run_config = {"bo": config.to_json(), "functions": [list(f) for f in functions], "surrogates": list(kinds)}

    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / MANIFEST_NAME
    skip = set()
    if args.resume and manifest_path.is_file():
        previous = RunManifest.read(manifest_path)
        if previous.config.get("run") != json.loads(json.dumps(run_config)):
            echo(f"refusing to resume: {manifest_path} was written for a different configuration")
            return 2
        traces = out / "traces"
        skip = {p.name for p in traces.glob("*.csv")} if traces.is_dir() else set()
        echo(f"resuming: {len(skip)} completed traces kept")
    elif manifest_path.is_file() and not args.resume and (out / "traces").is_dir() and any((out / "traces").iterdir()):
        echo(f"{out} already holds a run; pass --resume to continue it or choose another --out")
        return 2
    cfg_snapshot = _config_of(args)
    cfg_snapshot["run"] = run_config
    RunManifest("bo run", cfg_snapshot, list(config.seeds), [str(out / "summary.json"), str(out / "traces")],
                argv=args.argv).write(manifest_path)

    results = []
    budgets = sorted({(init, steps) for _, _, init, steps in functions})
    for init, steps in budgets:
        group = [(name, dim) for name, dim, i, s in functions if (i, s) == (init, steps)]
        results += seqopt.run_sweep(group, kinds, config.replace(n_init=init, n_steps=steps), out,
                                    jobs=args.jobs, skip=skip)
    ranges = {}
    for name, dim, _, _ in functions:
        f = benchmarks.get_function(name, dim)
        ranges[f.key] = list(seqopt.function_range(f))
    summary = seqopt.write_summary(out / "summary.json", results, config, {"f_range": ranges})
    for cell in summary["cells"]:
        echo(f"{cell['function']:>18s} {cell['surrogate']:>14s}  {cell.get('formatted', 'failed')}")
    failed = summary["failed"]
    if failed:
        echo(f"{len(failed)} run(s) failed; see summary.json")
        return 1
    return 0


# ---------------------------------------------------------------------------
# ntk / bench / metrics
# ---------------------------------------------------------------------------


def cmd_ntk(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shifts = _float_list(args.shifts)
    names = [f"spectrum_{args.kernel}_c{c:g}.csv" for c in shifts]
    RunManifest("ntk", _config_of(args), [], [str(out / n) for n in names] + [str(out / "distances.json")],
                argv=args.argv).write(out / MANIFEST_NAME)
    grid, x0 = ntk.spectrum_grid(args.grid)
    profiles = []
    for c, name in zip(shifts, names):
        prof = ntk.kernel_spectrum(ntk.kernel_slice(grid, x0, c, args.kernel, args.lengthscale), c)
        profiles.append(prof)
        norm = prof.normalized()
        write_table(out / name, ["frequency", "magnitude", "normalized"],
                    [[f, m, nm] for f, m, nm in zip(prof.frequencies, prof.magnitudes, norm)])
    dist = {f"{a:g}|{b:g}": ntk.spectrum_distance(p, q)
            for i, (a, p) in enumerate(zip(shifts, profiles)) for b, q in list(zip(shifts, profiles))[i + 1:]}
    write_json(out / "distances.json", {"kernel": args.kernel, "grid": args.grid, "pairwise_l2": dist})
    echo(f"wrote {len(names)} spectra to {out}")
    return 0


def cmd_bench(args):
    listing = [f.describe() for f in benchmarks.suite()]
    text = json.dumps(listing, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_metrics(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    RunManifest("metrics report", _config_of(args), [], [str(out)], argv=args.argv).write(
        out.with_name(out.name + ".manifest.json"))
    header, rows = read_text_table(args.input)
    cols = {h: i for i, h in enumerate(header)}
    report = {"input": str(args.input)}
    if "score" in cols and "label" in cols:
        scores = [float(r[cols["score"]]) for r in rows]
        labels = [r[cols["label"]] for r in rows]
        if all(lab in ("0", "1") for lab in labels):
            labels = [lab == "1" for lab in labels]
        report["detection"] = metrics.detection_report(scores, labels)
    prob_cols = sorted((h for h in header if h.startswith("p") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    logit_cols = sorted((h for h in header if h.startswith("logit") and h[5:].isdigit()), key=lambda h: int(h[5:]))
    if "label" in cols and (prob_cols or logit_cols):
        labels = np.array([int(float(r[cols["label"]])) for r in rows])
        if prob_cols:
            probs = np.array([[float(r[cols[h]]) for h in prob_cols] for r in rows])
            report["calibration"] = metrics.calibration_report(probs, labels, args.bins)
        else:
            logits = np.array([[float(r[cols[h]]) for h in logit_cols] for r in rows])
            report["calibration"] = metrics.calibration_report(metrics.softmax(logits), labels, args.bins)
            sig_cols = [f"sigma{h[5:]}" for h in logit_cols]
            if all(s in cols for s in sig_cols):
                sigma = np.array([[float(r[cols[s]]) for s in sig_cols] for r in rows])
                tempered = metrics.temper_logits(logits, sigma)
                report["calibration_tempered"] = metrics.calibration_report(metrics.softmax(tempered), labels,
                                                                            args.bins)
    if len(report) == 1:
        raise DataFormatError(f"{args.input}: need score,label or p0..pC/logit0..logitC with label columns")
    write_json(out, report)
    echo(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_net_flags(p, epochs=500, lr=1e-4, batch_size=64, pe=0):
    p.add_argument("--hidden", type=_int_list, default=(128, 128, 128, 128), help="hidden widths, comma separated")
    p.add_argument("--pe", type=int, default=pe, help="positional-embedding frequency count (0 disables)")
    p.add_argument("--lr", type=float, default=lr, help="Adam learning rate")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=batch_size)
    p.add_argument("--dropout", type=float, default=0.1, help="dropout rate for mc_dropout")
    p.add_argument("--members", type=int, default=5, help="ensemble size")


def build_parser():
    parser = argparse.ArgumentParser(prog="anchor-uq", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value file supplying defaults for the chosen command")
    parser.add_argument("--seed", type=int, default=None, help="base seed (default: $ANCHOR_UQ_SEED or 0)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train an estimator on a CSV dataset")
    p.add_argument("--data", required=True, help="CSV with header; last --targets columns are targets")
    p.add_argument("--targets", type=int, default=1)
    p.add_argument("--method", required=True, choices=FIT_METHODS)
    p.add_argument("--bounds", help="lo0,hi0,lo1,hi1,... (default: data range)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_net_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("uq", help="predict mean and uncertainty from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", help="CSV of query inputs (default: a grid over the bounds)")
    p.add_argument("--grid", type=int, default=101, help="grid points per dimension")
    p.add_argument("--anchors", type=int, default=10, help="anchors for delta_uq inference")
    p.add_argument("--anchor-seed", type=int, default=0, help="seed for anchor / dropout-mask sampling")
    p.add_argument("--passes", type=int, default=baselines.DEFAULT_MC_PASSES, help="MC dropout passes")
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("bo", help="Bayesian optimization sweeps")
    bo_sub = p.add_subparsers(dest="bo_command", required=True)
    r = bo_sub.add_parser("run", help="run (function x surrogate x seed x trial) jobs")
    r.add_argument("--function", required=True,
                   help="benchmark name, or 'all' for the whole suite (each function with its own --init/--steps)")
    r.add_argument("--dim", type=int, default=2)
    r.add_argument("--surrogate", default="all", help="delta_uq, deep_ensemble, mc_dropout, gp (comma list) or all")
    r.add_argument("--init", type=int, default=5)
    r.add_argument("--steps", type=int, default=25)
    r.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    r.add_argument("--trials", type=int, default=5, help="trials per seed")
    r.add_argument("--pool", type=int, default=2000, help="candidate pool size per iteration")
    r.add_argument("--restarts", type=int, default=15)
    r.add_argument("--xi", type=float, default=0.01)
    r.add_argument("--passes", type=int, default=baselines.DEFAULT_MC_PASSES, help="MC dropout passes")
    r.add_argument("--precision", choices=("float32", "float64"), default=seqopt.BoConfig().inference_dtype,
                   help="float type of surrogate forwards during acquisition (training is always float64)")
    r.add_argument("--jobs", type=int, default=1, help="worker processes")
    r.add_argument("--resume", action="store_true", help="keep finished traces of a matching earlier run")
    r.add_argument("--out", required=True)
    d = seqopt.BoConfig()
    _add_net_flags(r, d.epochs, d.learning_rate, d.batch_size, d.pe_frequencies)
    r.set_defaults(func=cmd_bo)

    p = sub.add_parser("ntk", help="Fourier spectra of kernel slices under domain shifts")
    p.add_argument("--shifts", default="0,0.3,0.6")
    p.add_argument("--kernel", choices=("ntk", "rbf"), default="ntk")
    p.add_argument("--grid", type=int, default=ntk.SPECTRUM_GRID)
    p.add_argument("--lengthscale", type=float, default=0.1, help="rbf control lengthscale")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ntk)

    p = sub.add_parser("bench", help="benchmark functions")
    b_sub = p.add_subparsers(dest="bench_command", required=True)
    b = b_sub.add_parser("list", help="print (name, dim, bounds, known_best) as JSON")
    b.add_argument("--out", help="write to a file instead of stdout")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="uncertainty-quality metrics")
    m_sub = p.add_subparsers(dest="metrics_command", required=True)
    m = m_sub.add_parser("report", help="detection and/or calibration report from a predictions CSV")
    m.add_argument("--input", required=True,
                   help="CSV with score,label (label 1/outlier) and/or p0..pC or logit0..,sigma0.. with label")
    m.add_argument("--bins", type=int, default=metrics.ECE_BINS)
    m.add_argument("--out", required=True, help="JSON report path")
    m.set_defaults(func=cmd_metrics)
    return parser


def _leaf_parser(parser, argv):
    """The innermost subparser selected by ``argv``."""
    current = parser
    for token in argv:
        acts = [a for a in current._actions if isinstance(a, argparse._SubParsersAction)]
        if not acts:
            break
        if token in acts[0].choices:
            current = acts[0].choices[token]
    return current


def _apply_config_file(parser, argv, path):
    leaf = _leaf_parser(parser, argv)
    by_dest = {a.dest: (leaf, a) for a in leaf._actions}
    for a in parser._actions:
        by_dest.setdefault(a.dest, (parser, a))
    defaults = {}
    for key, value in read_config_file(path).items():
        owner, action = by_dest.get(key, (None, None))
        if action is None or key in ("func", "help", "config", "command"):
            raise SystemExit(f"{path}: unknown setting {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            val = value.lower() in ("1", "true", "yes", "on")
        else:
            val = action.type(value) if action.type else value
        action.required = False
        defaults.setdefault(id(owner), (owner, {}))[1][key] = val
    for owner, values in defaults.values():
        owner.set_defaults(**values)


_UNRECORDED = {"func", "argv", "verbose", "config"}


def _config_of(args):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # only --config is needed up front; a full parse would trip over flags the file is about to supply
    early = argparse.ArgumentParser(add_help=False)
    early.add_argument("--config")
    pre, _ = early.parse_known_args(argv)
    if pre.config:
        _apply_config_file(parser, argv, pre.config)
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = _default_seed()
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataFormatError, FileNotFoundError) as exc:
        echo(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
