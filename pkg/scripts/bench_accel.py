#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

Per-kernel timings use the same inputs for both backends (best of
``--repeat`` runs after one warm-up call, so JIT compilation is excluded).
The end-to-end row trains and queries a small delta-UQ surrogate and
fits/queries a GP under each backend.

    python scripts/bench_accel.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from anchor_uq import _accel, nn
from anchor_uq.anchoring import Dataset, predict_delta_uq, sample_anchors, train_delta_uq
from anchor_uq.baselines import gp_fit, gp_predict


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernels(rng):
    n_params = 51_841  # a 4x128 surrogate with a 2-frequency embedding of 2-D anchored inputs
    p, g = rng.normal(size=n_params), rng.normal(size=n_params)
    m, v = rng.normal(size=n_params) * 0.1, rng.random(n_params) * 0.1
    dots = rng.uniform(-1, 1, size=(512, 512))
    a, b = rng.normal(size=(400, 6)), rng.normal(size=(2000, 6))
    mu, sigma = rng.normal(size=40_000), rng.exponential(size=40_000)
    return {
        "adam_update (52k params)": lambda: _accel.adam_update(p, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 10),
        "ntk_map (512x512)": lambda: _accel.ntk_map(dots),
        "rbf_gram (400x2000, d=6)": lambda: _accel.rbf_gram(a, b, 0.3, 1.0),
        "ei_batch (40k)": lambda: _accel.ei_batch(mu, sigma, 0.2, 0.01),
    }


def end_to_end(rng):
    x = rng.uniform(-1, 1, size=(20, 2))
    ds = Dataset(x, np.sin(3 * x[:, :1]) * x[:, 1:], bounds=[[-1, 1], [-1, 1]])
    query = rng.uniform(-1, 1, size=(2000, 2))

    def delta_uq():
        model = train_delta_uq(ds, nn.MlpConfig(4, (128,) * 4, pe_frequencies=2, seed=0),
                               nn.TrainConfig(1e-4, 100, 64))
        predict_delta_uq(model, query, sample_anchors(x, 20, np.random.default_rng(1)))

    def gp():
        gp_predict(gp_fit(ds), query)

    return {"delta-UQ train 100 epochs + 2000 queries": delta_uq, "GP fit + 2000 queries": gp}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is unavailable (or disabled by ANCHOR_UQ_DISABLE_NUMBA); nothing to compare")

    previous = _accel.backend()
    rows = []
    try:
        for group, build, repeat in (("kernel", kernels, args.repeat), ("end-to-end", end_to_end, 1)):
            cases = build(np.random.default_rng(0))
            for name, fn in cases.items():
                timing = {}
                for backend in ("numpy", "numba"):
                    _accel.set_backend(backend)
                    timing[backend] = best_of(fn, repeat)
                rows.append({"group": group, "case": name, **timing, "speedup": timing["numpy"] / timing["numba"]})
    finally:
        _accel.set_backend(previous)

    width = max(len(r["case"]) for r in rows)
    print(f"{'case':<{width}}  {'numpy [ms]':>11}  {'numba [ms]':>11}  {'speedup':>7}")
    for r in rows:
        print(f"{r['case']:<{width}}  {1e3 * r['numpy']:11.3f}  {1e3 * r['numba']:11.3f}  {r['speedup']:6.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
