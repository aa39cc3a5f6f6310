"""Compare the compiled and pure-Python kernel backends.

Times a full Gibbs sweep (all latent blocks plus censored imputations) over
a simulated panel on each available backend, and checks that both produce
the same draws from the same streams.

    python3 benchmarks/bench_kernels.py [--subjects 100] [--sweeps 5] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from segnlme import kernels
from segnlme.model import Latents, ModelSpec, Panel
from segnlme.samplers import GibbsConfig, subject_streams, sweep_panel
from segnlme.simulate import SimScenario, generate_dataset, table_truth


def run(backend, panel, theta, spec, sweeps, seed):
    lat = Latents.at_means(theta, panel)
    cens = panel.cens.astype(bool)
    lat.y[cens] = panel.dlim[cens] - 0.3
    rngs = subject_streams(np.random.SeedSequence(seed), len(panel.ids))
    cfg = GibbsConfig()
    attempts = 0
    t0 = time.perf_counter()
    for _ in range(sweeps):
        lat, att = sweep_panel(panel, lat, theta, spec, cfg, rngs, backend=backend)
        attempts += int(np.sum(att))
    return time.perf_counter() - t0, lat, attempts


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--subjects", type=int, default=100)
    p.add_argument("--sweeps", type=int, default=5)
    p.add_argument("--censor-rate", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the timings to this file")
    args = p.parse_args(argv)

    spec = ModelSpec()
    theta = table_truth()
    sc = SimScenario(n_subjects=args.subjects, censor_rate=args.censor_rate, rng_seed=args.seed)
    data = generate_dataset(sc, spec, np.random.default_rng(args.seed))
    panel = Panel.from_subjects(data.subjects)

    results, draws = {}, {}
    for name in sorted(kernels.BACKENDS):
        elapsed, lat, attempts = run(name, panel, theta, spec, args.sweeps, args.seed)
        per_sweep = elapsed / args.sweeps
        results[name] = {"seconds_per_sweep": per_sweep,
                         "ms_per_subject_sweep": 1e3 * per_sweep / args.subjects,
                         "attempts": attempts}
        draws[name] = lat.vectors
    print(f"{args.subjects} subjects, {len(panel.t)} records, {args.sweeps} sweeps "
          f"(active backend: {kernels.BACKEND})")
    for name, r in results.items():
        print(f"  {name:7s} {r['seconds_per_sweep']:9.4f} s/sweep  "
              f"{r['ms_per_subject_sweep']:8.3f} ms/subject  {r['attempts']} proposals")
    if {"cython", "python"} <= set(results):
        speedup = results["python"]["seconds_per_sweep"] / results["cython"]["seconds_per_sweep"]
        agree = bool(np.allclose(draws["cython"], draws["python"], rtol=1e-10, atol=1e-10))
        results["speedup"] = speedup
        results["draws_agree"] = agree
        print(f"  speedup {speedup:.1f}x; draws agree: {agree}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
