"""Command-line interface: ``segnlme {fit, predict, simulate, benchmark}``.

Exit statuses
-------------
0 success; 1 other model failure; 2 configuration error; 3 data error;
4 StEM did not converge within ``max_iterations`` (outputs are still
written); 5 sampler stall; 6 divergence; 7 a benchmark scenario exceeded
its failure budget.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .baseline import BaselineResult, baseline_fit
from .errors import (
    ConfigurationError, DataError, DivergenceError, SamplingStallError, SegNLMEError,
)
from .io import (
    TRUTH_COLUMNS, RunConfig, ingest, theta_from_json, write_csv, write_dataset, write_json,
)
from .model import Latents, ModelSpec, Panel, Theta, coord_names, mean_values
from .simulate import SimScenario, generate_dataset, run_scenario
from .stem import StemResult, posterior_mean_latents, stem_run

log = logging.getLogger("segnlme")

EXIT_OK = 0
EXIT_MODEL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONCONVERGENCE = 4
EXIT_STALL = 5
EXIT_DIVERGENCE = 6
EXIT_BUDGET = 7

DAYS_PER_YEAR = 365.25
Z95 = 1.959963984540054


def changepoint_ci_days(tau_hat: float, se: float, spec: ModelSpec = ModelSpec(),
                        z: float = Z95) -> tuple[float, float]:
    """Day-scale interval for the population change point.

    With a log-normal change point this is ``exp(tau_hat -/+ z * se) * 365.25``.
    """
    lo, hi = tau_hat - z * se, tau_hat + z * se
    if spec.tau_exp:
        lo, hi = math.exp(lo), math.exp(hi)
    return lo * DAYS_PER_YEAR, hi * DAYS_PER_YEAR


def _natural_tau(x, spec: ModelSpec):
    x = np.asarray(x, dtype=float)
    return np.exp(x) if spec.tau_exp else x


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    baseline: BaselineResult
    stem: StemResult
    posterior: Latents
    tau_draws: np.ndarray
    seeds: dict


def fit_dataset(subjects, cfg: RunConfig, seed: int, trace=None, on_check=None) -> FitResult:
    """Baseline initializer, StEM, and posterior-mean prediction."""
    spec = cfg.model
    s_base, s_stem, s_pred = np.random.SeedSequence(seed).spawn(3)
    seeds = {"baseline": _seed_int(s_base), "stem": _seed_int(s_stem),
             "predict": _seed_int(s_pred)}
    base = baseline_fit(subjects, cfg.fit_log1plus(), spec, cfg.fit_baseline_stem(),
                        replace(cfg.gibbs, rng_seed=seeds["baseline"]),
                        rng=np.random.default_rng(s_base))
    stem_cfg = cfg.fit_stem()
    res = stem_run(base.panel, base.theta, base.latents, spec, stem_cfg,
                   replace(cfg.gibbs, rng_seed=seeds["stem"]), trace=trace,
                   on_check=on_check)
    theta = res.pooled.theta if res.pooled is not None else res.history.thetas[-1]
    post, taus = posterior_mean_latents(
        base.panel, theta, spec, stem_cfg.posterior_mean_draws, init_latents=res.latents,
        gibbs=replace(cfg.gibbs, rng_seed=seeds["predict"]), return_draws=True)
    return FitResult(base, res, post, taus, seeds)


def _param_rows(res: StemResult, spec: ModelSpec):
    p = res.pooled
    names = coord_names(spec)
    rows = []
    for name, est, se in zip(names, p.coords, p.se):
        lo = hi = None
        if name == "tau" and np.isfinite(se):
            lo, hi = changepoint_ci_days(float(est), float(se), spec)
        rows.append([name, "internal", est, se, lo, hi])
    if p.natural is not None:
        nse = p.natural_se if p.natural_se is not None else [None] * len(p.natural)
        for name, est, se in zip(p.natural_names, p.natural, nse):
            rows.append([name, "natural", est, se, None, None])
    return rows


PARAM_COLUMNS = ("parameter", "scale", "estimate", "se", "ci_low_days", "ci_high_days")


def prediction_rows(panel: Panel, post: Latents, spec: ModelSpec, tau_draws=None,
                    baseline_cps=None):
    cp = _natural_tau(post.tau, spec)
    rows = []
    for i, sid in enumerate(panel.ids):
        row = [sid, post.tau[i], cp[i], cp[i] * DAYS_PER_YEAR]
        row += list(post.a[i]) + list(post.b[i])
        if tau_draws is not None:
            row.append(float(np.mean(_natural_tau(tau_draws[:, i], spec))))
        if baseline_cps is not None:
            row.append(baseline_cps[i])
        rows.append(row)
    return rows


def prediction_columns(spec: ModelSpec, with_draws: bool, with_baseline: bool):
    cols = ["subject_id", "tau_latent", "change_point_years", "change_point_days"]
    cols += [f"{n}_latent" for n in spec.a_names + spec.b_names]
    if with_draws:
        cols.append("change_point_years_draw_mean")
    if with_baseline:
        cols.append("baseline_change_point_years")
    return cols


def curve_rows(panel: Panel, post: Latents, theta: Theta, spec: ModelSpec, n_points: int):
    rows = []
    for i, sid in enumerate(panel.ids):
        hi = panel.offsets[i + 1]
        grid = np.linspace(0.0, float(panel.t[hi - 1]), n_points)
        fitted = mean_values(grid, post.tau[i], post.a[i], post.b[i], spec)
        pop = mean_values(grid, theta.tau_mean, theta.alpha, theta.beta, spec)
        rows.extend([sid, t, f, q] for t, f, q in zip(grid, fitted, pop))
    return rows


def write_fit_outputs(out: Path, fit: FitResult, cfg: RunConfig, seed: int,
                      checks: list) -> None:
    spec = cfg.model
    res, base = fit.stem, fit.baseline
    panel = base.panel
    theta = res.pooled.theta if res.pooled is not None else res.history.thetas[-1]
    if res.pooled is not None:
        write_csv(out / "params.csv", PARAM_COLUMNS, _param_rows(res, spec))
    names = res.history.names
    write_csv(out / "trace.csv", ("iteration",) + tuple(names),
              ([k + 1] + list(c) for k, c in enumerate(res.history.coords)))
    cps = {c.id: c for c in base.changepoints}
    write_csv(out / "baseline_changepoints.csv", ("subject_id", "change_point_years", "detected"),
              ([c.id, c.time, int(c.detected)] for c in base.changepoints))
    write_csv(out / "predictions.csv", prediction_columns(spec, True, True),
              prediction_rows(panel, fit.posterior, spec, fit.tau_draws,
                              [cps[s].time for s in panel.ids]))
    write_csv(out / "fitted_curves.csv",
              ("subject_id", "time_years", "fitted_log10_vl", "population_log10_vl"),
              curve_rows(panel, fit.posterior, theta, spec, cfg.curve_points))
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
    draws = theta.tau_mean + math.sqrt(theta.tau_var) * rng.standard_normal(cfg.density_samples)
    dens = [["stem", v] for v in _natural_tau(draws, spec)]
    dens += [["log1plus", c.time] for c in base.changepoints]
    write_csv(out / "changepoint_density.csv", ("source", "change_point_years"), dens)
    with (out / "convergence.jsonl").open("w") as fh:
        for rec in checks:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    model = {
        "version": __version__,
        "seed": seed,
        "seeds": fit.seeds,
        "spec": spec.to_dict(),
        "theta": theta.to_dict(),
        "baseline_theta": base.theta.to_dict(),
        "converged": res.converged,
        "iterations": res.iterations,
        "envelope_violations": res.violations,
        "config": cfg.to_dict(),
    }
    write_json(out / "model.json", model)


def cmd_fit(args, cfg: RunConfig) -> int:
    if not args.data:
        raise ConfigurationError("fit needs --data")
    out = _out_dir(args, cfg)
    subjects, report = ingest(args.data)
    if len(subjects) < 2:
        raise DataError("fewer than two usable subjects after ingest")
    seed = cfg.seed if args.seed is None else args.seed
    checks = []

    def on_check(rep):
        d = rep.to_dict()
        checks.append(d)
        log.info("check %d: statistic %.3f (threshold %.3f)%s", d["batch_index"],
                 d["statistic"], d["threshold"], " stationary" if d["stationary"] else "")

    fit = fit_dataset(subjects, cfg, seed, on_check=on_check)
    write_json(out / "ingest_report.json", report.to_dict())
    write_fit_outputs(out, fit, cfg, seed, checks)
    if not fit.stem.converged:
        log.error("StEM did not converge within %d iterations", fit.stem.iterations)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args, cfg: RunConfig) -> int:
    if not args.data:
        raise ConfigurationError("predict needs --data")
    model_path = Path(args.model) if args.model else _out_dir(args, cfg) / "model.json"
    try:
        doc = json.loads(model_path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read model file {model_path}: {exc}") from None
    spec = ModelSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc["spec"].items()})
    theta = theta_from_json(doc["theta"])
    subjects, _ = ingest(args.data)
    panel = Panel.from_subjects(subjects)
    seed = cfg.seed if args.seed is None else args.seed
    gibbs = replace(cfg.gibbs, rng_seed=_seed_int(np.random.SeedSequence(seed)))
    post, taus = posterior_mean_latents(panel, theta, spec, cfg.fit_stem().posterior_mean_draws,
                                        gibbs=gibbs, return_draws=True)
    out = _out_dir(args, cfg)
    write_csv(out / "predictions.csv", prediction_columns(spec, True, False),
              prediction_rows(panel, post, spec, taus))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def simulate_replicate(scenario: SimScenario, spec: ModelSpec, index: int):
    """Dataset of replicate ``index``; identical to the benchmark's data."""
    root = np.random.SeedSequence(scenario.rng_seed).spawn(scenario.n_replicates)[index]
    return generate_dataset(scenario, spec, np.random.default_rng(root.spawn(3)[0]))


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    sc = cfg.scenario
    if args.seed is not None:
        sc = replace(sc, rng_seed=args.seed)
    n = args.replicates if args.replicates is not None else 1
    sc = replace(sc, n_replicates=n)
    manifest = {"scenario": sc.to_dict(), "model": cfg.model.to_dict(), "replicates": []}
    for k in range(n):
        d = simulate_replicate(sc, cfg.model, k)
        tag = "" if n == 1 else f"_{k + 1:03d}"
        write_dataset(out / f"dataset{tag}.csv", d.subjects)
        write_csv(out / f"truth{tag}.csv",
                  TRUTH_COLUMNS + tuple(f"{x}_latent" for x in cfg.model.a_names + cfg.model.b_names),
                  ([s.id, l.tau_latent, float(_natural_tau(l.tau_latent, cfg.model))]
                   + list(l.a) + list(l.b) for s, l in zip(d.subjects, d.truth)))
        manifest["replicates"].append({"index": k, "dataset": f"dataset{tag}.csv",
                                       "achieved_rate": d.achieved_rate,
                                       "warning": d.warning,
                                       "n_subjects": len(d.subjects)})
    write_json(out / "manifest.json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark

METRIC_COLUMNS = ("method", "parameter", "Est", "SE", "SD", "MSE", "Bias%")
FULL_SCALE = {"n_subjects": 500, "n_replicates": 100}


def rate_tag(rate: float) -> str:
    return f"{int(round(100 * rate))}"


def benchmark_fingerprint(scenario: SimScenario, bench) -> str:
    doc = {"scenario": scenario.to_dict(), "bench": dataclasses.asdict(bench)}
    blob = json.dumps(doc, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _load_completed(path: Path, fingerprint: str) -> list:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    if not lines or json.loads(lines[0]).get("fingerprint") != fingerprint:
        return []
    return [json.loads(x) for x in lines[1:] if x.strip()]


def run_benchmark(cfg: RunConfig, out: Path, seed: int | None = None,
                  replicates: int | None = None, full_scale: bool = False,
                  workers: int | None = None, resume: bool = True) -> dict:
    """Run the censoring-rate grid; writes metrics, replicate logs, and a manifest.

    Replicate records are appended to ``replicates_<rate>.jsonl`` as they
    finish; with ``resume`` a rerun under the same settings reuses them.
    Returns the manifest.
    """
    bench = cfg.bench_config()
    base_sc = cfg.scenario
    if full_scale:
        base_sc = replace(base_sc, **FULL_SCALE)
    if seed is not None:
        base_sc = replace(base_sc, rng_seed=seed)
    if replicates is not None:
        base_sc = replace(base_sc, n_replicates=replicates)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, "backend": kernels.BACKEND,
                "bench": dataclasses.asdict(bench), "scenarios": []}
    for rate in cfg.censor_rates:
        sc = replace(base_sc, censor_rate=float(rate))
        tag = rate_tag(rate)
        fp = benchmark_fingerprint(sc, bench)
        rep_path = out / f"replicates_{tag}.jsonl"
        done = _load_completed(rep_path, fp) if resume else []
        with rep_path.open("w") as fh:
            fh.write(json.dumps({"fingerprint": fp}) + "\n")
            for rec in done:
                fh.write(json.dumps(rec) + "\n")

        def progress(rec, _path=rep_path):
            with _path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
            log.info("censoring %s%%: replicate %d done%s", tag, rec["index"],
                     f" ({rec['error']})" if "error" in rec else "")

        result = run_scenario(sc, bench, workers=workers, progress=progress, completed=done)
        rows = [[m] + [r.as_dict()[c] for c in METRIC_COLUMNS[1:]]
                for m, table in result.metrics.items() for r in table]
        write_csv(out / f"metrics_{tag}.csv", METRIC_COLUMNS, rows)
        manifest["scenarios"].append({
            "censor_rate": float(rate),
            "fingerprint": fp,
            "scenario": sc.to_dict(),
            "failures": result.failures,
            "failed": result.failed,
            "replicates": [
                {"index": r["index"], "achieved_rate": r["achieved_rate"],
                 "error": r.get("error"),
                 **{f"{m}_iterations": r[m]["iterations"] for m in ("stem", "baseline") if m in r},
                 **{f"{m}_converged": r[m]["converged"] for m in ("stem", "baseline") if m in r}}
                for r in result.replicates
            ],
            "metrics_file": f"metrics_{tag}.csv",
        })
    write_json(out / "manifest.json", manifest)
    return manifest


def cmd_benchmark(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    manifest = run_benchmark(cfg, out, seed=args.seed, replicates=args.replicates,
                             full_scale=args.full_scale, resume=not args.no_resume)
    if any(s["failed"] for s in manifest["scenarios"]):
        log.error("a scenario exceeded its failure budget")
        return EXIT_BUDGET
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigurationError("no output directory: pass --out or set output_dir")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segnlme", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress")
        return sp

    fit = common(sub.add_parser("fit", help="fit a dataset by StEM"))
    fit.add_argument("--data", help="dataset CSV")
    pr = common(sub.add_parser("predict", help="posterior-mean latents under a fitted model"))
    pr.add_argument("--data", help="dataset CSV")
    pr.add_argument("--model", help="model.json from a fit (default: <out>/model.json)")
    sim = common(sub.add_parser("simulate", help="generate synthetic datasets"))
    sim.add_argument("--replicates", type=int, help="number of datasets (default 1)")
    bm = common(sub.add_parser("benchmark", help="run the censoring-rate benchmark grid"))
    bm.add_argument("--replicates", type=int, help="replicates per scenario")
    bm.add_argument("--full-scale", action="store_true",
                    help="500 subjects x 100 replicates per scenario")
    bm.add_argument("--no-resume", action="store_true",
                    help="recompute replicates even if a matching log exists")
    return p


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate,
            "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "replicates", None) is not None and args.replicates < 1:
            raise ConfigurationError("--replicates must be >= 1")
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except SamplingStallError as exc:
        log.error("sampler stall: %s", exc)
        return EXIT_STALL
    except DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except SegNLMEError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
