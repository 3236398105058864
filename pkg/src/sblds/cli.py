"""Batch experiment front end.

Subcommands: simulate, run, diagnose, oracle, sweep.  Configs are strict
TOML (unknown keys are rejected); every run directory is self-describing
(config copy + versions manifest next to the outputs).  Exit codes:
0 ok, 2 config error, 3 IO error, 4 numerical failure, 5 diagnostics or
oracle-comparison failure, 6 size cap exceeded.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__, diagnostics, em, io, oracle
from .likelihood import build_ry, log_likelihood_innovations
from .model import (
    SimConfig,
    SystemModel,
    Theta,
    random_model,
    simulate_dataset,
    validate_model,
    validate_sim_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_DIAGNOSTICS = 5
EXIT_SIZE_CAP = 6


class ConfigError(Exception):
    pass


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_config(path: Path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    _check_keys(cfg, {"seed", "out", "model", "sim", "em", "diagnostics", "run", "sweep"}, "config")
    return cfg


def build_model(cfg: dict, global_seed: int) -> SystemModel:
    section = cfg.get("model")
    if not isinstance(section, dict):
        raise ConfigError("missing [model] section")
    _check_keys(
        section,
        {"D", "A", "sigma2", "p0", "p1", "pi1", "n", "m", "K",
         "random", "seed", "spectral_radius"},
        "[model]",
    )
    for key in ("sigma2", "p0", "p1", "K"):
        if key not in section:
            raise ConfigError(f"[model] requires '{key}'")
    pi1 = float(section.get("pi1", 0.5))
    try:
        if section.get("random", False):
            for key in ("n", "m"):
                if key not in section:
                    raise ConfigError(f"[model] random generation requires '{key}'")
            model = random_model(
                int(section["n"]), int(section["m"]), int(section["K"]),
                sigma2=float(section["sigma2"]),
                p0=float(section["p0"]), p1=float(section["p1"]), pi1=pi1,
                spectral_radius=float(section.get("spectral_radius", 0.8)),
                rng=np.random.default_rng(int(section.get("seed", global_seed))),
            )
        else:
            if "D" not in section or "A" not in section:
                raise ConfigError("[model] requires D and A unless random = true")
            model = SystemModel(
                D=np.array(section["D"], dtype=float),
                A=np.array(section["A"], dtype=float),
                sigma2=float(section["sigma2"]),
                p0=float(section["p0"]), p1=float(section["p1"]),
                K=int(section["K"]), pi1=pi1,
            )
            validate_model(model)
            if "n" in section and int(section["n"]) != model.n:
                raise ConfigError(f"[model] n={section['n']} contradicts D shape")
            if "m" in section and int(section["m"]) != model.m:
                raise ConfigError(f"[model] m={section['m']} contradicts A shape")
    except ValueError as exc:
        raise ConfigError(f"[model] invalid: {exc}") from exc
    return model


def build_sim_config(cfg: dict, model: SystemModel, global_seed: int) -> SimConfig | None:
    section = cfg.get("sim")
    if section is None:
        return None
    _check_keys(section, {"sparsity", "input_variance", "support", "seed"}, "[sim]")
    if "sparsity" not in section:
        raise ConfigError("[sim] requires 'sparsity'")
    sim = SimConfig(
        sparsity=int(section["sparsity"]),
        input_variance=float(section.get("input_variance", 1.0)),
        support=tuple(int(i) for i in section["support"]) if "support" in section else None,
        seed=int(section.get("seed", global_seed)),
    )
    try:
        validate_sim_config(model, sim)
    except ValueError as exc:
        raise ConfigError(f"[sim] invalid: {exc}") from exc
    return sim


def build_em_options(cfg: dict) -> tuple[em.EMOptions, float | list, str | list]:
    section = cfg.get("em", {})
    _check_keys(
        section,
        {"max_iters", "tol_rel_L", "tol_gamma", "gamma_floor", "record_Q", "gamma0", "z0"},
        "[em]",
    )
    opts = em.EMOptions(
        max_iters=int(section.get("max_iters", 1000)),
        tol_rel_L=float(section.get("tol_rel_L", 1e-10)),
        tol_gamma=float(section.get("tol_gamma", 1e-8)),
        gamma_floor=float(section.get("gamma_floor", 1e-12)),
        record_Q=bool(section.get("record_Q", True)),
    )
    try:
        opts.validate()
    except ValueError as exc:
        raise ConfigError(f"[em] invalid: {exc}") from exc
    return opts, section.get("gamma0", 1.0), section.get("z0", "ones")


def build_theta0(model: SystemModel, gamma0, z0) -> Theta:
    if isinstance(gamma0, (int, float)):
        gamma = float(gamma0) * np.ones(model.n)
    else:
        gamma = np.array([float(g) for g in gamma0], dtype=float)
    if isinstance(z0, str):
        if z0 == "ones":
            z = np.ones(model.K, dtype=np.int64)
        elif z0 == "zeros":
            z = np.zeros(model.K, dtype=np.int64)
        else:
            raise ConfigError(f"[em] z0 must be 'ones', 'zeros', or a 0/1 list, got {z0!r}")
    else:
        z = np.array([int(v) for v in z0], dtype=np.int64)
    if gamma.shape != (model.n,) or np.any(gamma < 0):
        raise ConfigError("[em] gamma0 must be a nonnegative scalar or length-n list")
    if z.shape != (model.K,) or not np.all((z == 0) | (z == 1)):
        raise ConfigError("[em] z0 must have length K with entries in {0, 1}")
    return Theta(gamma=gamma, z=z)


def _diagnostics_kwargs(cfg: dict) -> dict:
    section = cfg.get("diagnostics", {})
    _check_keys(
        section,
        {"checks", "tol_monotone", "tol_stationary", "tol_q", "tol_gibbs"},
        "[diagnostics]",
    )
    kwargs = {}
    if "checks" in section:
        kwargs["checks"] = tuple(section["checks"])
    for key in ("tol_monotone", "tol_stationary", "tol_q", "tol_gibbs"):
        if key in section:
            kwargs[key] = float(section[key])
    return kwargs


def _write_versions(dirpath: Path) -> None:
    payload = {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "sblds": __version__,
    }
    (dirpath / "versions.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _metrics(model: SystemModel, dataset, trace: em.EMTrace) -> dict:
    theta = trace.theta_final
    post = em.rts_smoother(model, em.kalman_filter(model, dataset.Y, theta))
    Xhat = post.mean.T
    denom = float(np.sum(dataset.X**2))
    num = float(np.sum((Xhat - dataset.X) ** 2))
    nmse = num / denom if denom > 0 else (0.0 if num == 0.0 else float("inf"))
    z_acc = float(np.mean(np.asarray(theta.z) == np.asarray(dataset.zstar)))
    support_true = sorted(int(i) for i in np.nonzero(np.any(dataset.U != 0.0, axis=1))[0])
    gmax = float(np.max(theta.gamma))
    support_est = sorted(int(i) for i in np.nonzero(theta.gamma > 1e-6 * gmax)[0])
    return {
        "final_L": trace.L_final,
        "iterations": len(trace.records),
        "termination": trace.termination,
        "nmse": nmse,
        "z_accuracy": z_acc,
        "support_true": support_true,
        "support_est": support_est,
        "support_exact_match": support_est == support_true,
    }


def _prepare_out(args, cfg: dict) -> Path:
    out = args.out if args.out is not None else cfg.get("out")
    if out is None:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    return Path(out)


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        model = build_model(cfg, seed)
        sim = build_sim_config(cfg, model, seed)
        if sim is None:
            raise ConfigError("simulate requires a [sim] section")
        out = _prepare_out(args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    dataset = simulate_dataset(model, sim)
    try:
        io.write_dataset(out, model, dataset, sim_fields={
            "sparsity": sim.sparsity,
            "input_variance": sim.input_variance,
            "support": list(sim.support) if sim.support is not None else None,
            "seed": sim.seed,
        })
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write dataset: {exc}")
    print(out)
    return EXIT_OK


def _load_or_simulate(cfg: dict, model: SystemModel, seed: int):
    run_section = cfg.get("run", {})
    _check_keys(run_section, {"dataset"}, "[run]")
    if "dataset" in run_section:
        src = Path(run_section["dataset"])
        if not src.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {src}")
        loaded_model, dataset, sim_fields = io.read_dataset(src)
        return loaded_model, dataset, sim_fields
    sim = build_sim_config(cfg, model, seed)
    if sim is None:
        raise ConfigError("no dataset to run on: provide [run].dataset or a [sim] section")
    dataset = simulate_dataset(model, sim)
    sim_fields = {
        "sparsity": sim.sparsity,
        "input_variance": sim.input_variance,
        "support": list(sim.support) if sim.support is not None else None,
        "seed": sim.seed,
    }
    return model, dataset, sim_fields


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        model = build_model(cfg, seed)
        opts, gamma0, z0 = build_em_options(cfg)
        out = _prepare_out(args, cfg)
        model, dataset, sim_fields = _load_or_simulate(cfg, model, seed)
        theta0 = build_theta0(model, gamma0, z0)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_IO, str(exc))

    out.mkdir(parents=True, exist_ok=True)
    try:
        trace = em.run_em(model, dataset.Y, theta0, opts)
    except (em.AscentViolationError, np.linalg.LinAlgError) as exc:
        (out / "failure.json").write_text(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}, indent=2) + "\n")
        return _fail(EXIT_NUMERICAL, f"EM failed: {exc}")

    try:
        io.write_dataset(out, model, dataset, sim_fields=sim_fields)
        io.write_trace(out / "trace.csv", trace)
        io.write_theta_final(out / "theta_final.json", trace.theta_final, trace.termination)
        (out / "metrics.json").write_text(
            json.dumps(_metrics(model, dataset, trace), indent=2, sort_keys=True) + "\n")
        shutil.copyfile(args.config, out / "config.toml")
        _write_versions(out)
        if args.debug_dumps:
            io.write_matrix_csv(out / "ry.csv", build_ry(model, trace.theta_final).ry)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write run outputs: {exc}")
    print(out)
    return EXIT_OK


def _load_run_dir(run_dir: Path):
    run_dir = Path(run_dir)
    for required in ("model.json", "Y.csv", "trace.csv", "theta_final.json"):
        if not (run_dir / required).is_file():
            raise FileNotFoundError(f"missing {required} in {run_dir}")
    model, dataset, _ = io.read_dataset(run_dir)
    records = io.read_trace_records(run_dir / "trace.csv")
    theta_final, termination = io.read_theta_final(run_dir / "theta_final.json")
    trace = em.EMTrace(records=records, theta_final=theta_final, termination=termination)
    trace.L_final = log_likelihood_innovations(model, dataset.Y, theta_final)
    return model, dataset, trace


def cmd_diagnose(args) -> int:
    try:
        model, dataset, trace = _load_run_dir(args.run_dir)
    except (FileNotFoundError, OSError, ValueError) as exc:
        return _fail(EXIT_IO, str(exc))
    kwargs = {}
    config_copy = Path(args.run_dir) / "config.toml"
    if config_copy.is_file():
        try:
            kwargs = _diagnostics_kwargs(load_config(config_copy))
        except ConfigError as exc:
            return _fail(EXIT_CONFIG, str(exc))
    try:
        report = diagnostics.run_suite(model, dataset.Y, trace, **kwargs)
    except np.linalg.LinAlgError as exc:
        return _fail(EXIT_NUMERICAL, f"diagnostics failed numerically: {exc}")
    io.write_diagnostics(Path(args.run_dir) / "diagnostics.json", report)
    for check in report.checks:
        status = "pass" if check.passed else "FAIL"
        print(f"{status} {check.name}: value={check.value:.3e} threshold={check.threshold:.3e}")
    return EXIT_OK if report.verdict else EXIT_DIAGNOSTICS


def cmd_oracle(args) -> int:
    try:
        model, dataset, trace = _load_run_dir(args.run_dir)
    except (FileNotFoundError, OSError, ValueError) as exc:
        return _fail(EXIT_IO, str(exc))
    if model.K > oracle.TABLE_K_CAP:
        return _fail(EXIT_SIZE_CAP, f"K={model.K} exceeds the oracle cap {oracle.TABLE_K_CAP}")
    theta_final = trace.theta_final

    keep = bool(args.debug_dumps)
    bf = oracle.brute_force_z(model, dataset.Y, theta_final, keep_table=keep)
    post = em.rts_smoother(model, em.kalman_filter(model, dataset.Y, theta_final))
    scores = em.emission_scores(model, dataset.Y, post)
    z_vit = em.viterbi(scores, model)
    vit_objective = float(
        scores[np.arange(model.K), z_vit].sum() + em.markov_log_prior(model, z_vit)
    )
    in_argmax = bf.best_value - vit_objective <= 1e-12

    ml = oracle.exhaustive_ml(model, dataset.Y, keep_table=keep)
    em_final_L = trace.L_final
    gap = ml.L - em_final_L

    report = {
        "viterbi_in_argmax": bool(in_argmax),
        "viterbi_objective": vit_objective,
        "brute_force_objective": bf.best_value,
        "argmax_set_size": len(bf.argmax_set),
        "em_final_L": em_final_L,
        "exhaustive_L": ml.L,
        "L_gap": gap,
        "exhaustive_z": [int(v) for v in ml.z],
        "em_z": [int(v) for v in theta_final.z],
        "z_match": bool(np.array_equal(ml.z, theta_final.z)),
    }
    run_dir = Path(args.run_dir)
    (run_dir / "oracle_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if keep:
        Z = oracle._enumerate_masks(model.K)
        lines = ["z,objective,L"]
        for idx in range(Z.shape[0]):
            bits = "".join(str(int(b)) for b in Z[idx])
            lines.append(f"{bits},{io.format_float(bf.table[idx])},{io.format_float(ml.table[idx])}")
        (run_dir / "oracle_table.csv").write_text("\n".join(lines) + "\n")
    ok = in_argmax and gap >= -1e-9
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if ok else EXIT_DIAGNOSTICS


def _sweep_cell(payload: dict) -> dict:
    """One sweep cell, fully independent; must stay picklable for the pool."""
    model = io.model_from_dict(payload["model"])
    sim = SimConfig(
        sparsity=payload["sparsity"],
        input_variance=payload["input_variance"],
        seed=payload["seed"],
    )
    opts = em.EMOptions(**payload["em_options"])
    dataset = simulate_dataset(model, sim)
    theta0 = Theta(
        gamma=np.array(payload["gamma0"], dtype=float),
        z=np.array(payload["z0"], dtype=np.int64),
    )
    out = Path(payload["out"])
    try:
        trace = em.run_em(model, dataset.Y, theta0, opts)
    except (em.AscentViolationError, np.linalg.LinAlgError) as exc:
        return {**payload["key"], "error": f"{type(exc).__name__}: {exc}"}
    io.write_dataset(out, model, dataset, sim_fields={
        "sparsity": sim.sparsity, "input_variance": sim.input_variance,
        "support": None, "seed": sim.seed,
    })
    io.write_trace(out / "trace.csv", trace)
    io.write_theta_final(out / "theta_final.json", trace.theta_final, trace.termination)
    metrics = _metrics(model, dataset, trace)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    report = diagnostics.run_suite(model, dataset.Y, trace, **payload["diag_kwargs"])
    io.write_diagnostics(out / "diagnostics.json", report)
    return {
        **payload["key"],
        "final_L": metrics["final_L"],
        "iterations": metrics["iterations"],
        "termination": metrics["termination"],
        "nmse": metrics["nmse"],
        "z_accuracy": metrics["z_accuracy"],
        "diagnostics_pass": report.verdict,
    }


SUMMARY_COLUMNS = (
    "cell", "seed", "input_variance", "sparsity", "final_L", "iterations",
    "termination", "nmse", "z_accuracy", "diagnostics_pass",
)


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        sweep = cfg.get("sweep")
        if not isinstance(sweep, dict):
            raise ConfigError("sweep requires a [sweep] section")
        _check_keys(sweep, {"seeds", "input_variance", "sparsity"}, "[sweep]")
        if "seeds" not in sweep:
            raise ConfigError("[sweep] requires 'seeds'")
        seeds = [int(s) for s in sweep["seeds"]]
        model = build_model(cfg, seed)
        base_sim = build_sim_config(cfg, model, seed)
        if base_sim is None:
            raise ConfigError("sweep requires a [sim] section for the base cell")
        variances = [float(v) for v in sweep.get("input_variance", [base_sim.input_variance])]
        sparsities = [int(s) for s in sweep.get("sparsity", [base_sim.sparsity])]
        for s in sparsities:
            validate_sim_config(model, SimConfig(sparsity=s, seed=0))
        opts, gamma0, z0 = build_em_options(cfg)
        theta0 = build_theta0(model, gamma0, z0)
        diag_kwargs = _diagnostics_kwargs(cfg)
        out = _prepare_out(args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))

    out.mkdir(parents=True, exist_ok=True)
    payloads = []
    cell = 0
    for cell_seed in seeds:
        for variance in variances:
            for sparsity in sparsities:
                payloads.append({
                    "key": {
                        "cell": cell, "seed": cell_seed,
                        "input_variance": variance, "sparsity": sparsity,
                    },
                    "model": io._model_to_dict(model),
                    "seed": cell_seed,
                    "input_variance": variance,
                    "sparsity": sparsity,
                    "em_options": {
                        "max_iters": opts.max_iters, "tol_rel_L": opts.tol_rel_L,
                        "tol_gamma": opts.tol_gamma, "gamma_floor": opts.gamma_floor,
                        "record_Q": opts.record_Q,
                    },
                    "gamma0": theta0.gamma.tolist(),
                    "z0": [int(v) for v in theta0.z],
                    "diag_kwargs": diag_kwargs,
                    "out": str(out / "cells" / f"cell_{cell:04d}"),
                })
                cell += 1

    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    try:
        if jobs <= 1:
            rows = [_sweep_cell(p) for p in payloads]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(_sweep_cell, payloads))
    except OSError as exc:
        return _fail(EXIT_IO, f"sweep failed: {exc}")

    failures = [row for row in rows if "error" in row]
    if failures:
        return _fail(EXIT_NUMERICAL, f"{len(failures)} sweep cell(s) failed: {failures[0]}")

    lines = [",".join(SUMMARY_COLUMNS)]
    for row in sorted(rows, key=lambda r: r["cell"]):
        lines.append(",".join([
            str(row["cell"]), str(row["seed"]),
            io.format_float(row["input_variance"]), str(row["sparsity"]),
            io.format_float(row["final_L"]), str(row["iterations"]),
            row["termination"], io.format_float(row["nmse"]),
            io.format_float(row["z_accuracy"]), str(row["diagnostics_pass"]).lower(),
        ]))
    try:
        (out / "summary.csv").write_text("\n".join(lines) + "\n")
        shutil.copyfile(args.config, out / "config.toml")
        _write_versions(out)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write sweep outputs: {exc}")
    print(out / "summary.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sblds",
        description="Sparse Bayesian state estimation with bursty missing data: "
                    "simulate, run EM, diagnose convergence, compare against oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, type=Path, help="TOML config path")
            p.add_argument("--out", type=Path, default=None, help="output directory")
            p.add_argument("--seed", type=int, default=None, help="override the global seed")

    p_sim = sub.add_parser("simulate", help="draw a dataset and write it to disk")
    add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_run = sub.add_parser("run", help="run EM on a dataset (loaded or simulated inline)")
    add_common(p_run)
    p_run.add_argument("--debug-dumps", action="store_true",
                       help="also dump the dense stacked covariance as CSV")
    p_run.set_defaults(func=cmd_run)

    p_diag = sub.add_parser("diagnose", help="run the convergence check suite on a run directory")
    p_diag.add_argument("run_dir", type=Path)
    p_diag.set_defaults(func=cmd_diagnose)

    p_oracle = sub.add_parser("oracle", help="brute-force comparisons for a run directory (K <= 12)")
    p_oracle.add_argument("run_dir", type=Path)
    p_oracle.add_argument("--debug-dumps", action="store_true",
                          help="also dump the per-mask objective/likelihood table")
    p_oracle.set_defaults(func=cmd_oracle)

    p_sweep = sub.add_parser("sweep", help="run a seed/SNR/sparsity sweep")
    add_common(p_sweep)
    p_sweep.add_argument("--jobs", type=int, default=None,
                         help="worker processes (default: CPU count)")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
