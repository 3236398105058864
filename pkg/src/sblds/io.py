"""On-disk formats for datasets, traces, and reports.

CSV numbers are written as shortest round-trip decimals, so re-reading a
file reproduces the exact doubles and identical runs produce identical
bytes (wall-time columns are the one documented exception).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .diagnostics import DiagnosticsReport
from .em import EMTrace, IterationRecord
from .model import Dataset, SystemModel, Theta

TRACE_COLUMNS = (
    "iter", "L", "Q_next", "Q_self", "grad_inf_norm",
    "gamma_change", "z_hamming_change", "wall_ms",
)


def format_float(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path: Path, M: np.ndarray) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [",".join(format_float(v) for v in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path: Path) -> np.ndarray:
    rows = [
        [float(tok) for tok in line.split(",")]
        for line in Path(path).read_text().strip().splitlines()
    ]
    return np.array(rows, dtype=float)


def _model_to_dict(model: SystemModel) -> dict:
    return {
        "D": np.asarray(model.D, dtype=float).tolist(),
        "A": np.asarray(model.A, dtype=float).tolist(),
        "sigma2": float(model.sigma2),
        "p0": float(model.p0),
        "p1": float(model.p1),
        "pi1": float(model.pi1),
        "n": model.n,
        "m": model.m,
        "K": int(model.K),
    }


def model_from_dict(d: dict) -> SystemModel:
    return SystemModel(
        D=np.array(d["D"], dtype=float),
        A=np.array(d["A"], dtype=float),
        sigma2=float(d["sigma2"]),
        p0=float(d["p0"]),
        p1=float(d["p1"]),
        K=int(d["K"]),
        pi1=float(d["pi1"]),
    )


def write_dataset(
    dirpath: Path,
    model: SystemModel,
    dataset: Dataset,
    sim_fields: dict | None = None,
) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    payload = {"model": _model_to_dict(model)}
    if sim_fields is not None:
        payload["sim"] = sim_fields
    (dirpath / "model.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_matrix_csv(dirpath / "Y.csv", dataset.Y)
    write_matrix_csv(dirpath / "X.csv", dataset.X)
    write_matrix_csv(dirpath / "U.csv", dataset.U)
    (dirpath / "zstar.csv").write_text(
        ",".join(str(int(v)) for v in dataset.zstar) + "\n"
    )


def read_dataset(dirpath: Path) -> tuple[SystemModel, Dataset, dict | None]:
    dirpath = Path(dirpath)
    payload = json.loads((dirpath / "model.json").read_text())
    model = model_from_dict(payload["model"])
    zstar = np.array(
        [int(tok) for tok in (dirpath / "zstar.csv").read_text().strip().split(",")],
        dtype=np.int64,
    )
    sim = payload.get("sim")
    dataset = Dataset(
        X=read_matrix_csv(dirpath / "X.csv"),
        U=read_matrix_csv(dirpath / "U.csv"),
        zstar=zstar,
        Y=read_matrix_csv(dirpath / "Y.csv"),
        seed=sim.get("seed") if sim else None,
    )
    return model, dataset, sim


def write_trace(path: Path, trace: EMTrace) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    for rec in trace.records:
        lines.append(",".join([
            str(rec.iteration),
            format_float(rec.L),
            "" if rec.Q_next is None else format_float(rec.Q_next),
            "" if rec.Q_self is None else format_float(rec.Q_self),
            format_float(rec.grad_inf_norm),
            format_float(rec.gamma_change),
            str(rec.z_hamming_change),
            format_float(rec.wall_ms),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace_records(path: Path) -> list[IterationRecord]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != ",".join(TRACE_COLUMNS):
        raise ValueError(f"{path}: unrecognized trace header")
    records = []
    for line in lines[1:]:
        toks = line.split(",")
        records.append(IterationRecord(
            iteration=int(toks[0]),
            L=float(toks[1]),
            Q_next=None if toks[2] == "" else float(toks[2]),
            Q_self=None if toks[3] == "" else float(toks[3]),
            grad_inf_norm=float(toks[4]),
            gamma_change=float(toks[5]),
            z_hamming_change=int(toks[6]),
            wall_ms=float(toks[7]),
        ))
    return records


def write_theta_final(path: Path, theta: Theta, termination: str) -> None:
    payload = {
        "gamma": np.asarray(theta.gamma, dtype=float).tolist(),
        "z": [int(v) for v in theta.z],
        "termination": termination,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_theta_final(path: Path) -> tuple[Theta, str]:
    payload = json.loads(Path(path).read_text())
    theta = Theta(
        gamma=np.array(payload["gamma"], dtype=float),
        z=np.array(payload["z"], dtype=np.int64),
    )
    return theta, payload["termination"]


def write_diagnostics(path: Path, report: DiagnosticsReport) -> None:
    records = [
        {
            "name": c.name,
            "pass": bool(c.passed),
            "value": float(c.value),
            "threshold": float(c.threshold),
            "witness": c.witness if c.witness is not None else c.note,
        }
        for c in report.checks
    ]
    Path(path).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
