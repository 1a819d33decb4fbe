"""Grid the operating box and reference set, label every point with the solver, persist the result."""

from __future__ import annotations

import csv
import io
import json
import multiprocessing
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import SystemModel, linearize, steady_state
from .exceptions import DatasetDegenerateError, FormatError
from .solver import STATUSES, SolverConfig, _solve_linearized

__all__ = [
    "GridSpec",
    "TrainingDataset",
    "generate_grid",
    "build_dataset",
    "save",
    "load",
    "save_csv",
    "load_csv",
    "split",
    "pack_symmetric",
    "unpack_symmetric",
]

MAGIC = b"LYDS"
SCHEMA_VERSION = 1
MAX_POINTS = 10**8


def pack_symmetric(P: np.ndarray) -> np.ndarray:
    """Upper-triangular entries of ``P`` (or a stack of them) in row-major order."""
    P = np.asarray(P)
    n = P.shape[-1]
    i, j = np.triu_indices(n)
    return P[..., i, j]


def unpack_symmetric(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=float)
    i, j = np.triu_indices(n)
    out = np.zeros(packed.shape[:-1] + (n, n))
    out[..., i, j] = packed
    out[..., j, i] = packed
    return out


def packed_size(n: int) -> int:
    return n * (n + 1) // 2


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid: ``lower + k * step`` per axis.

    ``inclusive`` keeps the upper bound when it falls on the lattice;
    ``exclusive-upper`` drops it.
    """

    lower: tuple
    upper: tuple
    step: tuple
    endpoint_mode: str = "inclusive"

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        step = np.atleast_1d(np.asarray(self.step, dtype=float))
        if step.size == 1 and len(lower) > 1:
            step = np.repeat(step, len(lower))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "step", tuple(float(v) for v in step))
        if not (len(self.lower) == len(self.upper) == len(self.step)):
            raise ValueError("lower, upper and step must have the same length")
        if self.endpoint_mode not in ("inclusive", "exclusive-upper"):
            raise ValueError(f"unknown endpoint_mode {self.endpoint_mode!r}")
        for lo, hi, st in zip(self.lower, self.upper, self.step):
            if not st > 0:
                raise ValueError("grid step must be > 0")
            if hi < lo:
                raise ValueError("grid upper bound must not be below the lower bound")

    @classmethod
    def singleton(cls, value) -> "GridSpec":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(tuple(v), tuple(v), (1.0,) * v.size)

    @property
    def ndim(self) -> int:
        return len(self.lower)

    def counts(self) -> tuple:
        out = []
        for lo, hi, st in zip(self.lower, self.upper, self.step):
            span = (hi - lo) / st
            k = int(np.floor(span + 1e-9))
            if self.endpoint_mode == "exclusive-upper" and abs(span - round(span)) < 1e-9 and k > 0:
                k -= 1
            out.append(k + 1)
        return tuple(out)

    def size(self) -> int:
        return int(np.prod(self.counts(), dtype=np.int64))

    def axes(self) -> list:
        return [lo + st * np.arange(k) for lo, st, k in zip(self.lower, self.step, self.counts())]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "step": list(self.step),
            "endpoint_mode": self.endpoint_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        return cls(**data)


def generate_grid(xs: GridSpec, rs: GridSpec) -> np.ndarray:
    """Row-major Cartesian product of the two grids, one ``[x, r]`` row per point."""
    total = xs.size() * rs.size()
    if total > MAX_POINTS:
        raise ValueError(f"grid has {total} points; the limit is {MAX_POINTS}")
    xp = xs.points()
    rp = rs.points()
    return np.hstack([np.repeat(xp, len(rp), axis=0), np.tile(rp, (len(xp), 1))])


@dataclass(eq=False)
class TrainingDataset:
    """Labelled samples ``(x, r, u, P)`` stored column-wise, in grid order."""

    x: np.ndarray
    r: np.ndarray
    u: np.ndarray
    P: np.ndarray  # packed upper triangle
    status: np.ndarray  # index into STATUSES
    cost: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def P_matrices(self) -> np.ndarray:
        return unpack_symmetric(self.P, self.n)

    def features(self) -> np.ndarray:
        return np.hstack([self.x, self.r])

    def targets(self) -> np.ndarray:
        return np.hstack([self.u, self.P])

    def subset(self, idx) -> "TrainingDataset":
        idx = np.asarray(idx)
        return TrainingDataset(
            self.x[idx], self.r[idx], self.u[idx], self.P[idx], self.status[idx], self.cost[idx],
            dict(self.metadata),
        )

    def equals(self, other: "TrainingDataset") -> bool:
        arrays = ("x", "r", "u", "P", "status", "cost")
        return all(
            getattr(self, a).shape == getattr(other, a).shape
            and getattr(self, a).tobytes() == getattr(other, a).tobytes()
            for a in arrays
        ) and _canonical(self.metadata) == _canonical(other.metadata)

    @classmethod
    def empty(cls, n: int, m: int, p: int, metadata: Optional[dict] = None) -> "TrainingDataset":
        k = packed_size(n)
        return cls(
            np.zeros((0, n)), np.zeros((0, m)), np.zeros((0, p)), np.zeros((0, k)),
            np.zeros(0, dtype=np.uint8), np.zeros(0), dict(metadata or {}),
        )


def _canonical(meta: dict) -> str:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"))


# -- labelling ---------------------------------------------------------------

_WORKER_STATE: dict = {}


def _label_range(bounds):
    model, cfg, points = _WORKER_STATE["model"], _WORKER_STATE["cfg"], _WORKER_STATE["points"]
    lo, hi = bounds
    return [_label_point(model, cfg, row) for row in points[lo:hi]]


def _label_point(model: SystemModel, cfg: SolverConfig, row: np.ndarray):
    x, r = row[: model.n], row[model.n :]
    try:
        ss = steady_state(model, r)
        lin = linearize(model, x)
        sol = _solve_linearized(lin.A, lin.B, x, ss.x_bar, ss.u_bar, cfg)
    except Exception:  # noqa: BLE001 - any per-point failure counts as a dropped sample
        return None
    if not sol.feasible:
        return None
    return sol.u_star, pack_symmetric(sol.P_star.P), STATUSES.index(sol.status), sol.cost


def build_dataset(
    model: SystemModel,
    points: np.ndarray,
    cfg: SolverConfig,
    workers: int = 1,
    max_failure_fraction: float = 0.05,
    metadata: Optional[dict] = None,
) -> TrainingDataset:
    """Label every ``[x, r]`` row of ``points`` by solving the joint problem.

    Infeasible or failed points are dropped and counted. The output keeps the
    input order for any ``workers`` count.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a non-empty 2-D array")
    if points.shape[1] != model.n + model.m:
        raise ValueError(f"points must have {model.n + model.m} columns")

    if workers > 1 and len(points) > 1:
        _WORKER_STATE.update(model=model, cfg=cfg, points=points)
        chunk = max(1, len(points) // (workers * 8))
        bounds = [(i, min(i + chunk, len(points))) for i in range(0, len(points), chunk)]
        try:
            with multiprocessing.get_context("fork").Pool(workers) as pool:
                labels = [lab for part in pool.map(_label_range, bounds) for lab in part]
        finally:
            _WORKER_STATE.clear()
    else:
        labels = [_label_point(model, cfg, row) for row in points]

    keep = [i for i, lab in enumerate(labels) if lab is not None]
    failures = len(labels) - len(keep)
    if failures > max_failure_fraction * len(labels):
        raise DatasetDegenerateError(failures, len(labels))

    meta = {
        "model": model.name,
        "model_params": model.params,
        "solver_config": cfg.to_dict(),
        "solver_config_hash": cfg.config_hash(),
        "eps_P": cfg.eps_P,
        "point_count": len(labels),
        "failure_count": failures,
    }
    meta.update(metadata or {})
    if not keep:
        return TrainingDataset.empty(model.n, model.m, model.p, meta)
    n = model.n
    return TrainingDataset(
        x=points[keep, :n].copy(),
        r=points[keep, n:].copy(),
        u=np.array([labels[i][0] for i in keep]),
        P=np.array([labels[i][1] for i in keep]),
        status=np.array([labels[i][2] for i in keep], dtype=np.uint8),
        cost=np.array([labels[i][3] for i in keep], dtype=float),
        metadata=meta,
    )


# -- persistence -------------------------------------------------------------


def _verify_floor(ds: TrainingDataset) -> None:
    eps = ds.metadata.get("eps_P")
    if eps is None or len(ds) == 0:
        return
    lam = np.linalg.eigvalsh(ds.P_matrices)[:, 0]
    if np.any(lam < eps * (1 - 1e-9) - 1e-15):
        bad = int(np.argmin(lam))
        raise FormatError(f"sample {bad} has lambda_min(P) = {lam[bad]:.3e} below eps_P = {eps}")


def save(dataset: TrainingDataset, path) -> None:
    """Binary format: magic, schema version byte, JSON header, little-endian float64 columns."""
    header = {
        "n": dataset.x.shape[1],
        "m": dataset.r.shape[1],
        "p": dataset.u.shape[1],
        "count": len(dataset),
        "metadata": dataset.metadata,
    }
    blob = _canonical(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", SCHEMA_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (dataset.x, dataset.r, dataset.u, dataset.P, dataset.cost):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.status, dtype=np.uint8).tobytes())


def load(path) -> TrainingDataset:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    version = data[4]
    if version != SCHEMA_VERSION:
        raise FormatError(f"{path}: expected schema version {SCHEMA_VERSION}, found {version}")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9 : 9 + hlen])
    n, m, p, count = header["n"], header["m"], header["p"], header["count"]
    k = packed_size(n)
    offset = 9 + hlen
    arrays = []
    for width in (n, m, p, k, None):
        size = count * (width or 1)
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset).astype(float)
        arrays.append(arr.reshape(count, width) if width else arr)
        offset += 8 * size
    status = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).copy()
    if offset + count != len(data):
        raise FormatError(f"{path}: trailing or missing bytes")
    ds = TrainingDataset(*arrays[:4], status=status, cost=arrays[4], metadata=header["metadata"])
    _verify_floor(ds)
    return ds


def csv_header(n: int, m: int, p: int) -> list:
    i, j = np.triu_indices(n)
    return (
        [f"x{a + 1}" for a in range(n)]
        + [f"r{a + 1}" for a in range(m)]
        + [f"u{a + 1}" for a in range(p)]
        + [f"P{a + 1}{b + 1}" for a, b in zip(i, j)]
        + ["cost", "status"]
    )


def save_csv(dataset: TrainingDataset, path) -> None:
    """CSV interchange: one header row, then one row per sample; floats written with ``repr``."""
    n, m, p = dataset.x.shape[1], dataset.r.shape[1], dataset.u.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(n, m, p))
    for row, cost, st in zip(np.hstack([dataset.x, dataset.r, dataset.u, dataset.P]), dataset.cost, dataset.status):
        writer.writerow([repr(float(v)) for v in row] + [repr(float(cost)), STATUSES[st]])
    Path(path).write_text(buf.getvalue())


def load_csv(path, metadata: Optional[dict] = None) -> TrainingDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = rows[0]
    n = sum(bool(re.fullmatch(r"x\d+", h)) for h in header)
    m = sum(bool(re.fullmatch(r"r\d+", h)) for h in header)
    p = sum(bool(re.fullmatch(r"u\d+", h)) for h in header)
    if header != csv_header(n, m, p):
        raise FormatError(f"{path}: unexpected header {header}")
    k = packed_size(n)
    body = rows[1:]
    if not body:
        return TrainingDataset.empty(n, m, p, metadata)
    values = np.array([[float(v) for v in row[:-1]] for row in body])
    status = np.array([STATUSES.index(row[-1]) for row in body], dtype=np.uint8)
    cols = np.cumsum([0, n, m, p, k])
    ds = TrainingDataset(
        values[:, cols[0] : cols[1]], values[:, cols[1] : cols[2]], values[:, cols[2] : cols[3]],
        values[:, cols[3] : cols[4]], status, values[:, -1], dict(metadata or {}),
    )
    _verify_floor(ds)
    return ds


def split(dataset: TrainingDataset, val_fraction: float, seed: int = 0) -> tuple:
    """Seeded split without replacement; each part keeps grid order."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)
