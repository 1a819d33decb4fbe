"""Tracking-error bounds and sampled region-of-attraction estimates."""

from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._validation import as_vector
from .dataset import GridSpec
from .dynamics import ModelConstants, SystemModel, step_batch, steady_state
from .exceptions import BoundUndefinedError, FormatError

__all__ = [
    "sigma",
    "theta_min",
    "vartheta",
    "BoundReport",
    "bound_report",
    "eigen_extremes",
    "RoaGrid",
    "cell_grid",
    "estimate_roa",
    "is_member",
    "roa_reference_partition",
    "partition_steady_states",
    "jaccard",
    "save_bitmap",
    "load_bitmap",
    "write_bitmap_csv",
]

BITMAP_MAGIC = b"LYRA"
BITMAP_VERSION = 1
CHUNK = 4096  # fixed batch size keeps results independent of the worker count


def sigma(lambda_bar_P: float, delta: float, theta: float) -> float:
    """Ultimate bound on ``||x - x_bar||`` with the optimizer in the loop."""
    if not theta > 0:
        raise ValueError("theta must be > 0")
    return 3.0 * math.sqrt(lambda_bar_P) * delta / theta


def theta_min(dP_bar: float, lambda_bar_P: float, lambda_underbar_P: float, mu_g: float, du_bar: float) -> float:
    """Smallest decrease margin for which the network-in-the-loop bound exists."""
    if not lambda_underbar_P > 0:
        raise ValueError("lambda_underbar_P must be > 0")
    s_dP = math.sqrt(dP_bar)
    s_lb = math.sqrt(lambda_bar_P)
    return s_dP + s_dP * s_lb / math.sqrt(lambda_underbar_P) + (s_lb + s_dP) * mu_g * du_bar


def vartheta(
    delta: float,
    lambda_bar_P: float,
    lambda_underbar_P: float,
    mu_g: float,
    du_bar: float,
    dP_bar: float,
    theta: float,
    g_at_xbar_norm: float,
) -> float:
    """Ultimate bound on ``||x - x_bar||`` with the network in the loop.

    Raises :class:`BoundUndefinedError` when ``theta <= theta_min``.
    """
    denom = theta - theta_min(dP_bar, lambda_bar_P, lambda_underbar_P, mu_g, du_bar)
    if not denom > 0:
        raise BoundUndefinedError(
            f"theta = {theta} does not exceed theta_min = {theta - denom:.6g}; the bound is undefined"
        )
    s_dP = math.sqrt(dP_bar)
    s_lb = math.sqrt(lambda_bar_P)
    numer = 3.0 * s_lb * delta + s_dP * delta + (s_lb + s_dP) * g_at_xbar_norm * du_bar
    return numer / denom


def eigen_extremes(P_sets) -> tuple:
    """``(max lambda_max, min lambda_min)`` over every symmetric matrix in the given stacks."""
    hi, lo = -np.inf, np.inf
    for P in P_sets:
        P = np.asarray(P, dtype=float)
        if P.size == 0:
            continue
        lam = np.linalg.eigvalsh(P.reshape(-1, P.shape[-1], P.shape[-1]))
        hi = max(hi, float(lam[:, -1].max()))
        lo = min(lo, float(lam[:, 0].min()))
    if not np.isfinite(hi):
        raise ValueError("no matrices supplied")
    return hi, lo


@dataclass
class BoundReport:
    """Constants and bounds; every supremum/infimum here is a sample-based estimate."""

    delta: float
    mu_f: float
    mu_g: float
    lambda_bar_P: float
    lambda_underbar_P: float
    du_bar: float
    dP_bar: float
    theta: float
    g_at_xbar_norm: float
    sigma: float
    theta_min: float
    vartheta: Optional[float]  # None when theta <= theta_min

    @property
    def vartheta_defined(self) -> bool:
        return self.vartheta is not None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimates"] = "sample-based (delta, mu_f, mu_g, lambda bounds, du_bar, dP_bar)"
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def bound_report(
    constants: ModelConstants,
    P_sets,
    theta: float,
    g_at_xbar_norm: float,
    du_bar: float = 0.0,
    dP_bar: float = 0.0,
) -> BoundReport:
    """Assemble a :class:`BoundReport` from model constants, P-labels/trajectories and the imitation gap."""
    lam_hi, lam_lo = eigen_extremes(P_sets)
    tmin = theta_min(dP_bar, lam_hi, lam_lo, constants.mu_g, du_bar)
    try:
        vt = vartheta(constants.delta, lam_hi, lam_lo, constants.mu_g, du_bar, dP_bar, theta, g_at_xbar_norm)
    except BoundUndefinedError:
        vt = None
    return BoundReport(
        delta=constants.delta,
        mu_f=constants.mu_f,
        mu_g=constants.mu_g,
        lambda_bar_P=lam_hi,
        lambda_underbar_P=lam_lo,
        du_bar=du_bar,
        dP_bar=dP_bar,
        theta=theta,
        g_at_xbar_norm=g_at_xbar_norm,
        sigma=sigma(lam_hi, constants.delta, theta),
        theta_min=tmin,
        vartheta=vt,
    )


# -- region of attraction ----------------------------------------------------


def cell_grid(lower, upper, counts) -> GridSpec:
    """Centers of a regular ``counts``-cell partition of the box ``[lower, upper]``."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    counts = np.broadcast_to(np.atleast_1d(counts), lower.shape).astype(int)
    width = (upper - lower) / counts
    start = lower + width / 2
    return GridSpec(tuple(start), tuple(start + width * (counts - 1)), tuple(width))


@dataclass(eq=False)
class RoaGrid:
    """Membership of each grid point (grid order) in the estimated region of attraction."""

    region: GridSpec
    membership: np.ndarray  # bool
    exit_step: np.ndarray  # first step outside the box, -1 if never
    r: np.ndarray
    horizon: int
    convergence_radius: float
    controller: str

    @property
    def fraction_inside(self) -> float:
        return float(self.membership.mean())

    def cell_index(self, x) -> int:
        """Flat index of the grid point nearest to ``x``."""
        x = np.asarray(x, dtype=float)
        idx = []
        for lo, st, k, xi in zip(self.region.lower, self.region.step, self.region.counts(), x):
            idx.append(int(np.clip(np.round((xi - lo) / st), 0, k - 1)))
        return int(np.ravel_multi_index(idx, self.region.counts()))

    def contains(self, x) -> bool:
        return bool(self.membership[self.cell_index(x)])


def _batch_inputs(controller, X, r):
    if hasattr(controller, "control_batch"):
        return np.asarray(controller.control_batch(X, r), dtype=float)
    return np.array([np.atleast_1d(controller.control(x, r)[0]) for x in X], dtype=float)


def _roll_out(model, controller, X0, r, x_bar, horizon, radius):
    N = len(X0)
    X = X0.copy()
    alive = np.ones(N, dtype=bool)
    entered = np.linalg.norm(X - x_bar, axis=1) <= radius
    exit_step = np.full(N, -1, dtype=np.int64)
    for k in range(1, horizon + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            U = _batch_inputs(controller, X[idx], r)
        X[idx] = step_batch(model, X[idx], U)
        inside = np.all((X[idx] >= model.lower) & (X[idx] <= model.upper), axis=1)
        left = idx[~inside]
        exit_step[left] = k
        alive[left] = False
        ok = idx[inside]
        entered[ok] |= np.linalg.norm(X[ok] - x_bar, axis=1) <= radius
    return alive & entered, exit_step


_ROA_STATE: dict = {}


def _roa_chunk(bounds):
    s = _ROA_STATE
    lo, hi = bounds
    return _roll_out(s["model"], s["controller"], s["points"][lo:hi], s["r"], s["x_bar"], s["horizon"], s["radius"])


def estimate_roa(
    model: SystemModel,
    controller,
    r,
    grid: GridSpec,
    horizon: int = 500,
    convergence_radius: float = 1e-2,
    workers: int = 1,
    controller_name: str = "",
) -> RoaGrid:
    """Mark a grid point inside when its closed-loop trajectory stays in the
    operating box for ``horizon`` steps and comes within ``convergence_radius``
    of the steady state.

    Controllers exposing ``control_batch(X, r)`` are stepped in batches.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    r = as_vector(r, model.m, "r")
    x_bar = steady_state(model, r).x_bar
    points = grid.points()
    if points.shape[1] != model.n:
        raise ValueError("grid dimension does not match the state dimension")
    bounds = [(i, min(i + CHUNK, len(points))) for i in range(0, len(points), CHUNK)]
    _ROA_STATE.update(
        model=model, controller=controller, points=points, r=r, x_bar=x_bar, horizon=horizon,
        radius=convergence_radius,
    )
    try:
        if workers > 1 and len(bounds) > 1:
            with multiprocessing.get_context("fork").Pool(workers) as pool:
                parts = pool.map(_roa_chunk, bounds)
        else:
            parts = [_roa_chunk(b) for b in bounds]
    finally:
        _ROA_STATE.clear()
    membership = np.concatenate([p[0] for p in parts])
    exit_step = np.concatenate([p[1] for p in parts])
    return RoaGrid(
        grid, membership, exit_step, r, horizon, float(convergence_radius),
        controller_name or type(controller).__name__,
    )


def is_member(model, controller, x, r, horizon: int = 500, convergence_radius: float = 1e-2) -> bool:
    """Membership test for a single initial state, same rule as :func:`estimate_roa`."""
    r = as_vector(r, model.m, "r")
    x = as_vector(x, model.n, "x")
    if not model.contains(x):
        return False
    x_bar = steady_state(model, r).x_bar
    inside, _ = _roll_out(model, controller, x[None, :], r, x_bar, horizon, convergence_radius)
    return bool(inside[0])


def roa_reference_partition(lower: float, upper: float, count: int) -> list:
    """Split the interval ``[lower, upper]`` into ``count`` equal closed sub-intervals."""
    if count < 1:
        raise ValueError("count must be >= 1")
    edges = np.linspace(lower, upper, count + 1)
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def partition_steady_states(model: SystemModel, partition: list, samples: int = 3) -> list:
    """Per sub-interval: the sampled references and their steady states."""
    out = []
    for lo, hi in partition:
        refs = np.linspace(lo, hi, samples) if samples > 1 else np.array([(lo + hi) / 2])
        states = [steady_state(model, [ref]).x_bar for ref in refs]
        out.append({"interval": (lo, hi), "references": refs, "steady_states": np.array(states)})
    return out


def jaccard(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


# -- bitmap export -----------------------------------------------------------


def _roa_header(roa: RoaGrid) -> dict:
    return {
        "grid": roa.region.to_dict(),
        "r": roa.r.tolist(),
        "horizon": roa.horizon,
        "convergence_radius": roa.convergence_radius,
        "controller": roa.controller,
        "count": int(roa.membership.size),
    }


def save_bitmap(roa: RoaGrid, path) -> None:
    """Compact binary: magic, version byte, JSON header, packed membership bits, int64 exit steps."""
    blob = json.dumps(_roa_header(roa), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(BITMAP_MAGIC + struct.pack("<BI", BITMAP_VERSION, len(blob)) + blob)
        fh.write(np.packbits(roa.membership.astype(np.uint8)).tobytes())
        fh.write(roa.exit_step.astype("<i8").tobytes())


def load_bitmap(path) -> RoaGrid:
    data = Path(path).read_bytes()
    if data[:4] != BITMAP_MAGIC:
        raise FormatError(f"{path}: not an RoA bitmap (bad magic)")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != BITMAP_VERSION:
        raise FormatError(f"{path}: expected bitmap version {BITMAP_VERSION}, found {version}")
    header = json.loads(data[9 : 9 + hlen])
    count = header["count"]
    offset = 9 + hlen
    nbytes = (count + 7) // 8
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset))[:count].astype(bool)
    exit_step = np.frombuffer(data, dtype="<i8", count=count, offset=offset + nbytes).astype(np.int64)
    return RoaGrid(
        GridSpec.from_dict(header["grid"]), bits, exit_step, np.array(header["r"]), header["horizon"],
        header["convergence_radius"], header["controller"],
    )


def write_bitmap_csv(roa: RoaGrid, path) -> None:
    """One row per grid point: coordinates then 0/1 membership."""
    pts = roa.region.points()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{i + 1}" for i in range(pts.shape[1])] + ["inside"])
    for p, m in zip(pts, roa.membership):
        writer.writerow([repr(float(v)) for v in p] + [int(m)])
    Path(path).write_text(buf.getvalue())
