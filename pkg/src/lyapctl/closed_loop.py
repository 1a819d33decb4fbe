"""Closed-loop simulation of a plant under any controller exposing ``control(x, r) -> (u, P or None)``."""

from __future__ import annotations

import csv
import io
import json
import multiprocessing
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._validation import as_vector
from .dynamics import SystemModel, step, steady_state
from .exceptions import DivergenceError, NumericOverflowError

__all__ = [
    "SimConfig",
    "SimulationTrace",
    "BatchStats",
    "simulate",
    "performance_index",
    "batch_experiments",
    "timing_report",
    "write_trace_csv",
    "write_trace_jsonl",
]


@dataclass(frozen=True)
class SimConfig:
    x0: tuple
    r: tuple = (0.0,)
    steps: int = 100
    record_P: bool = True
    safety_scale: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        object.__setattr__(self, "r", tuple(float(v) for v in np.atleast_1d(self.r)))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.safety_scale >= 1:
            raise ValueError("safety_scale must be >= 1")


@dataclass(eq=False)
class SimulationTrace:
    """States ``x(0..T)``, inputs ``u(0..T-1)`` and the Lyapunov diagnostics.

    ``P_source`` is ``"controller"`` when the P-sequence came from the
    controller and ``"identity"`` when ``P = I`` was substituted.
    """

    states: np.ndarray
    inputs: np.ndarray
    P: Optional[np.ndarray]
    V: np.ndarray
    dV: np.ndarray
    step_time: np.ndarray  # seconds per controller call
    x_bar: np.ndarray
    P_source: str

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def terminal_error(self) -> float:
        return float(np.linalg.norm(self.states[-1] - self.x_bar))

    @property
    def pi(self) -> float:
        return performance_index(self)

    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.states - self.x_bar, axis=1)


def performance_index(trace) -> float:
    """Sum of ``||x(t)||_2`` over every recorded state."""
    states = trace.states if isinstance(trace, SimulationTrace) else np.asarray(trace, dtype=float)
    if len(states) == 0:
        raise ValueError("trace is empty")
    return float(np.linalg.norm(states, axis=1).sum())


def _V(x, x_bar, P):
    e = x - x_bar
    return float(np.sqrt(abs(e @ P @ e)))


def simulate(model: SystemModel, controller, cfg: SimConfig) -> SimulationTrace:
    """Run ``x(t+1) = f(x) + g(x) u`` for ``cfg.steps`` steps with ``u`` from ``controller``.

    Raises :class:`DivergenceError` once the state leaves the operating box
    dilated by ``cfg.safety_scale`` about its center.
    """
    x = as_vector(cfg.x0, model.n, "x0")
    r = as_vector(cfg.r, model.m, "r")
    if not model.contains(x):
        raise ValueError(f"x0 = {x} lies outside the operating box")
    x_bar = steady_state(model, r).x_bar

    T = cfg.steps
    states = np.empty((T + 1, model.n))
    inputs = np.empty((T, model.p))
    Ps = np.empty((T + 1, model.n, model.n))
    times = np.empty(T)
    states[0] = x
    P_source = "controller"
    for t in range(T + 1):
        t0 = time.perf_counter()
        u, P = controller.control(x, r)
        elapsed = time.perf_counter() - t0
        if P is None:
            P_source = "identity"
            P = np.eye(model.n)
        Ps[t] = P
        if t == T:
            break
        times[t] = elapsed
        inputs[t] = u
        try:
            x = step(model, x, u)
        except NumericOverflowError as exc:
            raise DivergenceError(t + 1, exc.state) from None
        if not model.contains(x, cfg.safety_scale):
            raise DivergenceError(t + 1, x)
        states[t + 1] = x

    V = np.array([_V(states[t], x_bar, Ps[t]) for t in range(T + 1)])
    return SimulationTrace(
        states=states,
        inputs=inputs,
        P=Ps if cfg.record_P else None,
        V=V,
        dV=np.diff(V),
        step_time=times,
        x_bar=x_bar,
        P_source=P_source,
    )


@dataclass
class BatchStats:
    name: str
    pis: np.ndarray  # NaN where the run diverged
    step_times: np.ndarray  # mean controller time per run, NaN where diverged

    @property
    def diverged(self) -> int:
        return int(np.isnan(self.pis).sum())

    @property
    def mean_pi(self) -> float:
        ok = self.pis[~np.isnan(self.pis)]
        return float(ok.mean()) if ok.size else float("nan")

    @property
    def min_pi(self) -> float:
        ok = self.pis[~np.isnan(self.pis)]
        return float(ok.min()) if ok.size else float("nan")

    @property
    def max_pi(self) -> float:
        ok = self.pis[~np.isnan(self.pis)]
        return float(ok.max()) if ok.size else float("nan")

    @property
    def mean_step_time(self) -> float:
        ok = self.step_times[~np.isnan(self.step_times)]
        return float(ok.mean()) if ok.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "controller": self.name,
            "runs": int(self.pis.size),
            "diverged": self.diverged,
            "mean_pi": self.mean_pi,
            "min_pi": self.min_pi,
            "max_pi": self.max_pi,
            "mean_step_ms": 1e3 * self.mean_step_time,
        }


_BATCH_STATE: dict = {}


def _run_one(args):
    name, i = args
    model, controllers, draws, r, steps = (
        _BATCH_STATE[k] for k in ("model", "controllers", "draws", "r", "steps")
    )
    cfg = SimConfig(tuple(draws[i]), tuple(r), steps, record_P=False)
    try:
        tr = simulate(model, controllers[name], cfg)
    except DivergenceError:
        return name, i, float("nan"), float("nan")
    return name, i, tr.pi, float(tr.step_time.mean())


def batch_experiments(
    model: SystemModel,
    controllers: dict,
    count: int,
    init_box: tuple,
    seed: int = 0,
    r=0.0,
    steps: int = 100,
    workers: int = 1,
) -> dict:
    """Simulate every controller from the same ``count`` seeded uniform draws in ``init_box``.

    Returns ``{name: BatchStats}``. Diverged runs are kept as NaN and counted.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lower = as_vector(init_box[0], model.n, "init_box lower")
    upper = as_vector(init_box[1], model.n, "init_box upper")
    draws = np.random.default_rng(seed).uniform(lower, upper, size=(count, model.n))
    r = as_vector(r, model.m, "r")
    jobs = [(name, i) for name in controllers for i in range(count)]
    _BATCH_STATE.update(model=model, controllers=controllers, draws=draws, r=r, steps=steps)
    try:
        if workers > 1:
            with multiprocessing.get_context("fork").Pool(workers) as pool:
                results = pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (8 * workers)))
        else:
            results = [_run_one(job) for job in jobs]
    finally:
        _BATCH_STATE.clear()
    out = {name: BatchStats(name, np.full(count, np.nan), np.full(count, np.nan)) for name in controllers}
    for name, i, pi, st in results:
        out[name].pis[i] = pi
        out[name].step_times[i] = st
    return out


def timing_report(batch: dict, slow: str, fast: str) -> float:
    """Ratio of mean per-step controller time, ``slow / fast``."""
    return batch[slow].mean_step_time / batch[fast].mean_step_time


# -- trace output ------------------------------------------------------------


def _trace_rows(trace: SimulationTrace):
    n, p = trace.states.shape[1], trace.inputs.shape[1]
    header = ["t", *[f"x{i + 1}" for i in range(n)], *[f"u{i + 1}" for i in range(p)], "V", "dV", "solve_ms"]
    rows = []
    for t in range(trace.steps + 1):
        last = t == trace.steps
        u = [""] * p if last else [repr(float(v)) for v in trace.inputs[t]]
        rows.append(
            [str(t), *[repr(float(v)) for v in trace.states[t]], *u, repr(float(trace.V[t])),
             "" if last else repr(float(trace.dV[t])),
             "" if last else repr(1e3 * float(trace.step_time[t]))]
        )
    return header, rows


def write_trace_csv(trace: SimulationTrace, path) -> None:
    """One row per step: ``t, x..., u..., V, dV, solve_ms``; the final row carries only the state."""
    header, rows = _trace_rows(trace)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def write_trace_jsonl(trace: SimulationTrace, path) -> None:
    lines = []
    for t in range(trace.steps + 1):
        rec = {"t": t, "x": trace.states[t].tolist(), "V": float(trace.V[t])}
        if t < trace.steps:
            rec.update(u=trace.inputs[t].tolist(), dV=float(trace.dV[t]), solve_ms=1e3 * float(trace.step_time[t]))
        if trace.P is not None:
            rec["P"] = trace.P[t].tolist()
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")
