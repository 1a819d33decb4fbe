"""Discrete-time affine plants ``x+ = f(x) + g(x) u`` and their local analysis.

Built-in models are available through :func:`get_model`::

    >>> model = get_model("pendulum")
    >>> step(model, [0.0, 1.0], [0.0])
    array([0.1, 1. ])
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._validation import as_vector
from .exceptions import (
    LinearizationError,
    NumericOverflowError,
    ReferenceInadmissibleError,
    StabilizabilityWarning,
)

__all__ = [
    "SystemModel",
    "LinearizedDynamics",
    "SteadyStatePair",
    "ModelConstants",
    "step",
    "step_batch",
    "linearize",
    "steady_state",
    "estimate_constants",
    "get_model",
    "available_models",
    "pendulum",
    "linearized_pendulum",
    "drone_axis",
    "drone",
    "scalar_integrator",
]


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Affine-in-control plant with an operating box.

    ``f`` maps a state to a state, ``g`` maps a state to an ``(n, p)`` input
    matrix and ``h`` maps ``(state, input)`` to the ``m`` outputs. ``lower`` and
    ``upper`` bound the operating box, ``ref_lower``/``ref_upper`` the set of
    admissible references.
    """

    name: str
    n: int
    p: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    ref_lower: np.ndarray
    ref_upper: np.ndarray
    analytic_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    analytic_steady_state: Optional[Callable[[np.ndarray], tuple]] = None
    is_linear: bool = False
    params: dict = field(default_factory=dict)
    batchable: bool = False  # f accepts an (n, N) column stack and g is state-independent

    def contains(self, x, scale: float = 1.0) -> bool:
        """Whether ``x`` lies in the operating box, optionally dilated about its center."""
        x = np.asarray(x, dtype=float)
        center = 0.5 * (self.lower + self.upper)
        half = 0.5 * (self.upper - self.lower) * scale
        return bool(np.all(np.abs(x - center) <= half + 1e-12))

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower


@dataclass(frozen=True, eq=False)
class LinearizedDynamics:
    A: np.ndarray
    B: np.ndarray
    x_ref: np.ndarray
    stabilizable: bool = True


@dataclass(frozen=True, eq=False)
class SteadyStatePair:
    x_bar: np.ndarray
    u_bar: np.ndarray
    r: np.ndarray


@dataclass(frozen=True)
class ModelConstants:
    """Sample-based estimates of the linearization-error bound and Lipschitz constants.

    These are lower estimates of the true suprema over the operating box;
    ``grid_density`` records how finely the box was sampled.
    """

    delta: float
    mu_f: float
    mu_g: float
    sample_count: int
    grid_density: int

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "mu_f": self.mu_f,
            "mu_g": self.mu_g,
            "sample_count": self.sample_count,
            "grid_density": self.grid_density,
        }


def step(model: SystemModel, x, u) -> np.ndarray:
    """One step of the plant: ``f(x) + g(x) @ u``."""
    x = as_vector(x, model.n, "x")
    u = as_vector(u, model.p, "u")
    with np.errstate(over="ignore", invalid="ignore"):  # reported below as NumericOverflowError
        x_next = model.f(x) + model.g(x) @ u
    if not np.all(np.isfinite(x_next)):
        raise NumericOverflowError(x)
    return x_next


def step_batch(model: SystemModel, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Row-wise :func:`step` for ``X`` of shape ``(N, n)``; non-finite rows are returned as-is."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float).reshape(len(X), model.p)
    with np.errstate(over="ignore", invalid="ignore"):
        if model.batchable:
            return model.f(X.T).T + U @ model.g(X[0]).T
        return np.array([model.f(x) + model.g(x) @ u for x, u in zip(X, U)]).reshape(X.shape)


def _numeric_jacobian(f, x: np.ndarray) -> np.ndarray:
    n = x.size
    jac = np.empty((n, n))
    for i in range(n):
        h = max(1e-6, 1e-6 * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (f(xp) - f(xm)) / (2.0 * h)
    return jac


def is_stabilizable(A: np.ndarray, B: np.ndarray, tol: float = 1e-9) -> bool:
    """PBH test: ``rank [lambda I - A, B] = n`` for every eigenvalue with ``|lambda| >= 1``."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - 1e-12:
            M = np.hstack([lam * np.eye(n) - A, B.astype(complex)])
            if np.linalg.matrix_rank(M, tol=tol) < n:
                return False
    return True


def linearize(model: SystemModel, x_ref) -> LinearizedDynamics:
    """Jacobian of ``f`` and value of ``g`` at ``x_ref``.

    Uses the model's analytic Jacobian when it has one, central differences
    otherwise. A :class:`StabilizabilityWarning` is emitted when the pair fails
    the PBH test; the result is still returned.
    """
    x_ref = as_vector(x_ref, model.n, "x_ref")
    try:
        with np.errstate(all="raise"):
            if model.analytic_jacobian is not None:
                A = np.asarray(model.analytic_jacobian(x_ref), dtype=float)
            else:
                A = _numeric_jacobian(model.f, x_ref)
            B = np.asarray(model.g(x_ref), dtype=float).reshape(model.n, model.p)
    except FloatingPointError as exc:
        raise LinearizationError(f"linearization of {model.name!r} failed at {x_ref}") from exc
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise LinearizationError(f"linearization of {model.name!r} failed at {x_ref}")
    stabilizable = is_stabilizable(A, B)
    if not stabilizable:
        warnings.warn(
            f"({model.name}) linearization at {x_ref} is not stabilizable",
            StabilizabilityWarning,
            stacklevel=2,
        )
    return LinearizedDynamics(A=A, B=B, x_ref=x_ref, stabilizable=stabilizable)


def _steady_residual(model: SystemModel, z: np.ndarray, r: np.ndarray) -> np.ndarray:
    x, u = z[: model.n], z[model.n :]
    return np.concatenate([x - model.f(x) - model.g(x) @ u, r - model.h(x, u)])


def steady_state(model: SystemModel, r, tol: float = 1e-9, max_iter: int = 100) -> SteadyStatePair:
    """Solve ``x = f(x) + g(x) u``, ``r = h(x, u)`` by damped Newton.

    Starts from the model's analytic solution when available, from zero
    otherwise. Raises :class:`ReferenceInadmissibleError` if the iteration does
    not converge or the steady state falls outside the operating box.
    """
    r = as_vector(r, model.m, "r")
    if model.analytic_steady_state is not None:
        x0, u0 = model.analytic_steady_state(r)
        z = np.concatenate([np.asarray(x0, float), np.asarray(u0, float)])
    else:
        z = np.zeros(model.n + model.p)

    res = _steady_residual(model, z, r)
    norm = np.linalg.norm(res)
    for _ in range(max_iter):
        if norm <= tol:
            break
        J = np.empty((res.size, z.size))
        for i in range(z.size):
            h = max(1e-7, 1e-7 * abs(z[i]))
            zp = z.copy()
            zm = z.copy()
            zp[i] += h
            zm[i] -= h
            J[:, i] = (_steady_residual(model, zp, r) - _steady_residual(model, zm, r)) / (2 * h)
        dz = np.linalg.lstsq(J, -res, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            z_new = z + t * dz
            res_new = _steady_residual(model, z_new, r)
            norm_new = np.linalg.norm(res_new)
            if np.isfinite(norm_new) and norm_new < norm:
                break
            t *= 0.5
        else:
            break
        z, res, norm = z_new, res_new, norm_new

    x_bar, u_bar = z[: model.n], z[model.n :]
    if not norm <= tol:
        raise ReferenceInadmissibleError(
            f"no steady state for r={r} on {model.name!r} (residual {norm:.3e})"
        )
    if not model.contains(x_bar):
        raise ReferenceInadmissibleError(
            f"steady state {x_bar} for r={r} lies outside the operating box of {model.name!r}"
        )
    return SteadyStatePair(x_bar=x_bar, u_bar=u_bar, r=r)


def _grid_points(lower, upper, density: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, density) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def estimate_constants(
    model: SystemModel,
    grid_density: int = 51,
    random_pairs: int = 2000,
    seed: int = 0,
) -> ModelConstants:
    """Estimate delta, mu_f and mu_g on a uniform grid over the operating box.

    ``delta`` is the largest ``||f(x) - A_x x||`` on the grid. The Lipschitz
    constants are the largest difference quotients over grid neighbours and a
    seeded sample of random point pairs.
    """
    if grid_density < 2:
        raise ValueError("grid_density must be at least 2")
    pts = _grid_points(model.lower, model.upper, grid_density)
    fx = np.array([model.f(x) for x in pts])
    gx = np.array([np.asarray(model.g(x), float).reshape(model.n, model.p) for x in pts])

    delta = 0.0
    if not model.is_linear:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StabilizabilityWarning)
            for x, fv in zip(pts, fx):
                A = linearize(model, x).A
                delta = max(delta, float(np.linalg.norm(fv - A @ x)))

    shape = (grid_density,) * model.n
    idx = np.arange(len(pts)).reshape(shape)
    pairs = []
    for axis in range(model.n):
        a = np.take(idx, np.arange(grid_density - 1), axis=axis).ravel()
        b = np.take(idx, np.arange(1, grid_density), axis=axis).ravel()
        pairs.append(np.stack([a, b], axis=1))
    rng = np.random.default_rng(seed)
    pairs.append(rng.integers(0, len(pts), size=(random_pairs, 2)))
    pairs = np.concatenate(pairs)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]

    dist = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    df = np.linalg.norm(fx[pairs[:, 0]] - fx[pairs[:, 1]], axis=1)
    dg = np.linalg.norm(gx[pairs[:, 0]] - gx[pairs[:, 1]], ord=2, axis=(1, 2))
    return ModelConstants(
        delta=delta,
        mu_f=float(np.max(df / dist)),
        mu_g=float(np.max(dg / dist)),
        sample_count=len(pts),
        grid_density=grid_density,
    )


# -- built-in models ---------------------------------------------------------


def pendulum(dt: float = 0.1, gravity: float = 9.81, mass: float = 1.0, length: float = 1.0) -> SystemModel:
    """Euler-discretized inverted pendulum, state ``(angle, angular rate)``, input torque."""
    a = dt * gravity / length
    b = dt / (mass * length**2)

    def f(x):
        return np.array([x[0] + dt * x[1], x[1] + a * np.sin(x[0])])

    G = np.array([[0.0], [b]])

    def jac(x):
        return np.array([[1.0, dt], [a * np.cos(x[0]), 1.0]])

    def h(x, u):
        return np.array([x[0]])

    def ss(r):
        return np.array([r[0], 0.0]), np.array([-mass * gravity * length * np.sin(r[0])])

    return SystemModel(
        name="pendulum",
        n=2,
        p=1,
        m=1,
        f=f,
        g=lambda x: G,
        h=h,
        lower=np.array([-5.0, -5.0]),
        upper=np.array([5.0, 5.0]),
        ref_lower=np.array([-1.0]),
        ref_upper=np.array([1.0]),
        analytic_jacobian=jac,
        analytic_steady_state=ss,
        params={"dt": dt, "gravity": gravity, "mass": mass, "length": length},
        batchable=True,
    )


def _linear_model(name, A, B, C, lower, upper, ref_lower, ref_upper, params) -> SystemModel:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    return SystemModel(
        name=name,
        n=A.shape[0],
        p=B.shape[1],
        m=C.shape[0],
        f=lambda x: A @ x,
        g=lambda x: B,
        h=lambda x, u: C @ x,
        lower=np.asarray(lower, dtype=float),
        upper=np.asarray(upper, dtype=float),
        ref_lower=np.asarray(ref_lower, dtype=float),
        ref_upper=np.asarray(ref_upper, dtype=float),
        analytic_jacobian=lambda x: A,
        is_linear=True,
        params=params,
        batchable=True,
    )


def linearized_pendulum(dt: float = 0.1, gravity: float = 9.81, mass: float = 1.0, length: float = 1.0) -> SystemModel:
    """The pendulum linearized about the upright equilibrium (exactly linear, delta = 0)."""
    A = [[1.0, dt], [dt * gravity / length, 1.0]]
    B = [[0.0], [dt / (mass * length**2)]]
    model = _linear_model(
        "pendulum-linearized", A, B, [[1.0, 0.0]],
        [-5.0, -5.0], [5.0, 5.0], [-1.0], [1.0],
        {"dt": dt, "gravity": gravity, "mass": mass, "length": length},
    )
    return model


# Continuous-time position/velocity models of the quadrotor, one per axis.
_DRONE_AXES = {
    "x": (-0.0527, -5.4779),
    "y": (-0.0187, -7.0608),
    "z": (-1.7873, -1.7382),
}


def drone_axis(axis: str, dt: float = 0.1) -> SystemModel:
    """One decoupled axis of the quadrotor position model, Euler-discretized."""
    if axis not in _DRONE_AXES:
        raise KeyError(f"unknown drone axis {axis!r}")
    damping, gain = _DRONE_AXES[axis]
    Ac = np.array([[0.0, 1.0], [0.0, damping]])
    Bc = np.array([[0.0], [gain]])
    if axis == "z":
        lower, upper, ref = [1.0, -1.0], [2.0, 1.0], [1.5]
    else:
        lower, upper, ref = [-0.5, -1.0], [0.5, 1.0], [0.0]
    model = _linear_model(
        f"drone-{axis}", np.eye(2) + dt * Ac, dt * Bc, [[1.0, 0.0]],
        lower, upper, ref, ref, {"dt": dt},
    )
    return model


def drone(dt: float = 0.1) -> SystemModel:
    """Full 6-state quadrotor position model (three decoupled axes)."""
    Ac = np.zeros((6, 6))
    Bc = np.zeros((6, 3))
    C = np.zeros((3, 6))
    lower, upper = [], []
    for k, axis in enumerate("xyz"):
        damping, gain = _DRONE_AXES[axis]
        Ac[2 * k, 2 * k + 1] = 1.0
        Ac[2 * k + 1, 2 * k + 1] = damping
        Bc[2 * k + 1, k] = gain
        C[k, 2 * k] = 1.0
        sub = drone_axis(axis, dt)
        lower.extend(sub.lower)
        upper.extend(sub.upper)
    return _linear_model(
        "drone", np.eye(6) + dt * Ac, dt * Bc, C, lower, upper,
        [0.0, 0.0, 1.5], [0.0, 0.0, 1.5], {"dt": dt},
    )


def scalar_integrator() -> SystemModel:
    """``x+ = x + u`` on ``[-2, 2]``; a toy plant whose control problem can be brute-forced."""
    return _linear_model("scalar", [[1.0]], [[1.0]], [[1.0]], [-2.0], [2.0], [-1.0], [1.0], {})


_REGISTRY: dict[str, Callable[..., SystemModel]] = {
    "scalar": scalar_integrator,
    "pendulum": pendulum,
    "pendulum-linearized": linearized_pendulum,
    "drone-x": lambda **kw: drone_axis("x", **kw),
    "drone-y": lambda **kw: drone_axis("y", **kw),
    "drone-z": lambda **kw: drone_axis("z", **kw),
    "drone": drone,
}


def available_models() -> list[str]:
    return sorted(_REGISTRY)


def get_model(model_id: str, **overrides) -> SystemModel:
    """Build a registered model, passing ``overrides`` (e.g. ``dt``, ``gravity``) to its factory."""
    try:
        factory = _REGISTRY[model_id]
    except KeyError:
        raise KeyError(f"unknown model {model_id!r}; choose from {available_models()}") from None
    return factory(**overrides)
