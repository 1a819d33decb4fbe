"""One-step-ahead predictive control with a jointly optimized quadratic Lyapunov matrix.

At state ``x`` and reference ``r`` the controller picks an input ``u`` and a
matrix ``P = L L^T + eps I`` minimizing::

    ||x+ - xbar||^2_Qx + ||u - ubar||^2_Qu + V(x, P)^2 + rho ||P - eps I||_F^2

where ``x+ = A x + B u`` uses the linearization at ``x``, subject to the
decrease condition ``V(x+, P) - V(x, P) <= -theta ||x - xbar||`` and
``lambda_max(P) <= cap``. ``V(z, P) = sqrt(|(z - xbar)^T P (z - xbar)|)``.

The nonconvex problem is solved by an augmented Lagrangian outer loop around a
BFGS inner loop, run in lockstep from several starting points.
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import as_square, as_vector, check_positive, check_rng_seed, check_symmetric
from .dynamics import SystemModel, get_model, linearize, steady_state
from .exceptions import DareError, SingularSystemError, StabilizabilityWarning

__all__ = [
    "SolverConfig",
    "LyapunovMatrix",
    "ControlSolution",
    "lyapunov_value",
    "decrease_residual",
    "solve",
    "solve_linear",
    "solve_fixed_P",
    "lqr_one_step",
    "dare",
    "ilqr_controller",
    "OSAPController",
    "LQR1Controller",
    "IterativeLQRController",
]

_SMOOTH = 1e-18
STATUSES = ("optimal", "feasible-suboptimal", "infeasible")
NU_MAX = 1e12


@dataclass(frozen=True)
class SolverConfig:
    """Weights, Lyapunov-matrix bounds and numerical settings for :func:`solve`.

    ``Qx`` and ``Qu`` may be scalars (times identity), diagonals or full
    matrices; they are expanded against the model dimensions at solve time.
    """

    theta: float = 0.01
    Qx: object = 2.0
    Qu: object = 0.1
    eps_P: float = 1e-3
    cap_P: float = 10.0
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    multistart: int = 4
    seed: int = 0
    tol_stationarity: float = 1e-8
    tol_feasibility: float = 1e-6
    max_outer: int = 25
    max_inner: int = 200
    reg_P: float = 1e-6

    def __post_init__(self):
        check_positive(self.theta, "theta")
        check_positive(self.eps_P, "eps_P")
        check_positive(self.cap_P, "cap_P")
        if self.cap_P <= self.eps_P:
            raise ValueError("cap_P must exceed eps_P")
        check_positive(self.penalty_init, "penalty_init")
        if not self.penalty_growth > 1:
            raise ValueError("penalty_growth must be > 1")
        if int(self.multistart) < 1:
            raise ValueError("multistart must be >= 1")
        check_rng_seed(self.seed)
        check_positive(self.reg_P, "reg_P", strict=False)
        check_positive(self.tol_feasibility, "tol_feasibility")
        check_positive(self.tol_stationarity, "tol_stationarity")

    def weights(self, n: int, p: int) -> tuple[np.ndarray, np.ndarray]:
        Qx = as_square(self.Qx, n, "Qx")
        Qu = as_square(self.Qu, p, "Qu")
        check_symmetric(Qx, "Qx")
        check_symmetric(Qu, "Qu", definite=True)
        return Qx, Qu

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown solver config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class LyapunovMatrix:
    """``P = L L^T + eps I`` with ``L`` lower triangular."""

    L: np.ndarray
    eps: float

    @property
    def P(self) -> np.ndarray:
        return self.L @ self.L.T + self.eps * np.eye(self.L.shape[0])

    @property
    def eigvals(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.P)

    @classmethod
    def floor(cls, n: int, eps: float) -> "LyapunovMatrix":
        return cls(np.zeros((n, n)), eps)


@dataclass(eq=False)
class ControlSolution:
    u_star: np.ndarray
    P_star: LyapunovMatrix
    cost: float
    feas_residual: float
    x_plus: np.ndarray
    iterations: tuple
    status: str
    wall_time: float
    objective: float = float("nan")
    starts: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible"

    def to_record(self, **provenance) -> dict:
        """Flat JSON-serializable record (one trace line)."""
        rec = {
            "u_star": self.u_star.tolist(),
            "P_star": self.P_star.P.tolist(),
            "cost": self.cost,
            "feas_residual": self.feas_residual,
            "x_plus": self.x_plus.tolist(),
            "iterations": list(self.iterations),
            "status": self.status,
            "wall_time": self.wall_time,
        }
        rec.update(provenance)
        return rec


def _as_matrix(P) -> np.ndarray:
    return P.P if isinstance(P, LyapunovMatrix) else np.asarray(P, dtype=float)


def lyapunov_value(x, x_bar, P) -> float:
    """``sqrt(|(x - x_bar)^T P (x - x_bar)|)``."""
    d = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(x_bar, dtype=float))
    P = np.atleast_2d(_as_matrix(P))
    if P.shape != (d.size, d.size):
        raise ValueError(f"P must be {d.size}x{d.size}, got {P.shape}")
    return float(np.sqrt(abs(d @ P @ d)))


def decrease_residual(x, x_plus, x_bar, P, theta: float) -> float:
    """``V(x+) - V(x) + theta ||x - x_bar||``; non-positive means the decrease condition holds."""
    e = np.atleast_1d(np.asarray(x, dtype=float) - np.asarray(x_bar, dtype=float))
    return lyapunov_value(x_plus, x_bar, P) - lyapunov_value(x, x_bar, P) + theta * float(np.linalg.norm(e))


def lqr_one_step(A, B, x, x_bar, u_bar, Rx, Ru, Rf) -> np.ndarray:
    """Horizon-one LQR input ``(Ru + B^T Rf B)^{-1} (Ru u_bar + B^T Rf (x_bar - A x))``.

    ``Rx`` weighs the current state and so does not move the minimizer; it is
    accepted for signature parity with the cost it belongs to.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, p = B.shape
    Ru = as_square(Ru, p, "Ru")
    Rf = as_square(Rf, n, "Rf")
    as_square(Rx, n, "Rx")
    x = as_vector(x, n, "x")
    x_bar = as_vector(x_bar, n, "x_bar")
    u_bar = as_vector(u_bar, p, "u_bar")
    H = Ru + B.T @ Rf @ B
    if np.linalg.cond(H) > 1e14:
        raise SingularSystemError("Ru + B^T Rf B is singular")
    return np.linalg.solve(H, Ru @ u_bar + B.T @ Rf @ (x_bar - A @ x))


def dare(A, B, Q, R, tol: float = 1e-10, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Solve the discrete algebraic Riccati equation by value iteration from ``P0 = Q``.

    Returns ``(P, K)`` with ``K = (R + B^T P B)^{-1} B^T P A`` so that
    ``u = -K x`` is the infinite-horizon LQR law.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, p = B.shape
    Q = as_square(Q, n, "Q")
    R = as_square(R, p, "R")
    P = Q.copy()
    for _ in range(max_iter):
        S = R + B.T @ P @ B
        try:
            PB_Sinv = np.linalg.solve(S, B.T @ P).T
        except np.linalg.LinAlgError as exc:
            raise DareError("R + B^T P B became singular") from exc
        P_next = Q + A.T @ (P - PB_Sinv @ (B.T @ P)) @ A
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise DareError("Riccati iteration diverged")
        done = np.max(np.abs(P_next - P)) <= tol
        P = P_next
        if done:
            break
    else:
        raise DareError(f"Riccati iteration did not converge in {max_iter} iterations")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


# -- the joint (u, P) problem ------------------------------------------------


class _Problem:
    """Scaled objective and constraints, evaluated for a batch of candidate points.

    A point is ``z = [u, vech(L)]``. The cost is divided by ``scale**2`` and the
    decrease constraint by ``scale``, where ``scale`` is the size of the current
    tracking error, so tolerances mean the same thing near and far from the
    equilibrium.
    """

    def __init__(self, A, B, x, x_bar, u_bar, Qx, Qu, cfg: SolverConfig):
        self.n, self.p = B.shape
        self.B = B
        self.Qx, self.Qu = Qx, Qu
        self.QxB = Qx @ B
        self.u_bar = u_bar
        self.e = x - x_bar
        self.drift = A @ x - x_bar
        self.theta_term = cfg.theta * float(np.linalg.norm(self.e))
        self.eps = cfg.eps_P
        self.cap = cfg.cap_P
        self.rho = cfg.reg_P
        # aim slightly inside the decrease constraint so the returned point is strictly feasible
        self.margin = min(0.25 * cfg.tol_feasibility, 0.25 * self.theta_term)
        self.ti, self.tj = np.tril_indices(self.n)
        base = max(np.linalg.norm(self.e), np.linalg.norm(self.drift + B @ u_bar))
        self.scale = max(base, 1e-6)
        self.dim = self.p + self.ti.size
        self.ee = float(self.e @ self.e)
        self.eye = np.eye(self.n)

    def unpack_L(self, Z):
        L = np.zeros((Z.shape[0], self.n, self.n))
        L[:, self.ti, self.tj] = Z[:, self.p :]
        return L

    def pack_L(self, L):
        return L[..., self.ti, self.tj]

    def evaluate(self, Z, with_grad=True, cap_active=None):
        """Return scaled cost, constraints ``(decrease, cap)`` and their gradients.

        ``cap_active`` flags starts whose cap multiplier is positive; for the
        others the eigenvalue cap is only resolved exactly when the trace bound
        cannot rule it out.
        """
        p, e, eps = self.p, self.e, self.eps
        inv_s = 1.0 / self.scale
        inv_s2 = inv_s * inv_s
        U = Z[:, :p]
        L = self.unpack_L(Z)
        Ep = self.drift + U @ self.B.T
        Lt = L.transpose(0, 2, 1)
        M = L @ Lt
        dU = U - self.u_bar
        EpQ = Ep @ self.Qx
        dUQ = dU @ self.Qu
        Le = e @ L
        LEp = (Ep[:, None, :] @ L)[:, 0, :]
        a = (Le * Le).sum(1) + eps * self.ee
        b = (LEp * LEp).sum(1) + eps * (Ep * Ep).sum(1)
        f = ((EpQ * Ep).sum(1) + (dUQ * dU).sum(1) + a + self.rho * (M * M).sum((1, 2))) * inv_s2

        sa = np.sqrt(a + _SMOOTH)
        sb = np.sqrt(b + _SMOOTH)
        c = np.empty((Z.shape[0], 2))
        c[:, 0] = (sb - sa + self.theta_term + self.margin) * inv_s
        trace = np.trace(M, axis1=1, axis2=2) + self.n * eps
        need = trace > self.cap
        if cap_active is not None:
            need = need | cap_active
        c[:, 1] = (trace - self.cap) / self.cap
        if need.any():
            lam, vec = np.linalg.eigh(M[need] + eps * self.eye)
            c[need, 1] = (lam[:, -1] - self.cap) / self.cap
        if not with_grad:
            return f, c, None, None

        gf = np.empty_like(Z)
        gf[:, :p] = (2.0 * Ep @ self.QxB + 2.0 * dUQ) * inv_s2
        GL = 2.0 * e[None, :, None] * Le[:, None, :]
        if self.rho:
            GL = GL + 4.0 * self.rho * (M @ L)
        gf[:, p:] = self.pack_L(GL) * inv_s2

        gc = np.zeros((Z.shape[0], 2, self.dim))
        PEp = (M @ Ep[:, :, None])[:, :, 0] + eps * Ep
        gc[:, 0, :p] = (PEp @ self.B) * (inv_s / sb)[:, None]
        G1 = (Ep[:, :, None] * LEp[:, None, :]) * (1.0 / sb)[:, None, None] - (
            e[None, :, None] * Le[:, None, :]
        ) * (1.0 / sa)[:, None, None]
        gc[:, 0, p:] = self.pack_L(G1) * inv_s
        if need.any():
            v = vec[:, :, -1]
            G2 = 2.0 * v[:, :, None] * (v[:, None, :] @ L[need])
            gc[need, 1, p:] = self.pack_L(G2) / self.cap
        return f, c, gf, gc


def _merit(problem, Z, lam, nu, with_grad=True):
    f, c, gf, gc = problem.evaluate(Z, with_grad, cap_active=lam[:, 1] > 0)
    shifted = np.maximum(0.0, lam + nu[:, None] * c)
    phi = f + np.sum(shifted**2 - lam**2, axis=1) / (2.0 * nu)
    if not with_grad:
        return phi, f, c, None
    grad = gf + (shifted[:, :, None] * gc).sum(1)
    return phi, f, c, grad


def _stationary(g, phi, gtol):
    return np.max(np.abs(g), axis=1) <= gtol * (1.0 + np.abs(phi))


def _bfgs(problem, Z, lam, nu, gtol, max_iter, H=None):
    """Lockstep BFGS with Armijo backtracking on the augmented Lagrangian of each start.

    ``H`` (inverse-Hessian approximations) is updated in place so later outer
    iterations can continue from it.
    """
    S, d = Z.shape
    fresh = H is None
    if fresh:
        H = np.broadcast_to(np.eye(d), (S, d, d)).copy()
    phi, f, c, g = _merit(problem, Z, lam, nu)
    active = np.ones(S, dtype=bool)
    first = np.full(S, fresh)
    iters = 0
    for iters in range(1, max_iter + 1):
        active &= ~_stationary(g, phi, gtol)
        if not active.any():
            break
        step = -(H @ g[:, :, None])[:, :, 0]
        slope = (step * g).sum(1)
        bad = slope >= 0
        if bad.any():
            H[bad] = np.eye(d)
            step[bad] = -g[bad]
            slope[bad] = -(g[bad] * g[bad]).sum(1)
        alpha = np.where(active, 1.0, 0.0)
        accepted = ~active
        Z_new, phi_new, f_new, c_new, g_new = Z.copy(), phi.copy(), f.copy(), c.copy(), g.copy()
        for _ in range(40):
            trial = Z + alpha[:, None] * step
            phi_t, f_t, c_t, g_t = _merit(problem, trial, lam, nu)
            ok = ~accepted & np.isfinite(phi_t) & (phi_t <= phi + 1e-4 * alpha * slope)
            if ok.any():
                Z_new[ok], phi_new[ok], f_new[ok] = trial[ok], phi_t[ok], f_t[ok]
                c_new[ok], g_new[ok] = c_t[ok], g_t[ok]
                accepted |= ok
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
        moved = active & accepted
        active &= accepted
        if not moved.any():
            break
        s_vec = Z_new - Z
        y_vec = g_new - g
        sy = (s_vec * y_vec).sum(1)
        yy = (y_vec * y_vec).sum(1)
        upd = moved & (sy > 1e-12 * np.sqrt((s_vec * s_vec).sum(1) * yy))
        if upd.any():
            rescale = upd & first
            if rescale.any():
                H[rescale] = (sy[rescale] / yy[rescale])[:, None, None] * np.eye(d)
            first &= ~upd
            rho = 1.0 / sy[upd]
            Hu = H[upd]
            sv, yv = s_vec[upd], y_vec[upd]
            Hy = (Hu @ yv[:, :, None])[:, :, 0]
            yHy = (yv * Hy).sum(1)
            Hu = (
                Hu
                - rho[:, None, None] * (sv[:, :, None] * Hy[:, None, :] + Hy[:, :, None] * sv[:, None, :])
                + (rho**2 * yHy + rho)[:, None, None] * sv[:, :, None] * sv[:, None, :]
            )
            H[upd] = Hu
        tiny = np.max(np.abs(s_vec), axis=1) <= 1e-15 * (1.0 + np.max(np.abs(Z), axis=1))
        Z, phi, f, c, g = Z_new, phi_new, f_new, c_new, g_new
        active &= ~tiny
    return Z, phi, f, c, g, iters, H


def _starting_points(problem, A, B, x, x_bar, u_bar, Qx, Qu, cfg, rng):
    n, p = problem.n, problem.p
    l_identity = np.sqrt(max(1.0 - cfg.eps_P, 0.0)) * np.eye(n)
    try:
        u_lqr = lqr_one_step(A, B, x, x_bar, u_bar, np.eye(n), Qu, Qx)
    except SingularSystemError:
        u_lqr = u_bar.copy()
    starts = [np.concatenate([u_lqr, problem.pack_L(l_identity)])]
    if cfg.multistart > 1:
        starts.append(np.concatenate([u_bar, problem.pack_L(l_identity)]))
    spread = 1.0 + np.linalg.norm(u_lqr - u_bar)
    while len(starts) < cfg.multistart:
        u = u_lqr + spread * rng.standard_normal(p)
        L = l_identity + 0.5 * np.tril(rng.standard_normal((n, n)))
        starts.append(np.concatenate([u, problem.pack_L(L)]))
    return np.array(starts)


def solve(model: SystemModel, x, r, cfg: Optional[SolverConfig] = None) -> ControlSolution:
    """Solve the joint input / Lyapunov-matrix problem at state ``x`` for reference ``r``.

    All starts are advanced together; the feasible one with the lowest
    objective wins, ties going to the smaller ``||P||_F`` and then the
    lexicographically smaller input. If no start reaches the feasibility
    tolerance the best-residual start is returned with status ``infeasible``.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    x = as_vector(x, model.n, "x")
    ss = steady_state(model, r)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilizabilityWarning)
        lin = linearize(model, x)
    return _solve_linearized(lin.A, lin.B, x, ss.x_bar, ss.u_bar, cfg, t0)


def _solve_linearized(A, B, x, x_bar, u_bar, cfg, t0=None) -> ControlSolution:
    t0 = time.perf_counter() if t0 is None else t0
    n, p = B.shape
    Qx, Qu = cfg.weights(n, p)
    problem = _Problem(A, B, x, x_bar, u_bar, Qx, Qu, cfg)
    rng = np.random.default_rng(cfg.seed)
    Z = _starting_points(problem, A, B, x, x_bar, u_bar, Qx, Qu, cfg, rng)
    S = Z.shape[0]

    lam = np.zeros((S, 2))
    nu = np.full(S, float(cfg.penalty_init))
    prev_viol = np.full(S, np.inf)
    done = np.zeros(S, dtype=bool)
    dead = np.zeros(S, dtype=bool)
    inner_total = 0
    outer = 0
    gtol = cfg.tol_stationarity
    feas_scaled = cfg.tol_feasibility / problem.scale
    H = None
    for outer in range(1, cfg.max_outer + 1):
        # loose inner solves early, tightening as the multipliers settle
        inner_tol = max(gtol, 1e-3 * 0.1 ** (outer - 1))
        Z_new, phi, f, c, g, it, H = _bfgs(problem, Z, lam, nu, inner_tol, cfg.max_inner, H)
        inner_total += it
        Z = np.where((done | dead)[:, None], Z, Z_new)
        viol = np.maximum(0.0, c).max(axis=1)
        grad_ok = _stationary(g, phi, 10 * gtol)
        newly_done = ~done & (viol <= 0.1 * feas_scaled) & grad_ok
        done |= newly_done
        if done.all():
            break
        lam = np.where(done[:, None], lam, np.maximum(0.0, lam + nu[:, None] * c))
        grow = ~done & (viol > 0.1 * prev_viol)
        # a start that stalls with the penalty already at its ceiling will not recover
        dead |= grow & (nu >= NU_MAX) | ~np.isfinite(phi)
        if done.any():
            # nor will one whose cost is orders of magnitude above a finished start
            dead |= ~done & (f > 1e3 * f[done].min() + 1.0)
        if (done | dead).all():
            break
        nu = np.where(grow, nu * cfg.penalty_growth, nu)
        nu = np.minimum(nu, NU_MAX)
        prev_viol = np.where(done, prev_viol, viol)

    return _select(problem, Z, done, cfg, A, B, x, x_bar, (outer, inner_total), t0)


def _select(problem, Z, converged, cfg, A, B, x, x_bar, iterations, t0) -> ControlSolution:
    L = problem.unpack_L(Z)
    # the penalty method leaves the cap satisfied only to tolerance; pull overshoots back onto it
    top = np.linalg.eigvalsh(L @ L.transpose(0, 2, 1))[:, -1]
    over = top + cfg.eps_P > cfg.cap_P
    if over.any():
        L[over] *= np.sqrt((cfg.cap_P - cfg.eps_P) / top[over])[:, None, None]
        Z = Z.copy()
        Z[:, problem.p :] = problem.pack_L(L)
    f, _, _, _ = problem.evaluate(Z, with_grad=False)
    objective = f * problem.scale**2
    Ps = L @ L.transpose(0, 2, 1) + cfg.eps_P * np.eye(problem.n)
    residuals = np.empty(Z.shape[0])
    caps = np.empty(Z.shape[0])
    for k in range(Z.shape[0]):
        x_plus = A @ x + B @ Z[k, : problem.p]
        residuals[k] = max(0.0, decrease_residual(x, x_plus, x_bar, Ps[k], cfg.theta))
        caps[k] = np.linalg.eigvalsh(Ps[k])[-1]
    feasible = (residuals <= cfg.tol_feasibility) & (caps <= cfg.cap_P * (1 + 1e-9))

    if feasible.any():
        cand = np.flatnonzero(feasible)
        best = objective[cand].min()
        tied = cand[objective[cand] <= best + 1e-12 * max(1.0, abs(best))]
        key = sorted(
            tied,
            key=lambda k: (np.linalg.norm(Ps[k]), tuple(Z[k, : problem.p])),
        )
        k = key[0]
        status = "optimal" if converged[k] else "feasible-suboptimal"
    else:
        k = int(np.argmin(residuals))
        status = "infeasible"

    u = Z[k, : problem.p].copy()
    P = LyapunovMatrix(L[k].copy(), cfg.eps_P)
    x_plus = A @ x + B @ u
    e = x - x_bar
    dp = x_plus - x_bar
    cost = float(dp @ problem.Qx @ dp + (u - problem.u_bar) @ problem.Qu @ (u - problem.u_bar) + e @ P.P @ e)
    return ControlSolution(
        u_star=u,
        P_star=P,
        cost=max(cost, 0.0),
        feas_residual=float(residuals[k]),
        x_plus=x_plus,
        iterations=iterations,
        status=status,
        wall_time=time.perf_counter() - t0,
        objective=float(objective[k]),
        starts=[
            {"objective": float(objective[j]), "residual": float(residuals[j]), "converged": bool(converged[j])}
            for j in range(Z.shape[0])
        ],
    )


def solve_linear(A, B, x, x_bar, u_bar, cfg: Optional[SolverConfig] = None) -> ControlSolution:
    """Solve the joint problem for explicit ``(A, B)`` and steady pair, bypassing a model."""
    cfg = cfg or SolverConfig()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, p = B.shape
    return _solve_linearized(
        A, B, as_vector(x, n, "x"), as_vector(x_bar, n, "x_bar"), as_vector(u_bar, p, "u_bar"), cfg
    )


class _FrozenP:
    """The joint problem restricted to ``u``: ``L`` held fixed, decrease and cap constraints dropped."""

    def __init__(self, problem: _Problem, L_packed: np.ndarray):
        self.inner = problem
        self.L_packed = L_packed
        self.p = self.dim = problem.p
        self.scale = problem.scale

    def evaluate(self, U, with_grad=True, cap_active=None):
        Z = np.hstack([U, np.broadcast_to(self.L_packed, (len(U), self.L_packed.size))])
        f, _, gf, _ = self.inner.evaluate(Z, with_grad)
        c = np.full((len(U), 2), -1.0)
        if not with_grad:
            return f, c, None, None
        return f, c, gf[:, : self.p], np.zeros((len(U), 2, self.p))


def solve_fixed_P(A, B, x, x_bar, u_bar, P: LyapunovMatrix, cfg: Optional[SolverConfig] = None) -> np.ndarray:
    """Minimize the cost over ``u`` alone with ``P`` frozen and the decrease condition dropped.

    The same scaled objective and BFGS loop as :func:`solve` are used, started
    from ``u_bar``; the minimizer should be the horizon-one LQR input.
    """
    cfg = cfg or SolverConfig()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, p = B.shape
    x, x_bar, u_bar = as_vector(x, n, "x"), as_vector(x_bar, n, "x_bar"), as_vector(u_bar, p, "u_bar")
    Qx, Qu = cfg.weights(n, p)
    problem = _Problem(A, B, x, x_bar, u_bar, Qx, Qu, cfg)
    frozen = _FrozenP(problem, problem.pack_L(np.asarray(P.L, dtype=float)))
    U, *_ = _bfgs(frozen, u_bar[None, :].copy(), np.zeros((1, 2)), np.ones(1), cfg.tol_stationarity, 1000)
    return U[0]


def ilqr_controller(model: SystemModel, Qx, Qu, r):
    """Controller that re-linearizes at every state and applies the infinite-horizon LQR gain."""
    ss = steady_state(model, r)
    Qx = as_square(Qx, model.n, "Qx")
    Qu = as_square(Qu, model.p, "Qu")

    def control(x):
        x = as_vector(x, model.n, "x")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StabilizabilityWarning)
            lin = linearize(model, x)
        _, K = dare(lin.A, lin.B, Qx, Qu)
        return ss.u_bar - K @ (x - ss.x_bar)

    return control


# -- estimator front-ends ----------------------------------------------------


def _resolve_model(model) -> SystemModel:
    if isinstance(model, SystemModel):
        return model
    if isinstance(model, str):
        return get_model(model)
    raise TypeError(f"model must be a SystemModel or a registry id, got {type(model).__name__}")


class _ControllerBase(BaseEstimator):
    """Shared plumbing: rows of ``X`` are ``[x_1..x_n, r_1..r_m]``."""

    def fit(self, X=None, y=None):
        self.model_ = _resolve_model(self.model)
        self.n_features_in_ = self.model_.n + self.model_.m
        self._steady = {}
        self._validate_params()
        return self

    def _validate_params(self):
        pass

    def _steady_pair(self, r):
        key = tuple(np.atleast_1d(r).tolist())
        if key not in self._steady:
            self._steady[key] = steady_state(self.model_, r)
        return self._steady[key]

    def _split(self, X):
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X[:, : self.model_.n], X[:, self.model_.n :]

    def control(self, x, r):
        """Return ``(u, P or None)`` at state ``x`` for reference ``r``."""
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        xs, rs = self._split(X)
        return np.array([self.control(x, r)[0] for x, r in zip(xs, rs)])


class OSAPController(_ControllerBase):
    """Optimization-in-the-loop controller returning the optimal input and Lyapunov matrix.

    ``fit`` only resolves the model and validates the configuration; ``predict``
    solves one problem per row of ``X``.
    """

    def __init__(
        self,
        model="pendulum",
        theta=0.01,
        Qx=2.0,
        Qu=0.1,
        eps_P=1e-3,
        cap_P=10.0,
        reg_P=1e-6,
        multistart=4,
        seed=0,
        penalty_init=10.0,
        penalty_growth=10.0,
        tol_stationarity=1e-8,
        tol_feasibility=1e-6,
        max_outer=25,
        max_inner=200,
    ):
        self.model = model
        self.theta = theta
        self.Qx = Qx
        self.Qu = Qu
        self.eps_P = eps_P
        self.cap_P = cap_P
        self.reg_P = reg_P
        self.multistart = multistart
        self.seed = seed
        self.penalty_init = penalty_init
        self.penalty_growth = penalty_growth
        self.tol_stationarity = tol_stationarity
        self.tol_feasibility = tol_feasibility
        self.max_outer = max_outer
        self.max_inner = max_inner

    def _validate_params(self):
        params = {f.name: getattr(self, f.name) for f in fields(SolverConfig)}
        self.config_ = SolverConfig(**params)
        self.config_.weights(self.model_.n, self.model_.p)

    def solve(self, x, r) -> ControlSolution:
        check_is_fitted(self, "config_")
        t0 = time.perf_counter()
        x = as_vector(x, self.model_.n, "x")
        ss = self._steady_pair(r)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StabilizabilityWarning)
            lin = linearize(self.model_, x)
        return _solve_linearized(lin.A, lin.B, x, ss.x_bar, ss.u_bar, self.config_, t0)

    def control(self, x, r):
        sol = self.solve(x, r)
        return sol.u_star, sol.P_star.P

    def predict_lyapunov(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        xs, rs = self._split(X)
        return np.array([self.solve(x, r).P_star.P for x, r in zip(xs, rs)])


class LQR1Controller(_ControllerBase):
    """Horizon-one LQR on the linearization at the current state (``Rf = Qx``, ``Ru = Qu``)."""

    def __init__(self, model="pendulum", Qx=2.0, Qu=0.1):
        self.model = model
        self.Qx = Qx
        self.Qu = Qu

    def control(self, x, r):
        check_is_fitted(self, "model_")
        x = as_vector(x, self.model_.n, "x")
        ss = self._steady_pair(r)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StabilizabilityWarning)
            lin = linearize(self.model_, x)
        n = self.model_.n
        return lqr_one_step(lin.A, lin.B, x, ss.x_bar, ss.u_bar, np.eye(n), self.Qu, self.Qx), None


class IterativeLQRController(_ControllerBase):
    """Infinite-horizon LQR recomputed on the linearization at every visited state."""

    def __init__(self, model="pendulum", Qx=2.0, Qu=0.1):
        self.model = model
        self.Qx = Qx
        self.Qu = Qu

    def gain(self, x) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StabilizabilityWarning)
            lin = linearize(self.model_, x)
        return dare(lin.A, lin.B, as_square(self.Qx, self.model_.n, "Qx"),
                    as_square(self.Qu, self.model_.p, "Qu"))[1]

    def control(self, x, r):
        check_is_fitted(self, "model_")
        x = as_vector(x, self.model_.n, "x")
        ss = self._steady_pair(r)
        return ss.u_bar - self.gain(x) @ (x - ss.x_bar), None
