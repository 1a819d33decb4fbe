"""Independent reference computations used by the tests.

Nothing here imports the solver or the network code; each oracle rebuilds its
answer from first principles (grid search, closed forms, scipy).
"""

import math

import numpy as np

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


def pendulum_step(x, u, dt=0.1, g=9.81, m=1.0, L=1.0):
    return np.array([x[0] + dt * x[1], x[1] + dt * g / L * math.sin(x[0]) + dt / (m * L * L) * u])


def pendulum_delta_scan(lo=-5.0, hi=5.0, count=2_000_001, dt=0.1, g=9.81):
    """max over a dense 1-D scan of dt*g*|sin(x) - x cos(x)|."""
    x = np.linspace(lo, hi, count)
    return float(np.max(dt * g * np.abs(np.sin(x) - x * np.cos(x))))


def scalar_grid_oracle(x, theta, Qx=1.0, Qu=0.1, eps=1e-3, cap=10.0, du=1e-3, dp=1e-3):
    """Brute-force minimum of the joint problem for x+ = x + u, x_bar = u_bar = 0.

    Searches u between 0 and -2x and p in [eps, cap]; returns (cost, u, p).
    """
    lo, hi = min(0.0, -2.0 * x), max(0.0, -2.0 * x)
    u = np.arange(lo, hi + du / 2, du)
    p = np.arange(eps, cap + dp / 2, dp)
    best, arg = np.inf, None
    for k in range(0, len(u), 400):
        U = u[k : k + 400, None]
        cost = Qx * (x + U) ** 2 + Qu * U**2 + p[None, :] * x * x
        ok = np.sqrt(p)[None, :] * (np.abs(x + U) - abs(x)) + theta * abs(x) <= 0
        cost = np.where(ok, cost, np.inf)
        i = np.unravel_index(np.argmin(cost), cost.shape)
        if cost[i] < best:
            best, arg = float(cost[i]), (float(U[i[0], 0]), float(p[i[1]]))
    return best, arg[0], arg[1]


def rank_one_oracle(A, B, x, Qx, Qu, theta, eps, u_grid):
    """Lower bound on the 2-D joint problem with x_bar = u_bar = 0, single input.

    Any P with P >= eps I has ||e+||_P >= sqrt(eps)||e+||, so feasibility forces
    ||e||_P >= theta||e|| + sqrt(eps)||e+||. The bound is attained by
    P = eps I + c w w^T with w orthogonal to e+, as long as c stays under the cap.
    Returns (bound, u, c) at the grid minimizer.
    """
    A, B, x, Qx = (np.asarray(a, dtype=float) for a in (A, B, x, Qx))
    e = x
    ne = np.linalg.norm(e)
    Ep = (A @ x)[None, :] + np.outer(u_grid, B[:, 0])
    nEp = np.linalg.norm(Ep, axis=1)
    vee = np.maximum(eps * ne**2, (theta * ne + math.sqrt(eps) * nEp) ** 2)
    cost = np.einsum("ki,ij,kj->k", Ep, Qx, Ep) + Qu * u_grid**2 + vee
    k = int(np.argmin(cost))
    cos_phi = float(e @ Ep[k]) / (ne * nEp[k]) if nEp[k] > 0 else 1.0
    sin2 = max(1.0 - cos_phi**2, 1e-300)
    c = max(0.0, (vee[k] / ne**2 - eps) / sin2)
    return float(cost[k]), float(u_grid[k]), c


def scipy_dare(A, B, Q, R):
    from scipy.linalg import solve_discrete_are

    A, B, Q, R = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (A, B, Q, R))
    P = solve_discrete_are(A, B, Q, R)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


def lqr_one_step_scan(a, b, x, ru, rf, lo=-5.0, hi=5.0, count=1_000_001):
    """1-D scan of ru u^2 + rf (a x + b u)^2."""
    u = np.linspace(lo, hi, count)
    return float(u[np.argmin(ru * u * u + rf * (a * x + b * u) ** 2)])
