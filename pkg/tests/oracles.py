"""Independent oracles used to check the library's solver paths.

Everything here is deliberately brute-force or first-order so it shares
no code with the implementations under test: exhaustive simplex grids,
projected gradient descent on the sum-to-one affine set, dense
normal-equation solves, and from-scratch refit loops.
"""

from __future__ import annotations

import itertools

import numpy as np


def simplex_grid_objective(x1, x0, resolution=1e-3, zeta=0.0, importance=None, penalty="l2"):
    """Minimum objective over an exhaustive simplex lattice.

    Enumerates all weight vectors whose entries are integer multiples of
    ``resolution`` summing to one; feasible only for a handful of donors.
    Returns (best objective, best weights).
    """
    n0 = x0.shape[0]
    steps = int(round(1.0 / resolution))
    v = np.ones(x0.shape[1]) if importance is None else np.asarray(importance, float)

    def objective(gamma):
        gap = x1 - gamma @ x0  # works for single vectors and row batches
        fit = np.sum(v * gap**2, axis=-1)
        if zeta == 0.0:
            return fit
        if penalty == "l2":
            return fit + zeta * np.sum(gamma**2, axis=-1)
        safe = np.where(gamma > 0, gamma, 1.0)
        return fit + zeta * np.sum(gamma * np.log(safe), axis=-1)

    if n0 == 2:
        k = np.arange(steps + 1)
        grid = np.stack([k / steps, 1.0 - k / steps], axis=1)
        vals = objective(grid)
        best = int(np.argmin(vals))
        return float(vals[best]), grid[best]
    if n0 == 3:
        best_val, best_w = np.inf, None
        chunk = 2048
        ks = np.arange(steps + 1)
        for i in ks:
            j = np.arange(steps + 1 - i)
            grid = np.stack(
                [np.full(j.shape, i / steps), j / steps, (steps - i - j) / steps], axis=1
            )
            vals = objective(grid)
            idx = int(np.argmin(vals))
            if vals[idx] < best_val:
                best_val, best_w = float(vals[idx]), grid[idx]
        return best_val, best_w
    # generic fallback: coarse lattice via integer compositions
    best_val, best_w = np.inf, None
    for comp in itertools.product(range(steps + 1), repeat=n0 - 1):
        rest = steps - sum(comp)
        if rest < 0:
            continue
        gamma = np.array(list(comp) + [rest]) / steps
        val = float(objective(gamma))
        if val < best_val:
            best_val, best_w = val, gamma
    return best_val, best_w


def affine_qp_descent(x1, x0, anchor, lam, iters=200_000, seed_starts=5, rng=None):
    """Minimize (1/(2 lam))||x1 - x0'w||^2 + 0.5||w - anchor||^2 over sum(w)=1.

    First-order method: gradient steps projected onto the sum-zero
    direction, from the anchor projection plus a few random feasible
    starts (grid seeding for a convex quadratic). Returns (best objective,
    best weights).
    """
    rng = rng or np.random.default_rng(0)
    n0 = x0.shape[0]

    def objective(w):
        gap = x1 - x0.T @ w
        return float(gap @ gap / (2.0 * lam) + 0.5 * np.sum((w - anchor) ** 2))

    def grad(w):
        return -(x0 @ (x1 - x0.T @ w)) / lam + (w - anchor)

    lips = float(np.linalg.norm(x0, 2)) ** 2 / lam + 1.0
    step = 1.0 / lips
    best_val, best_w = np.inf, None
    starts = [anchor - anchor.mean() + 1.0 / n0]
    for _ in range(seed_starts - 1):
        z = rng.normal(size=n0)
        starts.append(z - z.mean() + 1.0 / n0)
    for w in starts:
        w = w.copy()
        for _ in range(iters):
            g = grad(w)
            g = g - g.mean()
            w_new = w - step * g
            if np.linalg.norm(w_new - w) < 1e-14:
                w = w_new
                break
            w = w_new
        val = objective(w)
        if val < best_val:
            best_val, best_w = val, w
    return best_val, best_w


def dense_ridge_solve(x0, y, lam):
    """Normal-equation ridge coefficients (x0'x0 + lam I)^{-1} x0' (y - mean)."""
    t0 = x0.shape[1]
    yc = y - y.mean()
    return np.linalg.solve(x0.T @ x0 + lam * np.eye(t0), x0.T @ yc)


def loo_cv_rebuild(x1, x0, lam, zeta=1e-10, tol=1e-9):
    """Leave-one-out CV rebuilt from scratch with an independent inner solver.

    For each held-out period the SCM weights come from a long plain
    projected-gradient run (no acceleration, no polish), the augmentation
    from a dense solve. Returns the vector of held-out squared residuals.
    """
    t0 = x1.shape[0]
    out = []
    for t in range(t0):
        keep = [s for s in range(t0) if s != t]
        a = x0[:, keep]
        shift = a.mean(axis=0)
        a = a - shift
        b = x1[keep] - shift
        w = _pgd_simplex(b, a, zeta=zeta, iters=300_000, tol=tol)
        gap = b - a.T @ w
        adj = a @ np.linalg.solve(a.T @ a + lam * np.eye(len(keep)), gap)
        pred = float((w + adj) @ x0[:, t])
        out.append((float(x1[t]) - pred) ** 2)
    return np.array(out)


def _pgd_simplex(x1, x0, zeta, iters, tol):
    n0 = x0.shape[0]
    w = np.full(n0, 1.0 / n0)
    lips = 2.0 * (float(np.linalg.norm(x0, 2)) ** 2 + zeta)
    step = 1.0 / lips
    for _ in range(iters):
        g = -2.0 * (x0 @ (x1 - x0.T @ w)) + 2.0 * zeta * w
        w_new = _proj_simplex_sort(w - step * g)
        if np.linalg.norm(w_new - w) < tol * step:
            return w_new
        w = w_new
    return w


def _proj_simplex_sort(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.shape[0] + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def conformal_p_rebuild(panel_outcomes, treated_index, t0, tau0, lam, post_period=0):
    """Conformal p-value rebuilt from scratch for the augmented estimator.

    Builds the tau0-adjusted augmented panel explicitly, solves the SCM
    weights with the plain projected-gradient solver, augments with a
    dense solve, and ranks the residuals.
    """
    donors = [i for i in range(panel_outcomes.shape[0]) if i != treated_index]
    x1 = panel_outcomes[treated_index, :t0]
    x0 = panel_outcomes[donors, :t0]
    y1 = panel_outcomes[treated_index, t0 + post_period]
    y0 = panel_outcomes[donors, t0 + post_period]
    x1a = np.concatenate([x1, [y1 - tau0]])
    x0a = np.hstack([x0, y0[:, None]])
    shift = x0a.mean(axis=0)
    x0a = x0a - shift
    x1a = x1a - shift
    w = _pgd_simplex(x1a, x0a, zeta=1e-10, iters=400_000, tol=1e-10)
    gap = x1a - x0a.T @ w
    adj = x0a @ np.linalg.solve(x0a.T @ x0a + lam * np.eye(t0 + 1), gap)
    g = w + adj
    resid = x1a - x0a.T @ g
    pre = np.abs(resid[:-1])
    post = abs(resid[-1])
    return (int(np.sum(post <= pre)) + 1) / (t0 + 1)
