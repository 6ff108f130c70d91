"""Brute-force reference minimizer for small transport instances.

Exhaustive per-coordinate grid search with iterative zoom refinement.
The objective is evaluated by its own code here, on purpose: this
module is the independent check on the solver, so it must not share
the solver's arithmetic. Marginals pinned by rho = inf are eliminated
from the search (the last row/column is completed from the constraint
and candidates with negative completions rejected), which keeps the
search inside the feasible polytope instead of hoping penalties do it.

Only tiny instances are supported; the point is trustworthiness, not
speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .transport import TransportProblem, FEASIBILITY_TOL

__all__ = ["GridSpec", "grid_minimize", "finite_diff_grad"]

_MAX_CELLS = 6
_NEG_SLACK = 1e-12
_CHUNK = 400_000


@dataclass(frozen=True)
class GridSpec:
    """Search geometry: grid points per coordinate and zoom rounds."""

    resolution: int = 21
    refinement_rounds: int = 4
    mass_upper_bound: float | None = None

    def __post_init__(self):
        if self.resolution < 3:
            raise ValueError("resolution must be >= 3")
        if self.refinement_rounds < 1:
            raise ValueError("refinement_rounds must be >= 1")
        if self.mass_upper_bound is not None and not (self.mass_upper_bound > 0):
            raise ValueError("mass_upper_bound must be positive")


def _objective_batch(W, problem):
    """Objective values for a (N, rows, cols) stack of couplings.

    Independent re-statement of the transport objective; pinned sides
    contribute nothing (feasibility is enforced structurally by the
    caller).
    """
    lam = problem.lam
    vals = np.sum(W * problem.cost[None, :, :], axis=(1, 2))
    logW = np.log(np.where(W > 0, W, 1.0))
    wlogw = np.sum(W * logW, axis=(1, 2))
    both_pinned = math.isinf(problem.rho1) and math.isinf(problem.rho2)
    if both_pinned:
        vals += lam * wlogw
    else:
        vals += lam * (wlogw - np.sum(W, axis=(1, 2)))
    if not math.isinf(problem.rho1):
        a = np.sum(W, axis=2)
        n = problem.row_marginal[None, :]
        cross = np.sum(np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0) / n), 0.0), axis=1)
        vals += problem.rho1 * (cross - a.sum(axis=1) + problem.row_marginal.sum())
    if not math.isinf(problem.rho2):
        b = np.sum(W, axis=1)
        m = problem.col_marginal[None, :]
        cross = np.sum(np.where(b > 0, b * np.log(np.where(b > 0, b, 1.0) / m), 0.0), axis=1)
        vals += problem.rho2 * (cross - b.sum(axis=1) + problem.col_marginal.sum())
    return vals


def _expand(free, problem):
    """Map (N, k) free coordinates to (N, rows, cols) couplings + validity.

    Free coordinates are the cells left after eliminating pinned
    marginals; eliminated cells are completed from the constraints and
    a candidate whose completion goes negative is invalid.
    """
    n = problem.row_marginal
    m = problem.col_marginal
    rows, cols = problem.shape
    N = free.shape[0]
    pin_rows = math.isinf(problem.rho1)
    pin_cols = math.isinf(problem.rho2)
    W = np.zeros((N, rows, cols))
    if pin_rows and pin_cols:
        W[:, : rows - 1, : cols - 1] = free.reshape(N, rows - 1, cols - 1)
        W[:, : rows - 1, cols - 1] = n[None, : rows - 1] - W[:, : rows - 1, : cols - 1].sum(axis=2)
        W[:, rows - 1, :] = m[None, :] - W[:, : rows - 1, :].sum(axis=1)
    elif pin_rows:
        W[:, :, : cols - 1] = free.reshape(N, rows, cols - 1)
        W[:, :, cols - 1] = n[None, :] - W[:, :, : cols - 1].sum(axis=2)
    elif pin_cols:
        W[:, : rows - 1, :] = free.reshape(N, rows - 1, cols)
        W[:, rows - 1, :] = m[None, :] - W[:, : rows - 1, :].sum(axis=1)
    else:
        W = free.reshape(N, rows, cols).copy()
    valid = np.all(W >= -_NEG_SLACK, axis=(1, 2))
    np.clip(W, 0.0, None, out=W)
    return W, valid


def _free_layout(problem, spec):
    """Number of free coordinates and their initial [0, hi] boxes."""
    n = problem.row_marginal
    m = problem.col_marginal
    rows, cols = problem.shape
    pin_rows = math.isinf(problem.rho1)
    pin_cols = math.isinf(problem.rho2)
    if pin_rows and pin_cols:
        hi = np.minimum.outer(n[: rows - 1], m[: cols - 1]).ravel()
    elif pin_rows:
        hi = np.repeat(n, cols - 1)
    elif pin_cols:
        hi = np.tile(m, rows - 1)
    else:
        ub = spec.mass_upper_bound
        if ub is None:
            ub = 2.0 * max(float(n.sum()), float(m.sum()))
        hi = np.full(rows * cols, ub)
    return hi


def _seed_couplings(problem):
    n = problem.row_marginal
    m = problem.col_marginal
    pin_rows = math.isinf(problem.rho1)
    pin_cols = math.isinf(problem.rho2)
    seeds = []
    if pin_rows and pin_cols:
        seeds.append(np.outer(n, m) / float(n.sum()))
    elif pin_rows:
        seeds.append(np.outer(n, m / float(m.sum())))
    elif pin_cols:
        seeds.append(np.outer(n / float(n.sum()), m))
    else:
        seeds.append(np.zeros(problem.shape))
        seeds.append(np.outer(n, m) / max(float(n.sum()), float(m.sum())))
    return seeds


def _free_of(W, problem):
    rows, cols = problem.shape
    pin_rows = math.isinf(problem.rho1)
    pin_cols = math.isinf(problem.rho2)
    if pin_rows and pin_cols:
        return W[: rows - 1, : cols - 1].ravel()
    if pin_rows:
        return W[:, : cols - 1].ravel()
    if pin_cols:
        return W[: rows - 1, :].ravel()
    return W.ravel()


def grid_minimize(problem: TransportProblem, spec: GridSpec | None = None):
    """Exhaustively minimise the transport objective on a refined grid.

    Returns (coupling, value). Instances with more than 6 free
    coordinates (after pinned marginals eliminate what they determine)
    are refused; the exhaustive search would be meaningless there.
    """
    if spec is None:
        spec = GridSpec()
    if math.isinf(problem.rho1) and math.isinf(problem.rho2):
        mass_gap = abs(float(problem.row_marginal.sum()) - float(problem.col_marginal.sum()))
        if mass_gap > FEASIBILITY_TOL:
            raise ValueError("marginal mass mismatch: no feasible coupling")

    hi0 = _free_layout(problem, spec)
    k = hi0.size
    # tractability cap counts coordinates actually searched, i.e. the
    # cells left after pinned marginals eliminate rows/columns
    if k > _MAX_CELLS:
        raise ValueError(
            f"oracle cap exceeded: {k} free coordinates, limit {_MAX_CELLS}"
        )

    best_W = None
    best_val = math.inf
    for seed in _seed_couplings(problem):
        val = float(_objective_batch(seed[None], problem)[0])
        if val < best_val:
            best_val = val
            best_W = seed.copy()

    if k == 0:
        # fully determined by the pinned marginals
        W, valid = _expand(np.zeros((1, 0)), problem)
        if not valid[0]:
            raise ValueError("marginal mass mismatch: no feasible coupling")
        return W[0], float(_objective_batch(W, problem)[0])

    lo = np.zeros(k)
    hi = hi0.copy()
    res = spec.resolution
    for _ in range(spec.refinement_rounds):
        grids = [np.linspace(lo[i], hi[i], res) for i in range(k)]
        total = res ** k
        round_best_val = math.inf
        round_best_free = None
        for start in range(0, total, _CHUNK):
            idx = np.arange(start, min(start + _CHUNK, total))
            coords = np.unravel_index(idx, (res,) * k)
            pts = np.stack([grids[i][coords[i]] for i in range(k)], axis=1)
            W, valid = _expand(pts, problem)
            vals = _objective_batch(W, problem)
            vals[~valid] = math.inf
            j = int(np.argmin(vals))
            if vals[j] < round_best_val:
                round_best_val = float(vals[j])
                round_best_free = pts[j].copy()
        if round_best_val < best_val:
            best_val = round_best_val
            best_W = _expand(round_best_free[None], problem)[0][0]
        # zoom toward the incumbent; clip to the original box
        center = _free_of(best_W, problem)
        step = (hi - lo) / (res - 1)
        lo = np.clip(center - 2.0 * step, 0.0, hi0)
        hi = np.clip(center + 2.0 * step, 0.0, hi0)

    return best_W, best_val


def finite_diff_grad(f, x, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    `x` is flattened coordinate-wise; `f` must accept arrays of the
    same shape as `x`.
    """
    x = np.asarray(x, dtype=np.float64)
    if not (step > 0):
        raise ValueError("step must be positive")
    g = np.zeros(x.size)
    flat = x.ravel()
    for i in range(flat.size):
        xp = flat.copy(); xp[i] += step
        xm = flat.copy(); xm[i] -= step
        fp = f(xp.reshape(x.shape))
        fm = f(xm.reshape(x.shape))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * step)
    return g.reshape(x.shape)
