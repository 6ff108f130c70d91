"""Entropic optimal transport, balanced and unbalanced, in dual form.

The solver alternates closed-form updates of the dual potentials (u, v)
of the regularized problem

    min_{W >= 0}  <W, C> + lam * sum(W log W - W)
                  + rho1 * KL(W 1 | n) + rho2 * KL(W^T 1 | m)

where KL is the generalized divergence (see numerics.generalized_kl)
and a marginal with rho = inf is pinned exactly instead of penalised.
Each half-step is an exact block minimization of the dual

    lam * sum exp((u_i + v_j - C_ij) / lam)
      + rho1 * <exp(-u/rho1), n> + rho2 * <exp(-v/rho2), m>

so the dual value is nonincreasing along the iteration. With both
rho = inf the update factor collapses to lam and the scheme is the
classic balanced Sinkhorn in log domain; the stored objective value in
that case is the conventional <W, C> - lam * H(W), which differs from
the expression above only by lam * mass(W), a constant on the feasible
set.

All marginal sums are taken in log space (row/column logsumexp of
(u + v - C) / lam), so small lam does not underflow: a sum below
1e-300 is clamped and flagged rather than crashing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, as_vector, entropy, generalized_kl, logsumexp_axis

__all__ = [
    "INF",
    "FEASIBILITY_TOL",
    "NumericalBlowupError",
    "SolverConfig",
    "TransportProblem",
    "TransportPlan",
    "solve_uot",
    "solve_uot_batch",
    "solve_entropic_ot",
    "recover_coupling",
    "uot_primal_value",
    "dual_value",
    "gradient_wrt_cost",
]

INF = math.inf

# L1 tolerance for treating a pinned marginal as satisfied.
FEASIBILITY_TOL = 1e-6

# floor applied to marginal sums before taking logs
_CLAMP = 1e-300
_LOG_CLAMP = math.log(_CLAMP)

# log-coupling ceiling: exp beyond this overflows float64
_LOG_HUGE = 709.0


class NumericalBlowupError(RuntimeError):
    """Raised when potentials or the recovered coupling leave float range."""


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 2000
    dual_tolerance: float = 1e-9
    track_dual_trajectory: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.dual_tolerance > 0):
            raise ValueError("dual_tolerance must be positive")


@dataclass
class TransportProblem:
    """One transport instance: cost matrix, marginals, regularization.

    rho1/rho2 control how strongly the row/column marginals are
    enforced; INF pins the corresponding marginal exactly.
    """

    cost: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    lam: float = 0.1
    rho1: float = INF
    rho2: float = INF

    def __post_init__(self):
        self.cost = as_matrix(self.cost, "cost")
        self.row_marginal = as_vector(self.row_marginal, "row_marginal")
        self.col_marginal = as_vector(self.col_marginal, "col_marginal")
        n_rows, n_cols = self.cost.shape
        if self.row_marginal.shape != (n_rows,):
            raise ValueError(
                f"row_marginal has length {self.row_marginal.shape[0]}, expected {n_rows}"
            )
        if self.col_marginal.shape != (n_cols,):
            raise ValueError(
                f"col_marginal has length {self.col_marginal.shape[0]}, expected {n_cols}"
            )
        if np.any(self.row_marginal <= 0) or np.any(self.col_marginal <= 0):
            raise ValueError("zero marginal mass: marginals must be strictly positive")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be positive and finite")
        for name, rho in (("rho1", self.rho1), ("rho2", self.rho2)):
            if not (rho > 0):
                raise ValueError(f"{name} must be positive (or INF)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.cost.shape


@dataclass
class TransportPlan:
    """Solver output: coupling, potentials and diagnostics."""

    coupling: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iterations: int
    converged: bool
    primal_value: float
    clamped: bool = False
    error: str | None = None
    dual_trajectory: np.ndarray | None = None


def _factor(lam: float, rho: float) -> float:
    # prox step size of the penalised marginal update; lam when pinned
    if math.isinf(rho):
        return lam
    return lam * rho / (lam + rho)


def recover_coupling(u: np.ndarray, v: np.ndarray, cost: np.ndarray, lam: float) -> np.ndarray:
    """Coupling W_ij = exp((u_i + v_j - C_ij) / lam) from dual potentials."""
    with np.errstate(over="ignore"):
        W = np.exp((u[:, None] + v[None, :] - cost) / lam)
    if not np.all(np.isfinite(W)):
        raise NumericalBlowupError("numerical blowup: coupling overflow for this lam")
    return W


def uot_primal_value(W, problem: TransportProblem) -> float:
    """Objective value of a candidate coupling for `problem`.

    Finite-rho marginals contribute their generalized KL penalty; a
    pinned (rho = INF) marginal contributes nothing but must hold to
    within FEASIBILITY_TOL in L1, otherwise this raises. The entropy
    term is <W, C> - lam*H(W) when both marginals are pinned and the
    generalized form lam*sum(W log W - W) otherwise; the two agree up
    to a feasible-set constant and each matches what the corresponding
    solver mode actually minimises.
    """
    W = as_matrix(W, "coupling")
    if W.shape != problem.shape:
        raise ValueError(f"coupling shape {W.shape} does not match cost {problem.shape}")
    if np.any(W < 0):
        raise ValueError("negative mass")
    row_sums = W.sum(axis=1)
    col_sums = W.sum(axis=0)
    val = float(np.sum(W * problem.cost)) - problem.lam * entropy(W)
    both_pinned = math.isinf(problem.rho1) and math.isinf(problem.rho2)
    if not both_pinned:
        val -= problem.lam * float(W.sum())
    if math.isinf(problem.rho1):
        if float(np.abs(row_sums - problem.row_marginal).sum()) > FEASIBILITY_TOL:
            raise ValueError("marginal constraint violated: rows")
    else:
        val += problem.rho1 * generalized_kl(row_sums, problem.row_marginal)
    if math.isinf(problem.rho2):
        if float(np.abs(col_sums - problem.col_marginal).sum()) > FEASIBILITY_TOL:
            raise ValueError("marginal constraint violated: columns")
    else:
        val += problem.rho2 * generalized_kl(col_sums, problem.col_marginal)
    return val


def dual_value(u, v, problem: TransportProblem) -> float:
    """Dual objective at (u, v); the solver drives this downward.

    For a pinned marginal the penalty term rho*<exp(-u/rho), n>
    degenerates to its linearization <n - u, n>-style limit; we use the
    standard balanced form -<u, n> plus the constant sum(n) so that the
    identity primal = -dual + rho1*sum(n) + rho2*sum(m) holds uniformly
    in the finite case and primal = lam*mass - dual_balanced in the
    pinned case.
    """
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    n, m = problem.row_marginal, problem.col_marginal
    if u.shape != n.shape or v.shape != m.shape:
        raise ValueError("potential shapes do not match marginals")
    S = (u[:, None] + v[None, :] - problem.cost) / problem.lam
    with np.errstate(over="ignore"):
        val = problem.lam * float(np.sum(np.exp(S)))
        if math.isinf(problem.rho1):
            val -= float(u @ n)
        else:
            val += problem.rho1 * float(np.exp(-u / problem.rho1) @ n)
        if math.isinf(problem.rho2):
            val -= float(v @ m)
        else:
            val += problem.rho2 * float(np.exp(-v / problem.rho2) @ m)
    if not math.isfinite(val):
        raise NumericalBlowupError("numerical blowup: dual value overflow")
    return val


def _primal_from_coupling(W: np.ndarray, problem: TransportProblem) -> float:
    # same expression as uot_primal_value but without feasibility raises,
    # so non-converged plans still report a value
    pos = W > 0
    wlogw = float(np.sum(W[pos] * np.log(W[pos])))
    val = float(np.sum(W * problem.cost)) + problem.lam * wlogw
    both_pinned = math.isinf(problem.rho1) and math.isinf(problem.rho2)
    if not both_pinned:
        val -= problem.lam * float(W.sum())
    if not math.isinf(problem.rho1):
        val += problem.rho1 * generalized_kl(W.sum(axis=1), problem.row_marginal)
    if not math.isinf(problem.rho2):
        val += problem.rho2 * generalized_kl(W.sum(axis=0), problem.col_marginal)
    return val


def _batch_dual_values(S, U, V, N, M, lam, rho1, rho2):
    with np.errstate(over="ignore"):
        vals = lam * np.sum(np.exp(S), axis=(1, 2))
        if math.isinf(rho1):
            vals -= np.sum(U * N, axis=1)
        else:
            vals += rho1 * np.sum(np.exp(-U / rho1) * N, axis=1)
        if math.isinf(rho2):
            vals -= np.sum(V * M, axis=1)
        else:
            vals += rho2 * np.sum(np.exp(-V / rho2) * M, axis=1)
    return vals


def solve_uot_batch(problems: list[TransportProblem], config: SolverConfig | None = None) -> list[TransportPlan]:
    """Solve a batch of same-shape, same-parameter instances together.

    All instances must share (n_rows, n_cols, lam, rho1, rho2); costs
    and marginals may differ. The iteration is vectorised over the
    batch with converged instances frozen in place, so each result is
    identical to an independent single solve. An instance that blows up
    is marked via its plan's `error` field instead of aborting the
    batch.
    """
    if config is None:
        config = SolverConfig()
    if not problems:
        raise ValueError("empty batch")
    p0 = problems[0]
    for p in problems[1:]:
        if p.shape != p0.shape or p.lam != p0.lam or p.rho1 != p0.rho1 or p.rho2 != p0.rho2:
            raise ValueError("batch instances must share shape, lam, rho1 and rho2")
    B = len(problems)
    n_rows, n_cols = p0.shape
    lam, rho1, rho2 = p0.lam, p0.rho1, p0.rho2
    fac1 = _factor(lam, rho1)
    fac2 = _factor(lam, rho2)

    C = np.stack([p.cost for p in problems])
    N = np.stack([p.row_marginal for p in problems])
    M = np.stack([p.col_marginal for p in problems])
    log_n = np.log(N)
    log_m = np.log(M)

    U = np.zeros((B, n_rows))
    V = np.zeros((B, n_cols))
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    clamped = np.zeros(B, dtype=bool)
    failed: list[str | None] = [None] * B
    iterations = np.full(B, config.max_iterations, dtype=int)

    S = (U[:, :, None] + V[:, None, :] - C) / lam
    trajectory = None
    if config.track_dual_trajectory:
        trajectory = [_batch_dual_values(S, U, V, N, M, lam, rho1, rho2)]

    for k in range(config.max_iterations):
        log_nk = logsumexp_axis(S, axis=2)
        low = log_nk < _LOG_CLAMP
        if low.any():
            clamped |= low.any(axis=1)
            log_nk = np.maximum(log_nk, _LOG_CLAMP)
        U_new = (U / lam + log_n - log_nk) * fac1

        S2 = (U_new[:, :, None] + V[:, None, :] - C) / lam
        log_mk = logsumexp_axis(S2, axis=1)
        low = log_mk < _LOG_CLAMP
        if low.any():
            clamped |= low.any(axis=1)
            log_mk = np.maximum(log_mk, _LOG_CLAMP)
        V_new = (V / lam + log_m - log_mk) * fac2

        du = np.max(np.abs(U_new - U), axis=1)
        dv = np.max(np.abs(V_new - V), axis=1)
        U[active] = U_new[active]
        V[active] = V_new[active]
        S = (U[:, :, None] + V[:, None, :] - C) / lam

        # an instance whose coupling would leave float range is dead even
        # though the log-domain iteration itself stays finite
        max_log = np.max(S, axis=(1, 2))
        bad = active & (
            (max_log > _LOG_HUGE)
            | ~np.all(np.isfinite(U), axis=1)
            | ~np.all(np.isfinite(V), axis=1)
        )
        for b in np.nonzero(bad)[0]:
            failed[b] = f"numerical blowup at iteration {k + 1}"
            iterations[b] = k + 1
        active &= ~bad

        done = active & (du < config.dual_tolerance) & (dv < config.dual_tolerance)
        converged |= done
        iterations[done] = k + 1
        active &= ~done

        if trajectory is not None:
            trajectory.append(_batch_dual_values(S, U, V, N, M, lam, rho1, rho2))
        if not active.any():
            break

    traj_arr = np.stack(trajectory, axis=1) if trajectory is not None else None

    plans = []
    for b, p in enumerate(problems):
        if failed[b] is not None:
            plans.append(TransportPlan(
                coupling=np.full(p.shape, np.nan),
                u=U[b].copy(), v=V[b].copy(),
                iterations=int(iterations[b]), converged=False,
                primal_value=math.nan, clamped=bool(clamped[b]),
                error=failed[b],
                dual_trajectory=traj_arr[b].copy() if traj_arr is not None else None,
            ))
            continue
        try:
            W = recover_coupling(U[b], V[b], p.cost, lam)
        except NumericalBlowupError as e:
            plans.append(TransportPlan(
                coupling=np.full(p.shape, np.nan),
                u=U[b].copy(), v=V[b].copy(),
                iterations=int(iterations[b]), converged=False,
                primal_value=math.nan, clamped=bool(clamped[b]),
                error=str(e),
                dual_trajectory=traj_arr[b].copy() if traj_arr is not None else None,
            ))
            continue
        plans.append(TransportPlan(
            coupling=W,
            u=U[b].copy(), v=V[b].copy(),
            iterations=int(iterations[b]), converged=bool(converged[b]),
            primal_value=_primal_from_coupling(W, p), clamped=bool(clamped[b]),
            dual_trajectory=traj_arr[b].copy() if traj_arr is not None else None,
        ))
    return plans


def solve_uot(problem: TransportProblem, config: SolverConfig | None = None) -> TransportPlan:
    """Solve one instance; raises NumericalBlowupError instead of marking it."""
    plan = solve_uot_batch([problem], config)[0]
    if plan.error is not None:
        raise NumericalBlowupError(plan.error)
    return plan


def solve_entropic_ot(cost, row_marginal, col_marginal, lam: float,
                      config: SolverConfig | None = None) -> TransportPlan:
    """Balanced entropic transport: both marginals pinned exactly.

    Requires equal total mass on the two marginals; delegates to the
    unbalanced solver with rho1 = rho2 = INF.
    """
    n = as_vector(row_marginal, "row_marginal")
    m = as_vector(col_marginal, "col_marginal")
    if abs(float(n.sum()) - float(m.sum())) > 1e-9:
        raise ValueError(
            f"marginal mass mismatch: {n.sum():.12g} vs {m.sum():.12g}"
        )
    problem = TransportProblem(cost=cost, row_marginal=n, col_marginal=m,
                               lam=lam, rho1=INF, rho2=INF)
    return solve_uot(problem, config)


def gradient_wrt_cost(plan: TransportPlan) -> np.ndarray:
    """Gradient of the optimal objective value with respect to the cost.

    By the envelope argument this is just the optimal coupling, with
    the potentials held fixed at the optimum. Only meaningful on a
    converged plan.
    """
    if not plan.converged:
        raise ValueError("gradient at non-optimum: plan did not converge")
    return plan.coupling.copy()
