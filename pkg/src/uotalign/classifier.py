"""Alignment scoring and classification on top of the transport solver.

A sample is a set of M local visual embeddings with per-token masses; a
class is represented by two prompt paths (class-specific and
domain-shared, see prompts). Each path yields a cost matrix
C = 1 - cos(prompt rows, visual rows) and a transport problem whose
source marginal is uniform over the prompts and whose target marginal
is the token weights. The class score is the weighted sum of the two
transported costs <W*, C>; classification is a softmax over (1 - d)/tau
across classes.

The reported distance is deliberately the transported-cost component,
not the full regularized objective: it stays inside [0, 2] * mass, so
1 - d is a bounded similarity and the temperature keeps its usual
meaning. Entropy and KL penalty terms still shape W* through the
solve, they just do not enter the score.

Solver failures never produce silent NaN scores: score() re-raises
them tagged with the class and path that was being solved.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .features import FeatureSet
from .numerics import as_matrix, as_vector, cosine_matrix, logsumexp
from .prompts import FrozenEncoder, PromptBank, build_class_embeddings
from .transport import (
    INF,
    NumericalBlowupError,
    SolverConfig,
    TransportPlan,
    TransportProblem,
    solve_uot,
)

__all__ = [
    "ClassifierConfig",
    "AlignmentScore",
    "cost_matrix",
    "cost_matrix_backward",
    "prompt_marginal",
    "score",
    "likelihood",
    "ce_loss",
    "zero_shot_likelihood",
]

_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class ClassifierConfig:
    """Temperature, path weights and solver parameters for scoring.

    use_uot=False replaces the unbalanced solves by balanced entropic
    transport (both marginals pinned), which is the "plain OT" ablation.
    A path weight of exactly 0 disables that path entirely: no solve is
    run and its plan slot stays None. At least one weight must be
    positive.
    """

    tau: float = 0.01
    gamma_cs: float = 0.5
    gamma_ds: float = 0.5
    lam: float = 0.01
    rho1: float = INF
    rho2: float = 0.04
    use_uot: bool = True

    def __post_init__(self):
        if not (self.tau > 0):
            raise ValueError("tau must be positive")
        if self.gamma_cs < 0 or self.gamma_ds < 0:
            raise ValueError("path weights must be nonnegative")
        if self.gamma_cs == 0 and self.gamma_ds == 0:
            raise ValueError("at least one path weight must be positive")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be positive and finite")
        for name, rho in (("rho1", self.rho1), ("rho2", self.rho2)):
            if not (rho > 0):
                raise ValueError(f"{name} must be positive (or INF)")


@dataclass
class AlignmentScore:
    """Per-class alignment result: both path distances and their plans.

    d_total = gamma_cs * d_cs + gamma_ds * d_ds by construction. Plans
    are kept at full token width (columns of dropped zero-weight tokens
    are zero) so heatmaps and gradients line up with the sample.
    """

    d_cs: float
    d_ds: float
    d_total: float
    plan_cs: TransportPlan | None
    plan_ds: TransportPlan | None

    @property
    def plans(self) -> tuple[TransportPlan | None, TransportPlan | None]:
        return (self.plan_cs, self.plan_ds)


def cost_matrix(features, prompts) -> np.ndarray:
    """Transport cost between prompt rows and visual rows, 1 - cosine.

    Rows of `prompts` index the source side (one row per prompt), rows
    of `features` the target side, so the result is (P, M). Entries lie
    in [0, 2] up to roundoff. Inputs are expected unit-norm; anything
    else gets a warning because the rest of the pipeline assumes the
    cosine and the dot product agree.
    """
    F = as_matrix(features, "features")
    G = as_matrix(prompts, "prompts")
    C = 1.0 - cosine_matrix(G, F)
    for name, X in (("features", F), ("prompts", G)):
        norms = np.linalg.norm(X, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            warnings.warn(f"cost_matrix: {name} rows are not unit-norm")
    return C


def cost_matrix_backward(features, prompts, upstream) -> np.ndarray:
    """Gradient of <upstream, cost_matrix(features, prompts)> in the prompts.

    The features are data, so only the prompt-side gradient is needed.
    With ghat, fhat the normalized rows, d cos / d g is
    (fhat - cos * ghat) / |g|, and the cost negates it.
    """
    F = as_matrix(features, "features")
    G = as_matrix(prompts, "prompts")
    D = as_matrix(upstream, "upstream")
    if D.shape != (G.shape[0], F.shape[0]):
        raise ValueError(
            f"upstream shape {D.shape} does not match ({G.shape[0]}, {F.shape[0]})"
        )
    nf = np.linalg.norm(F, axis=1)
    ng = np.linalg.norm(G, axis=1)
    if np.any(nf < 1e-300) or np.any(ng < 1e-300):
        raise ValueError("degenerate embedding: zero-norm row")
    Fh = F / nf[:, None]
    Gh = G / ng[:, None]
    cos = Gh @ Fh.T
    term1 = D @ Fh
    term2 = np.sum(D * cos, axis=1)[:, None] * Gh
    return -(term1 - term2) / ng[:, None]


def prompt_marginal(num_prompts: int) -> np.ndarray:
    """Uniform source marginal over the prompt rows, total mass 1."""
    if num_prompts < 1:
        raise ValueError("need at least one prompt")
    return np.full(num_prompts, 1.0 / num_prompts)


def _solve_path(G, F, w, cfg: ClassifierConfig, solver, class_id, tag):
    C = cost_matrix(F, G)
    rho1, rho2 = (cfg.rho1, cfg.rho2) if cfg.use_uot else (INF, INF)
    problem = TransportProblem(cost=C, row_marginal=prompt_marginal(G.shape[0]),
                               col_marginal=w, lam=cfg.lam, rho1=rho1, rho2=rho2)
    try:
        plan = solve_uot(problem, solver)
    except (NumericalBlowupError, ValueError) as e:
        raise type(e)(f"class {class_id!r}, {tag} path: {e}") from e
    return float(np.sum(plan.coupling * C)), plan


def score(fs: FeatureSet, class_id: str, bank: PromptBank,
          encoder: FrozenEncoder, cfg: ClassifierConfig,
          solver: SolverConfig | None = None) -> AlignmentScore:
    """Alignment of one sample against one class, both prompt paths.

    Tokens whose weight is exactly zero (dropout leftovers) carry no
    mass and would break the positive-marginal requirement, so the
    solve runs on the surviving columns and the plan is re-embedded at
    full width afterwards; zero columns get zero coupling and a -inf
    column potential, which is their exact log-domain limit.
    """
    g_ds, g_cs = build_class_embeddings(bank, class_id, encoder)
    active = fs.weights > 0
    F = fs.features[active]
    w = fs.weights[active]

    out = {}
    for tag, G, gamma in (("cs", g_cs, cfg.gamma_cs), ("ds", g_ds, cfg.gamma_ds)):
        if gamma == 0.0:
            out[tag] = (0.0, None)
            continue
        d, plan = _solve_path(G, F, w, cfg, solver, class_id, tag)
        if not active.all():
            W = np.zeros((G.shape[0], fs.num_tokens))
            W[:, active] = plan.coupling
            v = np.full(fs.num_tokens, -np.inf)
            v[active] = plan.v
            plan = replace(plan, coupling=W, v=v)
        out[tag] = (d, plan)

    d_cs, plan_cs = out["cs"]
    d_ds, plan_ds = out["ds"]
    return AlignmentScore(d_cs=d_cs, d_ds=d_ds,
                          d_total=cfg.gamma_cs * d_cs + cfg.gamma_ds * d_ds,
                          plan_cs=plan_cs, plan_ds=plan_ds)


def likelihood(scores, tau: float) -> np.ndarray:
    """Class probabilities: softmax of (1 - d_i) / tau over classes.

    Stable for any score magnitude via logsumexp, and invariant to a
    common shift of all scores.
    """
    d = as_vector(scores, "scores")
    if not (tau > 0):
        raise ValueError("tau must be positive")
    z = (1.0 - d) / tau
    return np.exp(z - logsumexp(z))


def ce_loss(probs, labels) -> float:
    """Mean negative log-likelihood of one-hot labels under probs.

    probs rows must already be probability vectors (likelihood output).
    A true-class probability of zero is clamped at 1e-300 with a
    warning instead of producing inf, so a catastrophically wrong batch
    still yields a finite, comparable loss.
    """
    P = as_matrix(probs, "probs")
    Y = as_matrix(labels, "labels")
    if P.shape != Y.shape:
        raise ValueError(f"probs shape {P.shape} does not match labels {Y.shape}")
    if not np.all((Y == 0.0) | (Y == 1.0)) or np.any(Y.sum(axis=1) != 1.0):
        raise ValueError("labels must be one-hot rows")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probs rows must sum to 1")
    p_true = np.sum(P * Y, axis=1)
    if np.any(p_true < 1e-300):
        warnings.warn("ce_loss: true-class probability clamped at 1e-300")
        p_true = np.maximum(p_true, 1e-300)
    return float(-np.mean(np.log(p_true)))


def zero_shot_likelihood(f_global, class_embeddings, tau: float) -> np.ndarray:
    """Cosine-similarity softmax baseline over a single global feature.

    The no-transport counterpart of likelihood(): one embedding per
    class, one pooled feature per sample, P(c) = softmax(cos / tau).
    """
    f = as_vector(f_global, "f_global")
    E = as_matrix(class_embeddings, "class_embeddings")
    if not (tau > 0):
        raise ValueError("tau must be positive")
    if abs(float(np.linalg.norm(f)) - 1.0) > _UNIT_TOL or np.any(
            np.abs(np.linalg.norm(E, axis=1) - 1.0) > _UNIT_TOL):
        warnings.warn("zero_shot_likelihood: inputs are not unit-norm")
    sims = cosine_matrix(E, f[None, :])[:, 0]
    z = sims / tau
    return np.exp(z - logsumexp(z))
