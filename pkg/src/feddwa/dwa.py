"""Dynamic weight adjustment: guidance models and per-client aggregation weights.

The server turns each client's guidance model into a row of aggregation
weights by inverting squared distances to the collected client models:

    p_j = d_j^-1 / sum_k d_k^-1,   d_j = ||guidance_i - model_j||^2

which is the unique minimizer of sum_j p_j^2 d_j on the probability simplex.
`oracle_solve_full` keeps the unsimplified quadratic program (full cross
-distance matrix) around as an independent check; it is diagnostic-only and
never on the training path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import fedcore
from .errors import SolverError
from .models import ModelSpec, grad
from .numkit import ParamVector, axpy, sq_dist, weighted_sum

log = logging.getLogger(__name__)

ONE_STEP_AHEAD = "one_step_ahead"
LAST_ITERATION = "last_iteration"
CURRENT = "current"

# Relative floor applied to near-zero squared distances before inversion.
ZERO_CLAMP_RATIO = 1e-12


@dataclass(frozen=True)
class GuidanceConfig:
    """How each client derives the guidance model it uploads."""

    mode: str = ONE_STEP_AHEAD
    adapt_steps: int = 1
    adapt_batch: str = "full"

    def __post_init__(self):
        if self.mode not in (ONE_STEP_AHEAD, LAST_ITERATION, CURRENT):
            raise SolverError(f"unknown guidance mode {self.mode!r}")
        if self.adapt_steps < 1:
            raise SolverError("adapt_steps must be >= 1")
        if self.adapt_batch not in ("full", "minibatch"):
            raise SolverError("adapt_batch must be 'full' or 'minibatch'")


@dataclass(frozen=True)
class WeightMatrix:
    """Row-stochastic aggregation weights for one round (row = aggregating client)."""

    entries: np.ndarray
    round_index: int

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise SolverError("weight matrix must be square")
        if (entries < 0).any():
            raise SolverError("weight matrix entries must be nonnegative")
        if np.abs(entries.sum(axis=1) - 1.0).max() > 1e-9:
            raise SolverError("every weight row must sum to 1")
        object.__setattr__(self, "entries", entries)


@dataclass(frozen=True)
class CrossDistanceMatrix:
    """Gram matrix of guidance-to-model differences for one client."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise SolverError("cross-distance matrix must be square")
        if not np.allclose(matrix, matrix.T, rtol=1e-9, atol=1e-12):
            raise SolverError("cross-distance matrix must be symmetric")
        object.__setattr__(self, "matrix", matrix)


def guidance_model(client: "fedcore.ClientState", trained: ParamVector,
                   cfg: GuidanceConfig, spec: ModelSpec,
                   rng: np.random.Generator | None = None,
                   previous: ParamVector | None = None) -> ParamVector:
    """Produce the guidance model uploaded alongside the trained model.

    One-step-ahead mode takes `adapt_steps` additional epochs beyond local
    training: a full-batch gradient step each by default, or a minibatch
    epoch when `adapt_batch="minibatch"` (consuming `rng`).
    """
    if cfg.mode == CURRENT:
        return trained
    if cfg.mode == LAST_ITERATION:
        if previous is None:
            log.info("client %s has no previous-round model; guidance falls back to current",
                     client.id)
            return trained
        return previous
    current = trained
    for _ in range(cfg.adapt_steps):
        if cfg.adapt_batch == "full":
            current = axpy(-client.lr, grad(current, client.train, spec), current)
        else:
            if rng is None:
                raise SolverError("minibatch guidance adaptation needs an rng")
            current = fedcore.local_train(client, current, spec, rng, epochs=1)
    return current


def compute_weights(guidance_i: ParamVector, models) -> list[float]:
    """Inverse-squared-distance weights, normalized onto the simplex.

    Exactly-zero distances (identical vectors) take the whole row, split
    uniformly; otherwise distances are floored at ZERO_CLAMP_RATIO times the
    row mean before inversion so a near-converged neighbor cannot blow up.
    """
    models = list(models)
    if not models:
        raise SolverError("compute_weights needs at least one model")
    dists = [sq_dist(guidance_i, m) for m in models]
    zero_set = [j for j, d in enumerate(dists) if d == 0.0]
    if zero_set:
        share = 1.0 / len(zero_set)
        return [share if j in zero_set else 0.0 for j in range(len(models))]
    floor = ZERO_CLAMP_RATIO * (math.fsum(dists) / len(dists))
    inverses = [1.0 / max(d, floor) for d in dists]
    total = math.fsum(inverses)
    return [v / total for v in inverses]


def top_k(row, k: int) -> list[float]:
    """Keep the k largest weights (ties to the lower id) and renormalize."""
    row = [float(v) for v in row]
    n = len(row)
    if not 1 <= k <= n:
        raise SolverError(f"k must be in [1, {n}], got {k}")
    if k == n:
        return list(row)
    order = sorted(range(n), key=lambda j: (-row[j], j))
    kept = set(order[:k])
    kept_sum = math.fsum(row[j] for j in kept)
    if kept_sum == 0.0:
        raise SolverError("top_k kept only zero weights; input row was not on the simplex")
    return [row[j] / kept_sum if j in kept else 0.0 for j in range(n)]


def aggregate_personalized(weights: WeightMatrix, models) -> list[ParamVector]:
    """Personalized model per row: w_i = sum_j p_ij * model_j."""
    models = list(models)
    if weights.entries.shape[0] != len(models):
        raise SolverError("weight matrix size does not match the model list")
    return [weighted_sum(weights.entries[i], models) for i in range(len(models))]


def cross_distance_matrix(guidance_i: ParamVector, models) -> CrossDistanceMatrix:
    """Full Gram matrix [W]_jk = <guidance - model_j, guidance - model_k>."""
    models = list(models)
    diffs = [guidance_i.values - m.values for m in models]
    n = len(models)
    matrix = np.zeros((n, n))
    for j in range(n):
        for k in range(j, n):
            value = math.fsum((diffs[j] * diffs[k]).tolist())
            matrix[j, k] = value
            matrix[k, j] = value
    return CrossDistanceMatrix(matrix)


def _project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {p : p >= 0, sum p = 1} (sort-based)."""
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u)
    indices = np.arange(1, v.size + 1)
    feasible = u + (1.0 - cumulative) / indices > 0
    rho = int(np.max(indices[feasible]))
    tau = (cumulative[rho - 1] - 1.0) / rho
    return np.maximum(v - tau, 0.0)


def _projected_gradient(matrix: np.ndarray, start: np.ndarray,
                        max_iter: int = 20000, tol: float = 1e-14) -> np.ndarray:
    eigenvalues = np.linalg.eigvalsh(matrix)
    lipschitz = 2.0 * max(float(eigenvalues[-1]), 1e-12)
    step = 1.0 / lipschitz
    p = start.copy()
    for _ in range(max_iter):
        nxt = _project_to_simplex(p - step * 2.0 * (matrix @ p))
        if np.abs(nxt - p).max() <= tol:
            return nxt
        p = nxt
    return p


def _active_set_polish(matrix: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Resolve the QP exactly on the support found by projected gradient."""
    support = np.flatnonzero(p > 1e-12)
    if support.size == 0:
        return p
    sub = matrix[np.ix_(support, support)]
    try:
        solved = np.linalg.solve(sub, np.ones(support.size))
    except np.linalg.LinAlgError:
        return p
    denom = solved.sum()
    if denom == 0:
        return p
    candidate_support = solved / denom
    if (candidate_support < -1e-12).any():
        return p
    candidate = np.zeros_like(p)
    candidate[support] = np.maximum(candidate_support, 0.0)
    candidate /= candidate.sum()
    gradient = 2.0 * (matrix @ candidate)
    lam = gradient[support].min()
    if (gradient >= lam - 1e-9 * max(1.0, abs(lam))).all():
        return candidate
    return p


def oracle_solve_full(cross: CrossDistanceMatrix) -> tuple[np.ndarray, bool]:
    """Minimize p' W p on the simplex; flag whether the minimizer is unique.

    Runs projected gradient descent from the uniform point, every vertex, and
    a few fixed random interior points; disagreeing minimizers at equal
    objective mark the problem non-unique (rank-deficient W). When W is
    invertible and the closed form W^-1 1 / (1' W^-1 1) is feasible, that
    exact solution is returned.
    """
    matrix = cross.matrix
    n = matrix.shape[0]
    eigenvalues = np.linalg.eigvalsh(matrix)
    scale = max(float(np.abs(eigenvalues).max()), 1.0)
    if float(eigenvalues[0]) < -1e-8 * scale:
        raise SolverError("cross-distance matrix is indefinite beyond tolerance")

    def objective(p: np.ndarray) -> float:
        return float(p @ matrix @ p)

    starts = [np.full(n, 1.0 / n)]
    starts.extend(np.eye(n)[k] for k in range(n))
    fixed = np.random.default_rng(2024)  # fixed seed: the oracle must be deterministic
    starts.extend(fixed.dirichlet(np.ones(n)) for _ in range(3))

    minimizers = []
    for start in starts:
        p = _projected_gradient(matrix, np.asarray(start, dtype=np.float64))
        p = _active_set_polish(matrix, p)
        minimizers.append(p)

    closed_form = None
    if n >= 1 and float(eigenvalues[0]) > 1e-12 * scale:
        try:
            solved = np.linalg.solve(matrix, np.ones(n))
            denom = solved.sum()
            if denom != 0:
                candidate = solved / denom
                if (candidate >= -1e-12).all():
                    candidate = np.maximum(candidate, 0.0)
                    candidate /= candidate.sum()
                    closed_form = candidate
        except np.linalg.LinAlgError:
            closed_form = None
    if closed_form is not None:
        minimizers.append(closed_form)

    objectives = [objective(p) for p in minimizers]
    best_index = int(np.argmin(objectives))
    best_value = objectives[best_index]
    threshold = best_value + 1e-10 * max(1.0, abs(best_value))
    optimal = [p for p, v in zip(minimizers, objectives) if v <= threshold]
    unique = True
    for a in optimal:
        for b in optimal:
            if float(np.linalg.norm(a - b)) > 1e-6:
                unique = False
    solution = closed_form if closed_form is not None else minimizers[best_index]
    return solution, unique


def decompose_distance(trained_i: ParamVector, guidance_step: float,
                       grad_i: ParamVector, model_j: ParamVector) -> tuple[float, float, float]:
    """Exact three-term expansion of ||trained - eta*grad - model_j||^2.

    Returns (||trained - model||^2, 2*eta*<model - trained, grad>,
    eta^2*||grad||^2); the sum equals the squared distance identically.
    """
    diff = trained_i.values - model_j.values
    term1 = math.fsum((diff * diff).tolist())
    term2 = 2.0 * guidance_step * math.fsum((-diff * grad_i.values).tolist())
    term3 = guidance_step * guidance_step * math.fsum(
        (grad_i.values * grad_i.values).tolist()
    )
    return term1, term2, term3
