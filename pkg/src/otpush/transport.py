"""Entropic optimal transport and the alignment losses built on it.

The Sinkhorn solver runs in the log domain so small regularization
strengths stay stable in float64. The regularization strength epsilon is
conventionally expressed through a length-scale ``blur`` with
``epsilon = blur**2`` on squared-distance costs; see ``blur_to_epsilon``.

The joint loss treats the converged plan and the DTW pairing as
constants: the gradient of ``sum_ij T_ij * Ctilde_ij`` with respect to a
latent flows only through the cost entries.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import dtw as dtw_mod
from .numkit import ContractError, ShapeError

SINKHORN_MAX_ITERS = 200
SINKHORN_TOL = 1e-6
EXACT_OT_MAX_N = 8


def blur_to_epsilon(blur: float) -> float:
    """Map the blur length scale to the entropic strength on squared costs."""
    if blur <= 0:
        raise ContractError(f"blur must be positive, got {blur}")
    return float(blur) ** 2


@dataclass
class TransportPlan:
    """A (possibly partially converged) entropic coupling."""

    matrix: np.ndarray
    epsilon: float
    iterations_used: int
    marginal_residual: float
    converged: bool


def transport_cost(plan: TransportPlan, cost: np.ndarray) -> float:
    return float(np.sum(plan.matrix * cost))


@dataclass
class ShapedCost:
    """Latent distances with the DTW-matched cells discounted by lambda."""

    base: np.ndarray
    shaped: np.ndarray
    lam: float
    pairs: dtw_mod.PseudoPairAssignment


def latent_sq_dist(z_h: np.ndarray, z_r: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between latent batches."""
    z_h = np.asarray(z_h, dtype=np.float64)
    z_r = np.asarray(z_r, dtype=np.float64)
    if z_h.ndim != 2 or z_r.ndim != 2 or z_h.shape[1] != z_r.shape[1]:
        raise ShapeError(f"latent batches {z_h.shape} vs {z_r.shape}")
    diff = z_h[:, None, :] - z_r[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def shape_cost(base: np.ndarray, pairs: dtw_mod.PseudoPairAssignment, lam: float) -> ShapedCost:
    """Discount the pseudo-paired cell of each column by lambda, in (0, 1)."""
    if not 0.0 < lam < 1.0:
        raise ContractError(f"lambda must be in (0, 1), got {lam}")
    base = np.asarray(base, dtype=np.float64)
    if pairs.pair_index.shape[0] != base.shape[1]:
        raise ShapeError(
            f"{pairs.pair_index.shape[0]} pair indices for {base.shape[1]} columns"
        )
    shaped = base.copy()
    cols = np.arange(base.shape[1])
    shaped[pairs.pair_index, cols] = base[pairs.pair_index, cols] * lam
    return ShapedCost(base=base, shaped=shaped, lam=lam, pairs=pairs)


def discount_weights(shape: tuple[int, int], pairs: dtw_mod.PseudoPairAssignment,
                     lam: float) -> np.ndarray:
    """Matrix of per-cell multipliers: lambda on pseudo-paired cells, 1 elsewhere."""
    w = np.ones(shape)
    w[pairs.pair_index, np.arange(shape[1])] = lam
    return w


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)


def sinkhorn(
    mu_h: np.ndarray,
    mu_r: np.ndarray,
    cost: np.ndarray,
    epsilon: float,
    max_iters: int = SINKHORN_MAX_ITERS,
    tol: float = SINKHORN_TOL,
) -> TransportPlan:
    """Log-domain Sinkhorn fixed point for the entropically regularized coupling.

    Plan entries take the form ``mu_h[i] * mu_r[j] * exp((u_i + v_j - C_ij) / eps)``.
    Iterates until the worst marginal violation falls below ``tol`` or the
    iteration budget runs out; a non-converged plan is returned as-is with
    its residual recorded (callers treat that as a warning, not a failure).
    """
    mu_h = np.asarray(mu_h, dtype=np.float64).reshape(-1)
    mu_r = np.asarray(mu_r, dtype=np.float64).reshape(-1)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (mu_h.size, mu_r.size):
        raise ShapeError(f"cost {cost.shape} vs marginals {mu_h.size} x {mu_r.size}")
    for name, mu in (("mu_h", mu_h), ("mu_r", mu_r)):
        if np.any(mu < 0):
            raise ContractError(f"{name} has negative entries")
        if abs(mu.sum() - 1.0) > 1e-9:
            raise ContractError(f"{name} must sum to 1, got {mu.sum()!r}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")

    with np.errstate(divide="ignore"):
        log_h = np.log(mu_h)
        log_r = np.log(mu_r)
    scaled_cost = cost / epsilon
    u = np.zeros_like(mu_h)  # potentials divided by epsilon
    v = np.zeros_like(mu_r)

    def current_plan() -> np.ndarray:
        return np.exp(u[:, None] + v[None, :] - scaled_cost
                      + log_h[:, None] + log_r[None, :])

    def plan_residual(plan: np.ndarray) -> float:
        return max(
            float(np.max(np.abs(plan.sum(axis=1) - mu_h))),
            float(np.max(np.abs(plan.sum(axis=0) - mu_r))),
        )

    iters = 0
    residual = np.inf
    for iters in range(1, max_iters + 1):
        u = -_logsumexp(v[None, :] - scaled_cost + log_r[None, :], axis=1)
        v = -_logsumexp(u[:, None] - scaled_cost + log_h[:, None], axis=0)
        # the residual needs the full plan; probing it periodically keeps
        # the fixed-point iteration itself cheap
        if iters % 5 == 1 or iters == max_iters:
            residual = plan_residual(current_plan())
            if residual <= tol:
                break
    plan = current_plan()
    residual = plan_residual(plan)
    return TransportPlan(
        matrix=plan,
        epsilon=float(epsilon),
        iterations_used=iters,
        marginal_residual=residual,
        converged=residual <= tol,
    )


def exact_ot(cost: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Exact unregularized OT for uniform equal marginals by permutation search.

    For uniform weights on equally many points an optimal coupling is a
    permutation, so brute force over all N! assignments is exact. Guarded
    at N <= 8; ties resolve to the lexicographically smallest permutation.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ContractError(f"exact_ot needs a square cost, got {cost.shape}")
    n = cost.shape[0]
    if n == 0:
        raise ContractError("empty cost matrix")
    if n > EXACT_OT_MAX_N:
        raise ContractError(f"exact_ot limited to N <= {EXACT_OT_MAX_N}, got {n}")
    rows = np.arange(n)
    best_cost = np.inf
    best_perm: tuple[int, ...] = tuple(rows)
    for perm in itertools.permutations(range(n)):
        c = float(cost[rows, perm].sum()) / n
        if c < best_cost:
            best_cost = c
            best_perm = perm
    return best_cost, best_perm


@dataclass
class JointOtResult:
    """Loss value, latent gradients, and the intermediates used to build them."""

    loss: float
    grad_z_h: np.ndarray
    grad_z_r: np.ndarray
    plan: TransportPlan
    shaped: ShapedCost


def joint_ot_loss(
    z_h: np.ndarray,
    z_r: np.ndarray,
    a_h: np.ndarray,
    a_r: np.ndarray,
    lam: float,
    epsilon: float,
    max_iters: int = SINKHORN_MAX_ITERS,
    tol: float = SINKHORN_TOL,
    pairing: str = "dtw",
) -> JointOtResult:
    """DTW-shaped entropic transport cost between (latent, action) batches.

    Actions drive the pseudo-pairing; latents carry the ground cost. With
    ``pairing="none"`` or ``lam == 1`` the cost is left unshaped
    (marginal alignment); ``"mse"`` swaps DTW for pointwise chunk
    distance. The plan and pairing are constants of the gradient:
    d loss / d Ctilde_ij = T_ij, and the chain rule flows through the
    (possibly discounted) squared distances.
    """
    z_h = np.asarray(z_h, dtype=np.float64)
    z_r = np.asarray(z_r, dtype=np.float64)
    base = latent_sq_dist(z_h, z_r)
    b_h, b_r = base.shape
    if pairing == "none" or lam == 1.0:
        weights = np.ones_like(base)
        shaped_cost_mat = base
        shaped = ShapedCost(
            base=base, shaped=shaped_cost_mat, lam=1.0,
            pairs=dtw_mod.PseudoPairAssignment(
                pair_index=np.zeros(b_r, dtype=np.intp), dtw_costs=np.zeros_like(base)
            ),
        )
    else:
        if pairing == "dtw":
            pair_costs = dtw_mod.dtw_cost_matrix(a_h, a_r)
        elif pairing == "mse":
            pair_costs = dtw_mod.mse_cost_matrix(a_h, a_r)
        else:
            raise ContractError(f"unknown pairing {pairing!r}")
        pairs = dtw_mod.pseudo_pairs(pair_costs)
        shaped = shape_cost(base, pairs, lam)
        shaped_cost_mat = shaped.shaped
        weights = discount_weights(base.shape, pairs, lam)
    mu_h = np.full(b_h, 1.0 / b_h)
    mu_r = np.full(b_r, 1.0 / b_r)
    plan = sinkhorn(mu_h, mu_r, shaped_cost_mat, epsilon, max_iters=max_iters, tol=tol)
    loss = transport_cost(plan, shaped_cost_mat)
    coeff = plan.matrix * weights
    grad_z_h = 2.0 * (z_h * coeff.sum(axis=1, keepdims=True) - coeff @ z_r)
    grad_z_r = 2.0 * (z_r * coeff.sum(axis=0)[:, None] - coeff.T @ z_h)
    return JointOtResult(loss=loss, grad_z_h=grad_z_h, grad_z_r=grad_z_r,
                         plan=plan, shaped=shaped)


def mmd_loss(z_h: np.ndarray, z_r: np.ndarray, sigma: float) -> float:
    """Biased V-statistic MMD^2 with a Gaussian RBF kernel of bandwidth sigma."""
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    z_h = np.asarray(z_h, dtype=np.float64)
    z_r = np.asarray(z_r, dtype=np.float64)
    n, m = z_h.shape[0], z_r.shape[0]
    two_sq = 2.0 * sigma * sigma
    k_hh = np.exp(-latent_sq_dist(z_h, z_h) / two_sq)
    k_rr = np.exp(-latent_sq_dist(z_r, z_r) / two_sq)
    k_hr = np.exp(-latent_sq_dist(z_h, z_r) / two_sq)
    return float(k_hh.sum() / (n * n) + k_rr.sum() / (m * m) - 2.0 * k_hr.sum() / (n * m))


def wasserstein2(
    z_a: np.ndarray,
    z_b: np.ndarray,
    blur: float = 0.01,
    max_points: int = 64,
    seed: int = 0,
    max_iters: int = 5000,
    tol: float = 1e-9,
) -> float:
    """Wasserstein-2 distance between point sets under squared Euclidean cost.

    Sets are reduced to a common size by a deterministic uniform
    subsample of the larger one (each set gets its own seeded draw, so
    the result is symmetric in its arguments). Small instances (N <= 8)
    use the exact permutation solver; larger ones a low-blur Sinkhorn
    cost.
    """
    z_a = np.atleast_2d(np.asarray(z_a, dtype=np.float64))
    z_b = np.atleast_2d(np.asarray(z_b, dtype=np.float64))
    if z_a.shape[0] == 0 or z_b.shape[0] == 0:
        raise ContractError("wasserstein2 needs non-empty sets")
    n = min(z_a.shape[0], z_b.shape[0], max_points)
    z_a = _subsample(z_a, n, np.random.default_rng(seed))
    z_b = _subsample(z_b, n, np.random.default_rng(seed))
    if z_a.tobytes() > z_b.tobytes():  # canonical order: exact argument symmetry
        z_a, z_b = z_b, z_a
    cost = latent_sq_dist(z_a, z_b)
    if n <= EXACT_OT_MAX_N:
        value, _ = exact_ot(cost)
        return float(np.sqrt(value))
    mu = np.full(n, 1.0 / n)
    plan = sinkhorn(mu, mu, cost, blur_to_epsilon(blur), max_iters=max_iters, tol=tol)
    return float(np.sqrt(max(transport_cost(plan, cost), 0.0)))


def _subsample(z: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if z.shape[0] == n:
        return z
    idx = np.sort(rng.choice(z.shape[0], size=n, replace=False))
    return z[idx]
