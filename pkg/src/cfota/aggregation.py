"""Aggregation-error minimization for over-the-air model uploads.

Implements the closed-form conditional MSE of the recovered weighted-sum
parameter, the MMSE receive combiners, the power-constrained transmit
coefficient update from the KKT conditions, and the alternating solver
that couples them, at three AP-cooperation levels plus a cellular
baseline:

* level 3: all AP signals are processed jointly (stacked combiners)
* level 2: identical combiners applied per AP, partial sums forwarded
  (same recovery as level 3, different fronthaul)
* level 1: per-AP combiners built from local estimates only, the
  recovery is a plain average of the per-AP estimates, full power
* cellular: each group is served by a single co-located array.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve


@dataclass(frozen=True)
class AggregationWeights:
    """Per-device and per-group quantities entering the MSE expressions.

    gamma[k] is device k's share of its own group's target (shares in a
    group sum to 1), omega[g] the group priority, nu[k] and theta_bar[k]
    the standard deviation and mean of the parameters device k transmits
    this round (the mean rides on the side channel).
    """

    gamma: np.ndarray      # (K,)
    omega: np.ndarray      # (G,)
    nu: np.ndarray         # (K,)
    theta_bar: np.ndarray  # (K,)


@dataclass(frozen=True)
class OptHistory:
    """Objective trace of one alternating-optimization run.

    values[0] is the weighted sum-MSE at the full-power initialization with
    matched combiners; values[i] the value after full iteration i.  The
    sequence is non-increasing (each half-step is an exact minimization).
    """

    values: np.ndarray
    iterations: int
    terminated_by: str  # "threshold" or "max_iters"


@dataclass(frozen=True)
class Level3Problem:
    """One coherence block seen by the central processor.

    h_hat[k] is device k's stacked estimate over all AP antennas and
    error_cov[k] the block-diagonal error covariance of the stack.
    """

    h_hat: np.ndarray          # (K, LN)
    error_cov: np.ndarray      # (K, LN, LN)
    group_of_device: np.ndarray
    weights: AggregationWeights
    noise_power: float
    power_limit: np.ndarray    # (K,)

    @property
    def n_groups(self):
        return len(self.weights.omega)


@dataclass(frozen=True)
class Level1Problem:
    """One coherence block seen per AP (local estimates only)."""

    h_hat: np.ndarray          # (K, L, N)
    error_cov: np.ndarray      # (K, L, N, N)
    group_of_device: np.ndarray
    weights: AggregationWeights
    noise_power: float
    power_limit: np.ndarray

    @property
    def n_groups(self):
        return len(self.weights.omega)

    @property
    def n_aps(self):
        return self.h_hat.shape[1]


@dataclass(frozen=True)
class CellularProblem:
    """One coherence block seen by the serving base stations.

    h_hat[g, k] is device k's estimate at the BS serving group g; every
    group has its own view of every device.
    """

    h_hat: np.ndarray          # (G, K, M)
    error_cov: np.ndarray      # (G, K, M, M)
    group_of_device: np.ndarray
    weights: AggregationWeights
    noise_power: float
    power_limit: np.ndarray

    @property
    def n_groups(self):
        return len(self.weights.omega)


@dataclass(frozen=True)
class AggregationSolution:
    """Transmit coefficients, combiners, multipliers, and solver history."""

    b: np.ndarray          # (K,) complex
    combiners: np.ndarray  # (G, dim) or (G, L, N)
    mu: np.ndarray         # (K,) KKT multipliers (zeros when no TCO ran)
    history: OptHistory


def stack_for_cpu(h_hat, error_cov):
    """Stack per-AP estimates into the centralized view.

    (K, L, N) estimates become (K, LN); per-AP error covariances become
    block-diagonal (K, LN, LN).
    """
    n_dev, n_aps, n_ant = h_hat.shape
    flat = h_hat.reshape(n_dev, n_aps * n_ant)
    cov = np.stack([block_diag(*error_cov[k]) for k in range(n_dev)])
    return flat, cov


def _target(problem, g):
    """gamma_k nu_k for devices of group g, zero elsewhere."""
    w = problem.weights
    own = problem.group_of_device == g
    return np.where(own, w.gamma * w.nu, 0.0)


def _conditional_mse(h_hat, error_cov, b, v, target, noise_power):
    """Closed-form MSE of one group's recovery, conditioned on estimates.

    ``sum_k |v^H h_hat_k b_k - target_k|^2 + |b_k|^2 v^H C_k v`` plus the
    combined noise power, where target_k is gamma*nu for the group's own
    devices and 0 for interferers.
    """
    proj = h_hat @ v.conj()                      # v^H h_hat_k for all k
    quad = np.einsum("i,kij,j->k", v.conj(), error_cov, v).real
    signal = np.abs(proj * b - target) ** 2
    return float(
        signal.sum()
        + (np.abs(b) ** 2 * quad).sum()
        + noise_power * np.vdot(v, v).real
    )


# ---------------------------------------------------------------------------
# Level 3: fully centralized processing
# ---------------------------------------------------------------------------

def mse_level3(problem, b, v, g):
    """Conditional aggregation MSE of group g under centralized combining."""
    return _conditional_mse(
        problem.h_hat, problem.error_cov, b, v, _target(problem, g),
        problem.noise_power,
    )


def _system_matrix(h_hat, error_cov, b, noise_power):
    """sum_k |b_k|^2 (h_hat_k h_hat_k^H + C_k) + noise_power I, Hermitian."""
    p = np.abs(b) ** 2
    mat = np.einsum("k,ki,kj->ij", p, h_hat, h_hat.conj())
    mat = mat + np.tensordot(p, error_cov, axes=(0, 0))
    mat = mat + noise_power * np.eye(h_hat.shape[1])
    return 0.5 * (mat + mat.conj().T)


def _combiner_rhs(problem, b, g):
    w = problem.weights
    own = problem.group_of_device == g
    coef = np.where(own, w.gamma * b * w.nu, 0.0)
    return problem.h_hat.T @ coef


def combiner_level3(problem, b, g):
    """MMSE-optimal stacked combiner of group g for fixed coefficients.

    Solves the Hermitian positive-definite normal equations; the global
    minimizer of the convex per-group MSE.
    """
    mat = _system_matrix(problem.h_hat, problem.error_cov, b, problem.noise_power)
    return cho_solve(cho_factor(mat), _combiner_rhs(problem, b, g))


def combiners_level3(problem, b):
    """All group combiners at once; the system matrix is factorized once."""
    mat = _system_matrix(problem.h_hat, problem.error_cov, b, problem.noise_power)
    rhs = np.column_stack([_combiner_rhs(problem, b, g) for g in range(problem.n_groups)])
    return cho_solve(cho_factor(mat), rhs).T


def tco_step(problem, combiners, k):
    """Optimal transmit coefficient of device k for fixed combiners.

    Returns (b_k, mu_k) satisfying the stationarity and complementary
    slackness conditions of the power-constrained subproblem:
    |b_k|^2 <= P_k always holds, and mu_k > 0 only on the boundary.
    """
    w = problem.weights
    g = int(problem.group_of_device[k])
    proj = combiners.conj() @ problem.h_hat[k]   # v_p^H h_hat_k, all groups
    quad = np.einsum("pi,ij,pj->p", combiners.conj(), problem.error_cov[k],
                     combiners).real
    denom = float(np.dot(w.omega, np.abs(proj) ** 2 + quad))
    gain = w.omega[g] * w.gamma[k] * w.nu[k]
    mu = max(0.0, gain * abs(proj[g]) / np.sqrt(problem.power_limit[k]) - denom)
    if denom + mu == 0.0:
        return 0.0 + 0.0j, 0.0
    return gain * proj[g].conjugate() / (denom + mu), mu


def weighted_sum_mse_level3(problem, b, combiners):
    return float(sum(
        problem.weights.omega[g] * mse_level3(problem, b, combiners[g], g)
        for g in range(problem.n_groups)
    ))


def _alternate(update_combiners, update_coefficients, objective, b_init,
               eps, max_iters):
    """Block-coordinate descent shared by the level-3 and cellular solvers.

    Each iteration refreshes all combiners, then all coefficients; both are
    exact minimizations, so the recorded objective never increases.  Stops
    once an iteration decreases the objective by less than eps.
    """
    b = np.asarray(b_init, dtype=complex)
    mu = np.zeros(len(b))
    combiners = update_combiners(b)
    prev = objective(b, combiners)
    values = [prev]
    iterations = 0
    terminated_by = "max_iters"
    for it in range(1, max_iters + 1):
        if it > 1:
            combiners = update_combiners(b)
        b, mu = update_coefficients(combiners)
        cur = objective(b, combiners)
        values.append(cur)
        iterations = it
        if prev - cur < eps:
            terminated_by = "threshold"
            break
        prev = cur
    history = OptHistory(np.array(values), iterations, terminated_by)
    return b, combiners, mu, history


def alternating_optimize(problem, eps=1e-10, max_iters=500, b_init=None):
    """Jointly tune level-3 combiners and transmit coefficients.

    Coefficients start at full power ``sqrt(P_k)`` unless b_init is given.
    """
    if b_init is None:
        b_init = np.sqrt(problem.power_limit).astype(complex)

    def coefficients(combiners):
        pairs = [tco_step(problem, combiners, k) for k in range(len(problem.h_hat))]
        return (np.array([p[0] for p in pairs], dtype=complex),
                np.array([p[1] for p in pairs]))

    b, combiners, mu, history = _alternate(
        lambda b: combiners_level3(problem, b),
        coefficients,
        lambda b, v: weighted_sum_mse_level3(problem, b, v),
        b_init, eps, max_iters,
    )
    return AggregationSolution(b=b, combiners=combiners, mu=mu, history=history)


# ---------------------------------------------------------------------------
# Level 1: local combining, simple central averaging
# ---------------------------------------------------------------------------

def combiner_level1(problem, b, g, ap):
    """Local MMSE combiner of group g at one AP (local estimates only)."""
    mat = _system_matrix(problem.h_hat[:, ap], problem.error_cov[:, ap], b,
                         problem.noise_power)
    w = problem.weights
    own = problem.group_of_device == g
    coef = np.where(own, w.gamma * b * w.nu, 0.0)
    return cho_solve(cho_factor(mat), problem.h_hat[:, ap].T @ coef)


def combiners_level1(problem, b):
    """Local combiners for every (group, AP); per-AP matrix factorized once."""
    n_groups, n_aps = problem.n_groups, problem.n_aps
    n_ant = problem.h_hat.shape[2]
    w = problem.weights
    out = np.empty((n_groups, n_aps, n_ant), dtype=complex)
    for ap in range(n_aps):
        mat = _system_matrix(problem.h_hat[:, ap], problem.error_cov[:, ap], b,
                             problem.noise_power)
        factor = cho_factor(mat)
        for g in range(n_groups):
            own = problem.group_of_device == g
            coef = np.where(own, w.gamma * b * w.nu, 0.0)
            out[g, ap] = cho_solve(factor, problem.h_hat[:, ap].T @ coef)
    return out


def channel_projections(combiners, channels):
    """Per-AP combined true channels u[g, k, l] = v_gl^H h_kl."""
    return np.einsum("gln,kln->gkl", combiners.conj(), channels)


def mse_level1(problem, b, combiners, projections, g):
    """Aggregation MSE of group g's averaged recovery, given combined channels.

    This conditions on the per-AP combined *true* channels (a simulation-side
    metric): with u fixed, only the symbols and noise are random, so there is
    no estimation-error inflation term.
    """
    n_aps = problem.n_aps
    mean_u = projections[g].mean(axis=1)            # (K,) averaged combined gains
    target = _target(problem, g)
    signal = np.abs(mean_u * b - target) ** 2
    noise = problem.noise_power * (np.abs(combiners[g]) ** 2).sum() / n_aps**2
    return float(signal.sum() + noise)


def weighted_sum_mse_level1(problem, b, combiners, projections):
    return float(sum(
        problem.weights.omega[g] * mse_level1(problem, b, combiners, projections, g)
        for g in range(problem.n_groups)
    ))


def level1_solution(problem):
    """Full-power coefficients and local combiners (no TCO at level 1)."""
    b = np.sqrt(problem.power_limit).astype(complex)
    combiners = combiners_level1(problem, b)
    history = OptHistory(np.array([]), 0, "threshold")
    return AggregationSolution(b=b, combiners=combiners,
                               mu=np.zeros(len(b)), history=history)


# ---------------------------------------------------------------------------
# Cellular baseline: one co-located array per group
# ---------------------------------------------------------------------------

def mse_cellular(problem, b, w_g, g):
    """Conditional aggregation MSE of group g at its serving base station."""
    return _conditional_mse(
        problem.h_hat[g], problem.error_cov[g], b, w_g, _target(problem, g),
        problem.noise_power,
    )


def combiner_cellular(problem, b, g):
    """MMSE combiner of group g at its serving BS for fixed coefficients."""
    mat = _system_matrix(problem.h_hat[g], problem.error_cov[g], b,
                         problem.noise_power)
    w = problem.weights
    own = problem.group_of_device == g
    coef = np.where(own, w.gamma * b * w.nu, 0.0)
    return cho_solve(cho_factor(mat), problem.h_hat[g].T @ coef)


def combiners_cellular(problem, b):
    return np.stack([combiner_cellular(problem, b, g)
                     for g in range(problem.n_groups)])


def tco_step_cellular(problem, combiners, k):
    """Transmit-coefficient update where every group sees its own BS channel."""
    w = problem.weights
    g = int(problem.group_of_device[k])
    proj = np.einsum("pm,pm->p", combiners.conj(), problem.h_hat[:, k])
    quad = np.einsum("pi,pij,pj->p", combiners.conj(), problem.error_cov[:, k],
                     combiners).real
    denom = float(np.dot(w.omega, np.abs(proj) ** 2 + quad))
    gain = w.omega[g] * w.gamma[k] * w.nu[k]
    mu = max(0.0, gain * abs(proj[g]) / np.sqrt(problem.power_limit[k]) - denom)
    if denom + mu == 0.0:
        return 0.0 + 0.0j, 0.0
    return gain * proj[g].conjugate() / (denom + mu), mu


def weighted_sum_mse_cellular(problem, b, combiners):
    return float(sum(
        problem.weights.omega[g] * mse_cellular(problem, b, combiners[g], g)
        for g in range(problem.n_groups)
    ))


def cellular_optimize(problem, eps=1e-10, max_iters=500, b_init=None):
    """Alternating combiner/coefficient optimization for the cellular system."""
    if b_init is None:
        b_init = np.sqrt(problem.power_limit).astype(complex)

    def coefficients(combiners):
        pairs = [tco_step_cellular(problem, combiners, k)
                 for k in range(problem.h_hat.shape[1])]
        return (np.array([p[0] for p in pairs], dtype=complex),
                np.array([p[1] for p in pairs]))

    b, combiners, mu, history = _alternate(
        lambda b: combiners_cellular(problem, b),
        coefficients,
        lambda b, w: weighted_sum_mse_cellular(problem, b, w),
        b_init, eps, max_iters,
    )
    return AggregationSolution(b=b, combiners=combiners, mu=mu, history=history)


# ---------------------------------------------------------------------------
# Recovery of one aggregated parameter from received signals
# ---------------------------------------------------------------------------

def split_combiner(v, n_aps, n_ant):
    """View a stacked combiner as per-AP slices of length n_ant."""
    return v.reshape(n_aps, n_ant)


def combine_signals(level, signals, combiner):
    """Complex combiner output for one group, before the mean offset.

    ``signals`` is the per-AP receive tensor of shape (L, N) for a single
    slot or (L, N, D) for D slots (for the cellular level, the serving BS
    signal of shape (M,) or (M, D)).  The combiner matches the level:
    stacked (LN,) for levels 3 and 2, per-AP (L, N) for level 1, (M,) for
    cellular.  Level 2 forms per-AP partial combines and sums them, which
    reproduces the level-3 value up to floating-point reassociation; level 1
    averages the per-AP combines.
    """
    signals = np.asarray(signals)
    if level == 3:
        flat = signals.reshape(-1, *signals.shape[2:])
        return np.tensordot(combiner.conj(), flat, axes=(0, 0))
    if level == 2:
        per_ap = split_combiner(combiner, signals.shape[0], signals.shape[1])
        partial = [np.tensordot(per_ap[ap].conj(), signals[ap], axes=(0, 0))
                   for ap in range(signals.shape[0])]
        return sum(partial)
    if level == 1:
        per_ap = [np.tensordot(combiner[ap].conj(), signals[ap], axes=(0, 0))
                  for ap in range(signals.shape[0])]
        return sum(per_ap) / signals.shape[0]
    if level == "cellular":
        return np.tensordot(combiner.conj(), signals, axes=(0, 0))
    raise ValueError(f"unknown recovery level {level!r}")


def group_offset(weights, group_of_device, g):
    """Mean offset carried over the side channel for group g."""
    own = group_of_device == g
    return float(np.dot(weights.gamma[own], weights.theta_bar[own]))


def recover(level, signals, combiner, weights, group_of_device, g):
    """Recover group g's aggregated parameter(s) from received signals.

    The real part of the combined signal plus the group's mean offset; a
    scalar for single-slot signals, a length-D vector for (.., D) signals.
    See ``combine_signals`` for the accepted shapes per level.
    """
    combined = combine_signals(level, signals, combiner)
    return np.real(combined) + group_offset(weights, group_of_device, g)
