"""Gaussian inference for a single partially observed vector.

Given a Gaussian with known mean and covariance/precision pair, a row with
missing entries carries an imputation state: the current estimate of the
conditional mean of the missing coordinates (stored inside the full data
vector) and the current estimate of the conditional covariance (stored as
a p x p matrix that is zero on observed rows/columns).

Two ways to move the state toward the exact conditional distribution:

* :func:`exact_conditional` computes it outright, at the cost of a
  factorization whose size depends on the missingness pattern;
* :func:`sweep_mean` and :func:`sweep_cov` each perform one cheap
  coordinate pass that lowers the KL divergence to the exact conditional
  without any factorization, so a fitting loop can spread the work across
  iterations while keeping its monotonicity guarantee.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .linalg import (
    CovPrecisionPair,
    IndexSplit,
    InversionCounter,
    NotPositiveDefiniteError,
    chol_logdet,
    logdet_observed_block,
    schur_via_precision,
    symmetrize,
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class IncompleteObservation:
    """One data row: values plus an observed/missing mask (True = observed).

    Missing slots of ``values`` are overwritten with NaN on construction so
    that any unmasked read poisons downstream results visibly.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 1:
            raise ValueError("values and mask must be 1-d arrays of equal length")
        if not mask.any():
            raise ValueError("observation has no observed entries")
        values[~mask] = np.nan
        self.values = values
        self.mask = mask

    @property
    def p(self) -> int:
        return self.values.size

    def split(self) -> IndexSplit:
        return IndexSplit.from_mask(self.mask)


@dataclass
class GaussianParams:
    """Mean vector plus covariance/precision pair."""

    mu: np.ndarray
    sigma: CovPrecisionPair

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        if self.mu.shape != (self.sigma.dim,):
            raise ValueError("mean length does not match covariance dimension")

    @property
    def p(self) -> int:
        return self.mu.size


@dataclass
class ImputationState:
    """Current imputed mean vector and padded imputed covariance.

    ``y_hat`` holds the data on observed coordinates (always exactly) and
    the current missing-coordinate estimates elsewhere.  ``Y_hat`` is zero
    on observed rows/columns and holds the current conditional-covariance
    estimate on the missing block.
    """

    y_hat: np.ndarray
    Y_hat: np.ndarray

    def __post_init__(self):
        self.y_hat = np.asarray(self.y_hat, dtype=float)
        self.Y_hat = np.asarray(self.Y_hat, dtype=float)

    def validate(self, obs: IncompleteObservation, atol: float = 0.0) -> None:
        mask = obs.mask
        if not np.array_equal(self.y_hat[mask], obs.values[mask]):
            raise ValueError("observed coordinates of y_hat deviate from the data")
        if np.abs(self.Y_hat[mask, :]).max(initial=0.0) > atol or \
                np.abs(self.Y_hat[:, mask]).max(initial=0.0) > atol:
            raise ValueError("Y_hat must be zero on observed rows/columns")
        if np.abs(self.Y_hat - self.Y_hat.T).max(initial=0.0) > 1e-12:
            raise ValueError("Y_hat must be symmetric")

    def missing_block(self, obs: IncompleteObservation) -> np.ndarray:
        mis = np.flatnonzero(~obs.mask)
        return self.Y_hat[np.ix_(mis, mis)]


def init_state(params: GaussianParams, obs: IncompleteObservation) -> ImputationState:
    """Starting state for a sweep sequence: component mean and marginal variances.

    Missing coordinates of ``y_hat`` start at the component mean; the
    missing block of ``Y_hat`` starts as the diagonal of the corresponding
    covariance entries.  Both lie in the (global) basin of the convex
    coordinate objectives.
    """
    mis = np.flatnonzero(~obs.mask)
    y_hat = np.where(obs.mask, obs.values, params.mu)
    Y_hat = np.zeros((obs.p, obs.p))
    Y_hat[mis, mis] = np.diag(params.sigma.cov)[mis]
    return ImputationState(y_hat=y_hat, Y_hat=Y_hat)


def exact_conditional(params: GaussianParams, obs: IncompleteObservation,
                      counter: InversionCounter | None = None) -> ImputationState:
    """Exact conditional mean and covariance of missing given observed.

    Routes through the precision blocks when the missing block is the
    smaller one (so the factorization has missing-block size), and through
    the observed-block factorization otherwise.
    """
    mask = obs.mask
    p = obs.p
    mis = np.flatnonzero(~mask)
    if mis.size == 0:
        return ImputationState(y_hat=obs.values.copy(), Y_hat=np.zeros((p, p)))
    split = obs.split()
    obs_idx = split.observed
    mu = params.mu
    if mis.size < obs_idx.size:
        cond_cov, coeffs = schur_via_precision(params.sigma, split, counter)
    else:
        cov = params.sigma.cov
        factor, _ = chol_logdet(cov[np.ix_(obs_idx, obs_idx)])
        coeffs = cho_solve(factor, cov[np.ix_(obs_idx, mis)]).T
        cond_cov = symmetrize(cov[np.ix_(mis, mis)] - coeffs @ cov[np.ix_(obs_idx, mis)])
        if counter is not None:
            counter.block += 1
    z_hat = mu[mis] + coeffs @ (obs.values[obs_idx] - mu[obs_idx])
    y_hat = np.where(mask, obs.values, 0.0)
    y_hat[mis] = z_hat
    Y_hat = np.zeros((p, p))
    Y_hat[np.ix_(mis, mis)] = cond_cov
    return ImputationState(y_hat=y_hat, Y_hat=Y_hat)


def kl_missing(state: ImputationState, params: GaussianParams,
               obs: IncompleteObservation) -> float:
    """KL divergence from the state's Gaussian to the exact conditional.

    Includes the -l/2 constant of the Gaussian KL (l = number of missing
    coordinates), so the value is >= 0 with equality exactly when the state
    equals the output of :func:`exact_conditional`.
    """
    mis = np.flatnonzero(~obs.mask)
    l = mis.size
    if l == 0:
        return 0.0
    prec_zz = params.sigma.prec[np.ix_(mis, mis)]
    z_block = state.missing_block(obs)
    try:
        _, logdet_z = chol_logdet(symmetrize(z_block))
    except NotPositiveDefiniteError as err:
        raise NotPositiveDefiniteError(
            "imputed covariance block must be positive definite") from err
    _, logdet_prec_zz = chol_logdet(prec_zz)
    exact = exact_conditional(params, obs)
    gap = state.y_hat[mis] - exact.y_hat[mis]
    quad = float(gap @ prec_zz @ gap)
    trace = float(np.sum(prec_zz * z_block))
    return 0.5 * (trace + quad - logdet_z - logdet_prec_zz - l)


def mean_sweep_rows(y_rows: np.ndarray, mu: np.ndarray, prec: np.ndarray,
                    missing: np.ndarray) -> None:
    """One in-place coordinate pass of the conditional-mean update.

    For every row and every missing coordinate j in ascending order,
    replaces the entry with the Gaussian conditional mean of coordinate j
    given all other current entries,

        y_j <- mu_j - (1/prec_jj) sum_{k != j} prec_jk (y_k - mu_k),

    using current (already updated) values, i.e. Gauss-Seidel order.  This
    is exact coordinate minimization of (y - mu)' prec (y - mu), which it
    therefore never increases.

    Parameters
    ----------
    y_rows : ndarray, shape (r, p)
        Rows to update in place.
    missing : ndarray of bool, shape (r, p)
        True where an entry is missing (eligible for update).
    """
    p = y_rows.shape[1]
    for j in range(p):
        rows = missing[:, j]
        if not rows.any():
            continue
        r = (y_rows[rows] - mu) @ prec[:, j]
        y_rows[rows, j] -= r / prec[j, j]


def cov_sweep_blocks(z_blocks: np.ndarray, prec_blocks: np.ndarray) -> None:
    """One in-place row/column coordinate pass of the covariance update.

    ``z_blocks`` is a stack of current missing-block covariance estimates
    Z and ``prec_blocks`` the matching stack of precision blocks A (the
    missing-coordinate block of the full precision, whose inverse is the
    exact conditional covariance).  For each coordinate k the row/column
    pair of Z is replaced by the exact minimizer of tr(A Z) - ln|Z| with
    the rest of Z held fixed, which in closed form is

        z_k  <- -Z_k a_k / a_kk
        z_kk <- 1/a_kk + a_k' Z_k a_k / a_kk**2

    with Z_k the principal submatrix and a_k the off-diagonal row of A.
    Each update is a conditional minimization of the KL divergence to the
    exact conditional, so the divergence never increases; the fixed point
    is Z = A^{-1}, and positive definiteness is preserved (the new
    coordinate-k Schur complement is 1/a_kk > 0).  No factorization is
    performed.
    """
    l = z_blocks.shape[-1]
    for k in range(l):
        idx = np.concatenate([np.arange(k), np.arange(k + 1, l)])
        a_k = prec_blocks[:, k, idx]
        a_kk = prec_blocks[:, k, k]
        sub = z_blocks[:, idx[:, None], idx[None, :]]
        w = np.einsum("sij,sj->si", sub, a_k)
        z_new = -w / a_kk[:, None]
        z_blocks[:, k, idx] = z_new
        z_blocks[:, idx, k] = z_new
        z_blocks[:, k, k] = 1.0 / a_kk + np.einsum("si,si->s", a_k, w) / a_kk ** 2


def sweep_mean(state: ImputationState, params: GaussianParams,
               obs: IncompleteObservation) -> ImputationState:
    """One coordinate pass over the imputed mean; observed entries untouched."""
    y_hat = state.y_hat.copy()
    rows = y_hat[None, :]
    mean_sweep_rows(rows, params.mu, params.sigma.prec, ~obs.mask[None, :])
    return ImputationState(y_hat=rows[0], Y_hat=state.Y_hat.copy())


def sweep_cov(state: ImputationState, params: GaussianParams,
              obs: IncompleteObservation) -> ImputationState:
    """One row/column coordinate pass over the imputed covariance block."""
    mis = np.flatnonzero(~obs.mask)
    Y_hat = state.Y_hat.copy()
    if mis.size == 0:
        return ImputationState(y_hat=state.y_hat.copy(), Y_hat=Y_hat)
    blocks = Y_hat[np.ix_(mis, mis)][None, :, :].copy()
    prec_blocks = params.sigma.prec[np.ix_(mis, mis)][None, :, :]
    cov_sweep_blocks(blocks, prec_blocks)
    Y_hat[np.ix_(mis, mis)] = symmetrize(blocks[0])
    return ImputationState(y_hat=state.y_hat.copy(), Y_hat=Y_hat)


def gamma_surrogate(state: ImputationState, params: GaussianParams) -> float:
    """tr[(cov - Y_hat) prec (cov - Y_hat)], the quadratic covariance surrogate.

    Shares its unique minimizer over the missing block (observed block
    fixed at zero) with the covariance part of :func:`kl_missing`.
    """
    e = params.sigma.cov - state.Y_hat
    return float(np.trace(e @ params.sigma.prec @ e))


def observed_loglik(params: GaussianParams, obs: IncompleteObservation,
                    state: ImputationState,
                    counter: InversionCounter | None = None) -> float:
    """Log-density of the observed coordinates, via the imputed full row.

    Evaluates -(1/2) [m ln(2 pi) + ln|cov_xx| + (y_hat - mu)' prec (y_hat - mu)]
    with m the number of observed coordinates.  The quadratic form splits
    into the observed-block Mahalanobis distance plus a non-negative term
    that vanishes exactly when the imputed mean equals the conditional
    mean, so the value is a lower bound on the exact observed log-density
    and coincides with it at convergence of the mean sweeps.
    """
    split = obs.split()
    m = split.observed.size
    logdet_xx = logdet_observed_block(params.sigma, split, counter)
    d = state.y_hat - params.mu
    quad = float(d @ params.sigma.prec @ d)
    return -0.5 * (m * LOG_2PI + logdet_xx + quad)
