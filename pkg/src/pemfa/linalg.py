"""Dense symmetric-matrix utilities built around precision-matrix identities.

Everything here works with a covariance matrix and its cached inverse
travelling together (:class:`CovPrecisionPair`).  The payoff is that
quantities tied to a subset of coordinates -- conditional covariances,
regression coefficients, sub-block log-determinants, inverses of principal
submatrices -- can be read off the precision matrix with work proportional
to the *small* block instead of refactorizing the large one.

Index conventions are 0-based throughout.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

# |1 - xi_j' sigma_j| below this is treated as a degenerate rank-one update
# (cannot happen for a consistent SPD pair, where the product equals
# sigma_jj * xi_jj >= 1; it signals a corrupted pair).
RANK_ONE_TOL = 1e-10

SYM_RTOL = 1e-12


class NotPositiveDefiniteError(LinAlgError):
    """Raised when a matrix required to be SPD fails its factorization."""


@dataclass
class InversionCounter:
    """Tallies of the linear-algebra work performed during a fit.

    full
        p x p covariance/precision pair constructions (one per component
        per parameter refresh).
    block
        factorizations of observed/missing sub-blocks used to build
        conditional distributions (the per-missingness-pattern work that
        partial E-steps avoid).
    logdet_block
        determinant-only factorizations of sub-blocks (needed by both
        algorithms to evaluate observed-data densities).
    rank_one_fallback
        times the rank-one submatrix-inverse identity was abandoned for a
        direct inversion because its denominator was degenerate.
    """

    full: int = 0
    block: int = 0
    logdet_block: int = 0
    rank_one_fallback: int = 0

    def as_dict(self) -> dict:
        return {
            "full": self.full,
            "block": self.block,
            "logdet_block": self.logdet_block,
            "rank_one_fallback": self.rank_one_fallback,
        }


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return the symmetric part (m + m') / 2."""
    return 0.5 * (m + m.T)


def check_symmetric(m: np.ndarray, rtol: float = SYM_RTOL) -> np.ndarray:
    """Validate that ``m`` is square and symmetric to relative tolerance."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric")
    return m


def chol_logdet(m: np.ndarray):
    """Cholesky factor of an SPD matrix together with its log-determinant.

    Returns
    -------
    (c, lower) : tuple
        Factorization as returned by :func:`scipy.linalg.cho_factor`.
    logdet : float
        ln|m|.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization fails, i.e. ``m`` is not positive definite.
    """
    try:
        c, lower = cho_factor(m, lower=True)
    except LinAlgError as err:
        raise NotPositiveDefiniteError(str(err)) from err
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return (c, lower), logdet


@dataclass(frozen=True)
class CovPrecisionPair:
    """A covariance matrix bundled with its inverse and log-determinant.

    Attributes
    ----------
    cov : ndarray, shape (p, p)
        Symmetric positive definite covariance.
    prec : ndarray, shape (p, p)
        Its inverse.
    logdet_cov : float
        ln|cov|.
    """

    cov: np.ndarray
    prec: np.ndarray
    logdet_cov: float

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @classmethod
    def from_cov(cls, cov: np.ndarray, counter: InversionCounter | None = None):
        """Build the pair by factorizing ``cov`` once."""
        cov = check_symmetric(cov)
        factor, logdet = chol_logdet(cov)
        prec = symmetrize(cho_solve(factor, np.eye(cov.shape[0])))
        if counter is not None:
            counter.full += 1
        return cls(cov=cov, prec=prec, logdet_cov=logdet)

    @classmethod
    def from_loadings(cls, loadings: np.ndarray, noise_diag: np.ndarray,
                      counter: InversionCounter | None = None):
        """Build the pair for ``L L' + diag(d)`` with only a q x q solve.

        Uses the Woodbury identity for the inverse and the matrix
        determinant lemma for the log-determinant, so the cost scales with
        the number of columns of ``loadings`` rather than its rows.
        """
        loadings = np.asarray(loadings, dtype=float)
        noise_diag = np.asarray(noise_diag, dtype=float)
        p, q = loadings.shape
        if np.any(noise_diag <= 0):
            raise NotPositiveDefiniteError("noise diagonal must be positive")
        cov = loadings @ loadings.T + np.diag(noise_diag)
        d_inv = 1.0 / noise_diag
        if q == 0:
            prec = np.diag(d_inv)
            logdet = float(np.sum(np.log(noise_diag)))
        else:
            ld = loadings * d_inv[:, None]
            core = np.eye(q) + loadings.T @ ld
            factor, logdet_core = chol_logdet(core)
            prec = np.diag(d_inv) - ld @ cho_solve(factor, ld.T)
            prec = symmetrize(prec)
            logdet = float(np.sum(np.log(noise_diag))) + logdet_core
        if counter is not None:
            counter.full += 1
        return cls(cov=symmetrize(cov), prec=prec, logdet_cov=logdet)

    def validate(self, rtol: float = 1e-8) -> None:
        """Check the pair invariants (inverse consistency, log-determinant)."""
        p = self.dim
        resid = np.abs(self.cov @ self.prec - np.eye(p)).max()
        if resid > rtol * max(1.0, np.abs(self.cov).max()):
            raise ValueError(f"cov * prec deviates from identity by {resid:.3e}")
        _, logdet = chol_logdet(self.cov)
        if abs(logdet - self.logdet_cov) > rtol * max(1.0, abs(logdet)):
            raise ValueError("cached log-determinant is inconsistent")


@dataclass(frozen=True)
class IndexSplit:
    """An observed/missing partition of the coordinates ``0..dim-1``."""

    observed: np.ndarray
    missing: np.ndarray
    dim: int

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=int)
        mis = np.asarray(self.missing, dtype=int)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "missing", mis)
        if obs.size == 0:
            raise ValueError("observed index set must be non-empty")
        if np.any(np.diff(obs) <= 0) or (mis.size > 1 and np.any(np.diff(mis) <= 0)):
            raise ValueError("index sets must be strictly ascending")
        combined = np.concatenate([obs, mis])
        if combined.min(initial=0) < 0 or combined.max(initial=-1) >= self.dim:
            raise ValueError("indices out of range")
        if np.union1d(obs, mis).size != self.dim or combined.size != self.dim:
            raise ValueError("observed and missing must partition 0..dim-1")

    @classmethod
    def from_mask(cls, mask: np.ndarray):
        """Build a split from a boolean mask (True = observed)."""
        mask = np.asarray(mask, dtype=bool)
        return cls(observed=np.flatnonzero(mask),
                   missing=np.flatnonzero(~mask),
                   dim=mask.size)

    @property
    def n_missing(self) -> int:
        return self.missing.size


def principal_submatrix(m: np.ndarray, j: int) -> np.ndarray:
    """The matrix with row ``j`` and column ``j`` deleted."""
    p = m.shape[0]
    if p < 2:
        raise ValueError("need dimension >= 2 to delete a row/column")
    if not 0 <= j < p:
        raise IndexError(f"index {j} out of range for dimension {p}")
    keep = np.delete(np.arange(p), j)
    return m[np.ix_(keep, keep)]


def offdiag_row(m: np.ndarray, j: int) -> np.ndarray:
    """Row ``j`` of a symmetric matrix with its ``j``-th element deleted."""
    p = m.shape[0]
    if not 0 <= j < p:
        raise IndexError(f"index {j} out of range for dimension {p}")
    return np.delete(m[j], j)


def schur_complement(m: np.ndarray, split: IndexSplit) -> np.ndarray:
    """Conditional covariance of the missing block given the observed block.

    Computes ``m_zz - m_zx m_xx^{-1} m_xz`` by factorizing the observed
    block directly.  Use :func:`schur_via_precision` when the inverse of
    the full matrix is already available and the missing block is small.
    """
    if split.n_missing == 0:
        raise ValueError("missing index set must be non-empty")
    obs, mis = split.observed, split.missing
    m_xx = m[np.ix_(obs, obs)]
    m_zx = m[np.ix_(mis, obs)]
    m_zz = m[np.ix_(mis, mis)]
    factor, _ = chol_logdet(m_xx)
    return symmetrize(m_zz - m_zx @ cho_solve(factor, m_zx.T))


def schur_via_precision(pair: CovPrecisionPair, split: IndexSplit,
                        counter: InversionCounter | None = None):
    """Conditional covariance and regression coefficients from the precision.

    For a partitioned SPD matrix the conditional covariance of the missing
    block equals the inverse of the missing-block of the precision, and the
    regression coefficient matrix satisfies
    ``cov_zx cov_xx^{-1} = -prec_zz^{-1} prec_zx``.  The only factorization
    performed has the dimension of the *missing* block.

    Returns
    -------
    cond_cov : ndarray, shape (l, l)
        ``cov_zz - cov_zx cov_xx^{-1} cov_xz``.
    coeffs : ndarray, shape (l, m)
        ``cov_zx cov_xx^{-1}``.
    """
    if split.n_missing == 0:
        raise ValueError("missing index set must be non-empty")
    obs, mis = split.observed, split.missing
    xi_zz = pair.prec[np.ix_(mis, mis)]
    xi_zx = pair.prec[np.ix_(mis, obs)]
    factor, _ = chol_logdet(xi_zz)
    cond_cov = symmetrize(cho_solve(factor, np.eye(mis.size)))
    coeffs = -cho_solve(factor, xi_zx)
    if counter is not None:
        counter.block += 1
    return cond_cov, coeffs


def submatrix_inverse_via_precision(pair: CovPrecisionPair, j: int,
                                    counter: InversionCounter | None = None) -> np.ndarray:
    """Inverse of the ``j``-th principal submatrix of the covariance.

    Uses the rank-one identity

        cov_j^{-1} = [I + xi_j sigma_j' / (1 - xi_j' sigma_j)] prec_j

    where ``sigma_j`` / ``xi_j`` are the ``j``-th rows of the covariance /
    precision with the ``j``-th element deleted and ``prec_j`` is the
    precision's principal submatrix.  No factorization is needed.  The
    result is symmetrized, since the rank-one product can break symmetry
    at roundoff level.

    Falls back to a direct inversion (and records it on ``counter``) when
    the denominator is degenerate, which for a consistent SPD pair can
    only be caused by numeric corruption.
    """
    sigma_j = offdiag_row(pair.cov, j)
    xi_j = offdiag_row(pair.prec, j)
    prec_j = principal_submatrix(pair.prec, j)
    denom = 1.0 - float(xi_j @ sigma_j)
    if abs(denom) < RANK_ONE_TOL:
        if counter is not None:
            counter.rank_one_fallback += 1
            counter.block += 1
        sub = principal_submatrix(pair.cov, j)
        factor, _ = chol_logdet(sub)
        return symmetrize(cho_solve(factor, np.eye(sub.shape[0])))
    inv = prec_j + np.outer(xi_j, sigma_j @ prec_j) / denom
    return symmetrize(inv)


def logdet_observed_block(pair: CovPrecisionPair, split: IndexSplit,
                          counter: InversionCounter | None = None) -> float:
    """ln|cov_xx| for the observed block of the partition.

    Rearranges ``ln|cov| = ln|cov_xx| + ln|cond_cov|`` together with
    ``cond_cov = prec_zz^{-1}`` into ``ln|cov_xx| = ln|cov| + ln|prec_zz|``,
    so only the (small) missing block is factorized.  When the missing
    block is the larger one the observed block is factorized directly
    instead.
    """
    l = split.n_missing
    if l == 0:
        return pair.logdet_cov
    m = split.observed.size
    if l > m:
        obs = split.observed
        _, logdet = chol_logdet(pair.cov[np.ix_(obs, obs)])
        if counter is not None:
            counter.logdet_block += 1
        return logdet
    mis = split.missing
    _, logdet_zz = chol_logdet(pair.prec[np.ix_(mis, mis)])
    if counter is not None:
        counter.logdet_block += 1
    return pair.logdet_cov + logdet_zz
