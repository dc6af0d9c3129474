"""Gaussian mixture of factor analyzers with shared loadings, for block-missing data.

Component covariances are constrained to ``L L' + Psi_g`` with one loading
matrix ``L`` shared across components and per-component diagonal noise.
Two fitting drivers share one skeleton:

* :func:`fit_em` recomputes the exact conditional distribution of every
  row's missing coordinates each iteration, which costs one block
  factorization per distinct missingness pattern per component;
* :func:`fit_pem` instead advances the stored imputation state by cheap
  coordinate sweeps (see :mod:`pemfa.missing`) that lower the KL
  divergence to the exact conditional, leaving one p x p precision
  refresh per component per iteration as the only full-size work.

Internally, rows are grouped by missingness pattern and the per-pattern
linear algebra runs on stacked arrays; the per-observation operations in
:mod:`pemfa.missing` define the semantics and the stacked code paths are
tested against them.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    CovPrecisionPair,
    InversionCounter,
    NotPositiveDefiniteError,
    symmetrize,
)
from .missing import (
    LOG_2PI,
    ImputationState,
    cov_sweep_blocks,
    mean_sweep_rows,
)


class MixtureError(Exception):
    """Fitting failure with a diagnosable cause."""


class DegenerateComponentError(MixtureError):
    """A component lost the minimum effective mass needed for its M-step."""


@dataclass
class FitConfig:
    """Knobs shared by the fitting drivers and the model search.

    ``restarts`` independent soft initializations are run and the best
    final log-likelihood kept; a run whose component collapses is skipped.
    ``sweeps_per_iter`` only affects the partial-E-step driver.
    ``bic_rule`` picks the model-selection convention: "max" treats
    2*loglik - m*log(n) as better-when-larger, "min" selects the smallest
    value (for comparing against tables that report the flipped sign).
    """

    restarts: int = 10
    seed: int = 0
    sweeps_per_iter: int = 1
    tol: float = 1e-8
    max_iter: int = 5000
    psi_floor_scale: float = 1e-6
    bic_rule: str = "max"

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.bic_rule not in ("max", "min"):
            raise ValueError("bic_rule must be 'max' or 'min'")


@dataclass
class MixtureParams:
    """Mixing weights, component means, shared loadings, per-component noise."""

    pi: np.ndarray          # (G,)
    mu: np.ndarray          # (G, p)
    loadings: np.ndarray    # (p, q)
    psi: np.ndarray         # (G, p)
    pairs: list             # CovPrecisionPair per component

    @property
    def G(self) -> int:
        return self.pi.size

    @property
    def p(self) -> int:
        return self.mu.shape[1]

    @property
    def q(self) -> int:
        return self.loadings.shape[1]

    @classmethod
    def build(cls, pi, mu, loadings, psi, counter: InversionCounter | None = None):
        """Assemble parameters and refresh every covariance/precision pair."""
        pi = np.asarray(pi, dtype=float)
        mu = np.asarray(mu, dtype=float)
        loadings = np.asarray(loadings, dtype=float)
        psi = np.asarray(psi, dtype=float)
        pairs = [CovPrecisionPair.from_loadings(loadings, psi[g], counter)
                 for g in range(pi.size)]
        return cls(pi=pi, mu=mu, loadings=loadings, psi=psi, pairs=pairs)

    def validate(self, rtol: float = 1e-8) -> None:
        if np.any(self.pi <= 0) or abs(self.pi.sum() - 1.0) > 1e-12:
            raise ValueError("mixing proportions must be positive and sum to 1")
        if self.q >= self.p:
            raise ValueError("factor count must be smaller than dimension")
        if np.any(self.psi <= 0):
            raise ValueError("noise variances must be positive")
        for pair in self.pairs:
            pair.validate(rtol)


@dataclass
class ComponentStats:
    """Effective counts, weighted means and weighted scatter matrices."""

    counts: np.ndarray      # (G,)
    means: np.ndarray       # (G, p)
    scatters: np.ndarray    # (G, p, p)


@dataclass
class FitResult:
    params: MixtureParams
    resp: np.ndarray            # (n, G) posterior component probabilities
    labels: np.ndarray          # (n,) MAP component per row
    loglik_trace: np.ndarray
    final_loglik: float
    bic: float
    iterations: int             # completed parameter updates
    converged: bool
    algorithm: str
    restarts_used: int = 1
    sweep_counts: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    imputed_rows: np.ndarray | None = None   # (n, p) under the MAP component
    factor_scores: np.ndarray | None = None  # (n, q) under the MAP component

    @property
    def n(self) -> int:
        return self.resp.shape[0]


@dataclass
class _PatternGroup:
    """All patterns with the same number of missing coordinates, stacked."""

    l: int
    pattern_idx: np.ndarray  # (S,) indices into the pattern list
    mis: np.ndarray          # (S, l) missing coordinates per pattern
    obs: np.ndarray          # (S, m) observed coordinates per pattern
    rows: np.ndarray         # (R,) data rows in this group, pattern-contiguous
    row_slot: np.ndarray     # (R,) position of each row's pattern within the stack


class PatternIndex:
    """Row grouping by missingness pattern, with stacked index arrays."""

    def __init__(self, mask: np.ndarray):
        mask = np.asarray(mask, dtype=bool)
        n, p = mask.shape
        if not mask.any(axis=1).all():
            raise ValueError("every row must have at least one observed entry")
        if not mask.any(axis=0).all():
            raise ValueError("every column must be observed at least once")
        patterns, ids = np.unique(mask, axis=0, return_inverse=True)
        self.mask = mask
        self.n = n
        self.p = p
        self.patterns = patterns
        self.pattern_ids = np.asarray(ids, dtype=int).ravel()
        self.n_patterns = patterns.shape[0]
        self.m_per_row = mask.sum(axis=1)
        self.l_per_pattern = (~patterns).sum(axis=1)
        self.n_incomplete_patterns = int((self.l_per_pattern > 0).sum())
        self.groups: dict[int, _PatternGroup] = {}
        for l in sorted(set(self.l_per_pattern.tolist())):
            if l == 0:
                continue
            pidx = np.flatnonzero(self.l_per_pattern == l)
            mis = np.stack([np.flatnonzero(~patterns[s]) for s in pidx])
            obs = np.stack([np.flatnonzero(patterns[s]) for s in pidx])
            row_lists = [np.flatnonzero(self.pattern_ids == s) for s in pidx]
            rows = np.concatenate(row_lists)
            row_slot = np.repeat(np.arange(pidx.size),
                                 [r.size for r in row_lists])
            self.groups[int(l)] = _PatternGroup(
                l=int(l), pattern_idx=pidx, mis=mis, obs=obs,
                rows=rows, row_slot=row_slot)


def _gather_blocks(m: np.ndarray, rows_idx: np.ndarray, cols_idx: np.ndarray) -> np.ndarray:
    """Stack sub-blocks m[rows_idx[s], cols_idx[s]] over the leading axis."""
    return m[rows_idx[:, :, None], cols_idx[:, None, :]]


class ImputationBank:
    """Per-(row, component) imputed means and per-(pattern, component) covariances.

    The conditional-covariance state depends on a row only through its
    missingness pattern, so it is stored once per (component, pattern) and
    shared by all rows with that pattern; the imputed mean is stored per
    (component, row).  :meth:`state` assembles the padded per-observation
    view used by the :mod:`pemfa.missing` operations.
    """

    def __init__(self, pindex: PatternIndex, values: np.ndarray, G: int):
        self.pindex = pindex
        self.values = values
        self.G = G
        self.means = np.empty((G, pindex.n, pindex.p))
        self.cov_blocks = {
            l: np.zeros((G, grp.pattern_idx.size, l, l))
            for l, grp in pindex.groups.items()
        }

    @classmethod
    def initialize(cls, params: MixtureParams, values: np.ndarray,
                   pindex: PatternIndex):
        """Missing means start at the component mean, covariance blocks at
        the matching diagonal of the component covariance."""
        bank = cls(pindex, values, params.G)
        for g in range(params.G):
            bank.means[g] = np.where(pindex.mask, values, params.mu[g])
            cov_diag = np.diag(params.pairs[g].cov)
            for l, grp in pindex.groups.items():
                blocks = bank.cov_blocks[l][g]
                blocks[:] = 0.0
                blocks[:, np.arange(l), np.arange(l)] = cov_diag[grp.mis]
        return bank

    def set_exact(self, params: MixtureParams,
                  counter: InversionCounter | None = None) -> None:
        """Exact E-step: conditional mean and covariance per (row, component).

        One block factorization per (component, pattern), on whichever of
        the missing/observed blocks is smaller.
        """
        pindex = self.pindex
        for g in range(params.G):
            prec = params.pairs[g].prec
            cov = params.pairs[g].cov
            mu = params.mu[g]
            for l, grp in pindex.groups.items():
                m = grp.obs.shape[1]
                if l < m:
                    xi_zz = _gather_blocks(prec, grp.mis, grp.mis)
                    xi_zx = _gather_blocks(prec, grp.mis, grp.obs)
                    coeffs = -np.linalg.solve(xi_zz, xi_zx)
                    cond = np.linalg.inv(xi_zz)
                else:
                    sxx = _gather_blocks(cov, grp.obs, grp.obs)
                    szx = _gather_blocks(cov, grp.mis, grp.obs)
                    coeffs = np.linalg.solve(sxx, szx.transpose(0, 2, 1))
                    coeffs = coeffs.transpose(0, 2, 1)
                    cond = _gather_blocks(cov, grp.mis, grp.mis) \
                        - coeffs @ szx.transpose(0, 2, 1)
                self.cov_blocks[l][g] = 0.5 * (cond + cond.transpose(0, 2, 1))
                if counter is not None:
                    counter.block += grp.pattern_idx.size
                rows, slot = grp.rows, grp.row_slot
                obs_cols = grp.obs[slot]
                dx = self.values[rows[:, None], obs_cols] - mu[obs_cols]
                z = mu[grp.mis[slot]] + np.einsum("rlm,rm->rl", coeffs[slot], dx)
                self.means[g][rows[:, None], grp.mis[slot]] = z

    def sweep(self, params: MixtureParams, n_sweeps: int = 1) -> None:
        """Partial E-step: coordinate passes on means and covariance blocks."""
        pindex = self.pindex
        missing = ~pindex.mask
        for g in range(params.G):
            prec = params.pairs[g].prec
            mu = params.mu[g]
            for _ in range(n_sweeps):
                mean_sweep_rows(self.means[g], mu, prec, missing)
                for l, grp in pindex.groups.items():
                    prec_blocks = _gather_blocks(prec, grp.mis, grp.mis)
                    cov_sweep_blocks(self.cov_blocks[l][g], prec_blocks)

    def state(self, i: int, g: int) -> ImputationState:
        """Padded per-observation view of the stored state."""
        pindex = self.pindex
        s = pindex.pattern_ids[i]
        l = int(pindex.l_per_pattern[s])
        Y_hat = np.zeros((pindex.p, pindex.p))
        if l > 0:
            grp = pindex.groups[l]
            slot = int(np.flatnonzero(grp.pattern_idx == s)[0])
            mis = grp.mis[slot]
            Y_hat[np.ix_(mis, mis)] = self.cov_blocks[l][g, slot]
        return ImputationState(y_hat=self.means[g, i].copy(), Y_hat=Y_hat)


def component_log_densities(params: MixtureParams, bank: ImputationBank,
                            counter: InversionCounter | None = None) -> np.ndarray:
    """Per-(row, component) observed-data log-density via the imputed rows.

    Evaluates -(1/2)[m_i ln(2 pi) + ln|cov_xx| + (y_hat - mu)' prec (y_hat - mu)]
    per row and component.  The block log-determinants come from the
    precision's missing block (or directly from the observed block when
    that one is smaller); exact when the imputation states equal the exact
    conditionals, a lower bound otherwise.
    """
    pindex = bank.pindex
    dens = np.empty((pindex.n, params.G))
    base = pindex.m_per_row * LOG_2PI
    for g in range(params.G):
        pair = params.pairs[g]
        ld_pat = np.full(pindex.n_patterns, pair.logdet_cov)
        for l, grp in pindex.groups.items():
            m = grp.obs.shape[1]
            if l > m:
                sxx = _gather_blocks(pair.cov, grp.obs, grp.obs)
                _, ld = np.linalg.slogdet(sxx)
                ld_pat[grp.pattern_idx] = ld
            else:
                xi_zz = _gather_blocks(pair.prec, grp.mis, grp.mis)
                _, ldz = np.linalg.slogdet(xi_zz)
                ld_pat[grp.pattern_idx] = pair.logdet_cov + ldz
            if counter is not None:
                counter.logdet_block += grp.pattern_idx.size
        d = bank.means[g] - params.mu[g]
        quad = np.einsum("ij,ij->i", d @ pair.prec, d)
        dens[:, g] = -0.5 * (base + ld_pat[pindex.pattern_ids] + quad)
    return dens


def posterior_weights(log_dens: np.ndarray, pi: np.ndarray):
    """Row-normalized posterior weights and the summed log-likelihood.

    Works in log space with per-row max subtraction.  A row whose every
    component density vanished is reported by index rather than silently
    renormalized.
    """
    a = log_dens + np.log(pi)
    amax = a.max(axis=1)
    dead = ~np.isfinite(amax)
    if dead.any():
        raise MixtureError(
            "all component densities vanished for observation(s) "
            f"{np.flatnonzero(dead).tolist()[:10]}")
    norm = amax + np.log(np.exp(a - amax[:, None]).sum(axis=1))
    resp = np.exp(a - norm[:, None])
    return resp, float(norm.sum())


def responsibilities(params: MixtureParams, bank: ImputationBank,
                     counter: InversionCounter | None = None) -> np.ndarray:
    """Posterior component probabilities for every row."""
    dens = component_log_densities(params, bank, counter)
    resp, _ = posterior_weights(dens, params.pi)
    return resp


def weighted_stats(bank: ImputationBank, resp: np.ndarray,
                   min_count: float) -> ComponentStats:
    """Responsibility-weighted means and scatter matrices.

    The scatter of component g is

        S_g = (1/n_g) sum_i w_ig [ (y_hat_ig - ybar_g)(y_hat_ig - ybar_g)' + Y_hat_ig ]

    i.e. deviations are taken from the component's own weighted mean and
    each row's imputed-covariance matrix enters with that row's weight.
    """
    pindex = bank.pindex
    counts = resp.sum(axis=0)
    if counts.min() < min_count:
        g_bad = int(np.argmin(counts))
        raise DegenerateComponentError(
            f"component {g_bad} has effective mass {counts[g_bad]:.3f} "
            f"< required {min_count}")
    G = resp.shape[1]
    p = pindex.p
    means = np.empty((G, p))
    scatters = np.empty((G, p, p))
    for g in range(G):
        w = resp[:, g]
        means[g] = w @ bank.means[g] / counts[g]
        d = bank.means[g] - means[g]
        s = (d * w[:, None]).T @ d
        w_pat = np.bincount(pindex.pattern_ids, weights=w,
                            minlength=pindex.n_patterns)
        for l, grp in pindex.groups.items():
            contrib = w_pat[grp.pattern_idx][:, None, None] * bank.cov_blocks[l][g]
            np.add.at(s, (grp.mis[:, :, None], grp.mis[:, None, :]), contrib)
        scatters[g] = symmetrize(s / counts[g])
    return ComponentStats(counts=counts, means=means, scatters=scatters)


def mstep_common_factors(stats: ComponentStats, params: MixtureParams,
                         psi_floor: np.ndarray,
                         counter: InversionCounter | None = None) -> MixtureParams:
    """M-step for the shared-loadings model.

    With ``beta_g = L' (L L' + Psi_g)^{-1}`` and
    ``theta_g = I_q - beta_g L + beta_g S_g beta_g'`` (the posterior
    second moment of the latent factors), the shared loading matrix
    solves the pq x pq linear system

        [ sum_g n_g (theta_g kron Psi_g^{-1}) ] vec(L_new)
            = vec( sum_g n_g Psi_g^{-1} S_g beta_g' )

    (column-stacking vec), followed by the diagonal noise update

        Psi_g_new = diag{ S_g - 2 L_new beta_g S_g + L_new theta_g L_new' }

    floored elementwise at ``psi_floor``.  Covariance/precision pairs are
    refreshed through the low-rank route, so only q x q systems are solved.
    """
    G, p, q = params.G, params.p, params.q
    n = stats.counts.sum()
    pi_new = stats.counts / n
    mu_new = stats.means.copy()
    psi_new = np.empty_like(params.psi)
    if q == 0:
        lam_new = np.zeros((p, 0))
        for g in range(G):
            psi_new[g] = np.maximum(np.diag(stats.scatters[g]), psi_floor)
    else:
        lam = params.loadings
        betas = np.empty((G, q, p))
        thetas = np.empty((G, q, q))
        for g in range(G):
            betas[g] = lam.T @ params.pairs[g].prec
            thetas[g] = symmetrize(np.eye(q) - betas[g] @ lam
                                   + betas[g] @ stats.scatters[g] @ betas[g].T)
        system = np.zeros((p * q, p * q))
        rhs = np.zeros((p, q))
        for g in range(G):
            psi_inv = 1.0 / params.psi[g]
            system += stats.counts[g] * np.kron(thetas[g], np.diag(psi_inv))
            rhs += stats.counts[g] * psi_inv[:, None] * (stats.scatters[g] @ betas[g].T)
        try:
            vec_lam = np.linalg.solve(system, rhs.reshape(-1, order="F"))
        except np.linalg.LinAlgError as err:
            raise MixtureError(
                "singular loading-update system; the factor count is likely "
                "too large for these data") from err
        lam_new = vec_lam.reshape((p, q), order="F")
        for g in range(G):
            cross = lam_new @ (betas[g] @ stats.scatters[g])
            quad = lam_new @ thetas[g] @ lam_new.T
            psi_new[g] = np.maximum(
                np.diag(stats.scatters[g]) - 2.0 * np.diag(cross) + np.diag(quad),
                psi_floor)
    return MixtureParams.build(pi_new, mu_new, lam_new, psi_new, counter)


def param_count(G: int, p: int, q: int) -> int:
    """Free parameters: mixing weights, means, shared loadings (net of
    rotational freedom), and per-component diagonal noise."""
    return (G - 1) + G * p + (p * q - q * (q - 1) // 2) + G * p


def bic(result: FitResult, n: int) -> float:
    """2*loglik - m*log(n); larger is better under the default convention."""
    params = result.params
    m = param_count(params.G, params.p, params.q)
    return 2.0 * result.final_loglik - m * math.log(n)


def _as_values_mask(data):
    """Accept a RatingTable-like object or a (values, mask) pair."""
    if hasattr(data, "values") and hasattr(data, "mask"):
        values, mask = data.values, data.mask
    else:
        values, mask = data
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape or values.ndim != 2:
        raise ValueError("values and mask must be 2-d arrays of equal shape")
    return values, mask


def _initial_params(values, mask, G, q, rng, counter,
                    init_resp=None) -> MixtureParams:
    """Soft random start: symmetric Dirichlet responsibilities define the
    component moments on mean-filled data; loadings start as small random
    entries (scaled to the data) and noise variances at the pooled
    per-coordinate variances.

    Loadings deliberately do NOT start from the sample-covariance
    eigenstructure: on clustered data the leading eigenvector is the
    between-cluster direction, and seeding the factor with it lets a
    merged single-cluster solution explain the separation as factor
    variance, a poor local optimum that every restart then falls into.
    """
    n, p = values.shape
    if init_resp is None:
        resp = rng.dirichlet(np.ones(G), size=n)
    else:
        resp = np.asarray(init_resp, dtype=float)
        if resp.shape != (n, G):
            raise ValueError(f"initial responsibilities must have shape {(n, G)}")
    col_mean = np.array([values[mask[:, j], j].mean() for j in range(p)])
    col_var = np.maximum(
        np.array([values[mask[:, j], j].var() for j in range(p)]), 1e-8)
    filled = np.where(mask, values, col_mean)
    counts = resp.sum(axis=0)
    pi = counts / n
    mu = (resp.T @ filled) / counts[:, None]
    lam = rng.normal(0.0, 0.1 * np.sqrt(col_var.mean()), size=(p, q))
    psi = np.tile(col_var, (G, 1))
    return MixtureParams.build(pi, mu, lam, psi, counter)


def _fit_single(values, mask, G, q, config, algorithm, rng,
                init_resp=None) -> FitResult:
    n = values.shape[0]
    counter = InversionCounter()
    pindex = PatternIndex(mask)
    params = _initial_params(values, mask, G, q, rng, counter, init_resp)
    psi_floor = config.psi_floor_scale * params.psi[0]
    min_count = max(q + 1, 2)
    bank = ImputationBank.initialize(params, values, pindex)

    trace = []
    converged = False
    resp = None
    n_sweeps = 0
    while True:
        if algorithm == "em":
            bank.set_exact(params, counter)
        else:
            bank.sweep(params, config.sweeps_per_iter)
            n_sweeps += config.sweeps_per_iter
        dens = component_log_densities(params, bank, counter)
        resp, loglik = posterior_weights(dens, params.pi)
        trace.append(loglik)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) \
                < config.tol * max(abs(trace[-2]), 1.0):
            converged = True
            break
        if len(trace) > config.max_iter:
            break
        stats = weighted_stats(bank, resp, min_count)
        params = mstep_common_factors(stats, params, psi_floor, counter)
    iterations = len(trace) - 1

    if algorithm == "pem":
        # one exact pass so reported quantities carry no partial-sweep bias
        bank.set_exact(params, counter)
        dens = component_log_densities(params, bank, counter)
        resp, loglik = posterior_weights(dens, params.pi)
        trace.append(loglik)

    labels = resp.argmax(axis=1)
    imputed = bank.means[labels, np.arange(n)]
    if q > 0:
        scores = np.empty((n, q))
        for g in range(params.G):
            sel = labels == g
            if sel.any():
                beta_g = params.loadings.T @ params.pairs[g].prec
                scores[sel] = (imputed[sel] - params.mu[g]) @ beta_g.T
    else:
        scores = np.zeros((n, 0))

    final_loglik = trace[-1]
    result = FitResult(
        params=params,
        resp=resp,
        labels=labels,
        loglik_trace=np.asarray(trace),
        final_loglik=final_loglik,
        bic=2.0 * final_loglik - param_count(params.G, params.p, q) * math.log(n),
        iterations=iterations,
        converged=converged,
        algorithm=algorithm,
        sweep_counts={"partial_sweeps": n_sweeps},
        counters=counter.as_dict(),
        imputed_rows=imputed,
        factor_scores=scores,
    )
    return result


def _fit(data, G, q, config, algorithm, init_resp=None) -> FitResult:
    values, mask = _as_values_mask(data)
    n, p = values.shape
    if G < 1:
        raise ValueError("component count must be >= 1")
    if n <= G:
        raise ValueError(f"need more observations ({n}) than components ({G})")
    if q < 0 or q >= p:
        raise ValueError(f"factor count must lie in [0, {p - 1}]")
    attempts = 1 if init_resp is not None else config.restarts
    best = None
    failures = []
    for r in range(attempts):
        rng = np.random.default_rng([config.seed, r])
        try:
            result = _fit_single(values, mask, G, q, config, algorithm, rng,
                                 init_resp)
        except (DegenerateComponentError, NotPositiveDefiniteError) as err:
            failures.append(f"restart {r}: {err}")
            continue
        if best is None or result.final_loglik > best.final_loglik:
            best = result
    if best is None:
        raise DegenerateComponentError(
            f"all {attempts} initializations degenerated "
            f"(G={G}, q={q}); last failure: {failures[-1]}")
    best.restarts_used = attempts
    return best


def fit_em(data, G: int, q: int, config: FitConfig | None = None,
           init_resp=None) -> FitResult:
    """Reference driver with exact conditional E-steps."""
    return _fit(data, G, q, config or FitConfig(), "em", init_resp)


def fit_pem(data, G: int, q: int, config: FitConfig | None = None,
            init_resp=None) -> FitResult:
    """Partial-E-step driver: coordinate sweeps instead of exact conditionals."""
    return _fit(data, G, q, config or FitConfig(), "pem", init_resp)


@dataclass
class CellResult:
    """One (G, q) cell of the model grid."""

    G: int
    q: int
    fit: FitResult | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.fit is not None


@dataclass
class SearchResult:
    cells: list
    bic_table: np.ndarray       # (len(G_range), len(q_range)), NaN where failed
    G_range: list
    q_range: list
    rule: str
    selected: tuple | None      # (G, q) of the chosen cell, None if all failed

    def cell(self, G, q) -> CellResult:
        for c in self.cells:
            if c.G == G and c.q == q:
                return c
        raise KeyError((G, q))

    @property
    def best_fit(self) -> FitResult:
        if self.selected is None:
            raise MixtureError("no model-grid cell succeeded")
        return self.cell(*self.selected).fit


def model_search(data, G_range, q_range, config: FitConfig | None = None,
                 algorithm: str = "pem") -> SearchResult:
    """Fit every (G, q) pair on the grid and select by BIC.

    Each cell runs ``config.restarts`` independent initializations and
    keeps its best final log-likelihood.  Cell failures are recorded
    without aborting the grid.  With the default "max" rule the cell
    maximizing 2*loglik - m*log(n) wins; "min" flips the convention.
    """
    config = config or FitConfig()
    G_range = list(G_range)
    q_range = list(q_range)
    if not G_range or not q_range:
        raise ValueError("model ranges must be non-empty")
    fitter = fit_pem if algorithm == "pem" else fit_em
    cells = []
    table = np.full((len(G_range), len(q_range)), np.nan)
    for i, G in enumerate(G_range):
        for j, q in enumerate(q_range):
            try:
                fit = fitter(data, G, q, config)
                cells.append(CellResult(G=G, q=q, fit=fit))
                table[i, j] = fit.bic
            except (MixtureError, NotPositiveDefiniteError, ValueError,
                    np.linalg.LinAlgError) as err:
                cells.append(CellResult(G=G, q=q, error=str(err)))
    selected = None
    if np.isfinite(table).any():
        flat = np.where(np.isfinite(table), table,
                        -np.inf if config.bic_rule == "max" else np.inf)
        i, j = np.unravel_index(
            flat.argmax() if config.bic_rule == "max" else flat.argmin(),
            table.shape)
        selected = (G_range[i], q_range[j])
    return SearchResult(cells=cells, bic_table=table, G_range=G_range,
                        q_range=q_range, rule=config.bic_rule,
                        selected=selected)
