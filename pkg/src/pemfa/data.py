"""Ingestion of block-design rating tables, synthetic data generation, and
serialization of fit artifacts.

The table format mirrors how such data are usually laid out: a header row
of product labels, one row per consumer whose first cell is the consumer
id, and blank cells where a product was not presented.  All writers format
floats with ``repr`` (shortest round-trip form) and write atomically, so a
fixed seed reproduces artifacts byte for byte.
"""

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .missing import IncompleteObservation
from .mixture import FitResult


class ParseError(ValueError):
    """Malformed input table; carries 1-based row/column coordinates."""

    def __init__(self, message, row=None, column=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", column {column})" if column is not None
                                    else ")")
        super().__init__(message + loc)
        self.row = row
        self.column = column


@dataclass
class RatingTable:
    """A rectangular rating table with missing entries.

    ``values`` holds NaN at unobserved cells; ``mask`` is True where a
    rating was recorded.
    """

    product_names: list
    consumer_ids: list
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        n, p = self.values.shape
        if len(self.product_names) != p or len(self.consumer_ids) != n:
            raise ValueError("label lengths do not match the value grid")
        if not self.mask.any(axis=1).all():
            raise ValueError("every row needs at least one observed rating")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def row(self, i: int) -> IncompleteObservation:
        return IncompleteObservation(values=self.values[i], mask=self.mask[i])

    def observations(self) -> list:
        return [self.row(i) for i in range(self.n)]


def parse_table(source, delimiter: str = ",", scale=None) -> RatingTable:
    """Read a rating table from a path, file object, or text content.

    Blank or whitespace-only cells are missing; anything else must parse
    as a real number.  With ``scale=(lo, hi)`` every observed value is
    required to lie inside the closed interval.

    Raises
    ------
    ParseError
        On a non-numeric cell, an out-of-scale value, a ragged row, or a
        row with no observed ratings, with 1-based coordinates.
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, (str, os.PathLike)) and "\n" not in str(source):
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = str(source)
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input") from None
    if len(header) < 2:
        raise ParseError("header must list at least one product", row=1)
    product_names = [h.strip() for h in header[1:]]
    p = len(product_names)

    consumer_ids = []
    rows = []
    masks = []
    for r, cells in enumerate(reader, start=2):
        if not cells or (len(cells) == 1 and not cells[0].strip()):
            continue  # ignore trailing blank lines
        if len(cells) != p + 1:
            raise ParseError(
                f"expected {p + 1} cells, found {len(cells)}", row=r)
        consumer_ids.append(cells[0].strip())
        vals = np.full(p, np.nan)
        mask = np.zeros(p, dtype=bool)
        for c, cell in enumerate(cells[1:], start=2):
            token = cell.strip()
            if not token:
                continue
            try:
                value = float(token)
            except ValueError:
                raise ParseError(f"non-numeric cell {token!r}",
                                 row=r, column=c) from None
            if scale is not None and not scale[0] <= value <= scale[1]:
                raise ParseError(
                    f"value {value} outside scale [{scale[0]}, {scale[1]}]",
                    row=r, column=c)
            vals[c - 2] = value
            mask[c - 2] = True
        if not mask.any():
            raise ParseError("row has no observed ratings", row=r)
        rows.append(vals)
        masks.append(mask)
    if not rows:
        raise ParseError("no data rows found")
    return RatingTable(product_names=product_names, consumer_ids=consumer_ids,
                       values=np.vstack(rows), mask=np.vstack(masks))


def _fmt(x: float) -> str:
    """Shortest exact decimal form; integers lose the trailing '.0'."""
    f = float(x)
    if f.is_integer() and abs(f) < 1e15:
        return str(int(f))
    return repr(f)


def _atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_table(table: RatingTable, path, delimiter: str = ",") -> None:
    """Serialize a rating table; missing cells become blanks."""
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["consumer"] + list(table.product_names))
    for i in range(table.n):
        cells = [table.consumer_ids[i]]
        for j in range(table.p):
            cells.append(_fmt(table.values[i, j]) if table.mask[i, j] else "")
        writer.writerow(cells)
    _atomic_write(path, buf.getvalue())


@dataclass
class SyntheticSpec:
    """Ground truth for a synthetic block-design dataset.

    ``observed_per_row`` is the block size: how many of the p products
    each consumer rates.  The masking is balanced so per-product
    observation counts differ by at most one (falling back to uniform
    random subsets, flagged in the truth record, if balancing fails).
    """

    n: int
    p: int
    G: int
    q: int
    observed_per_row: int
    seed: int
    pi: np.ndarray
    mu: np.ndarray          # (G, p)
    loadings: np.ndarray    # (p, q)
    psi: np.ndarray         # (G, p)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.loadings = np.asarray(self.loadings, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        if not 1 <= self.observed_per_row <= self.p:
            raise ValueError("block size must lie in [1, p]")
        if self.q >= self.p:
            raise ValueError("factor count must be smaller than dimension")
        if self.pi.shape != (self.G,) or abs(self.pi.sum() - 1.0) > 1e-9 \
                or np.any(self.pi <= 0):
            raise ValueError("mixing proportions must be positive and sum to 1")
        if self.mu.shape != (self.G, self.p) or self.psi.shape != (self.G, self.p):
            raise ValueError("mean/noise shapes must be (G, p)")
        if self.loadings.shape != (self.p, self.q):
            raise ValueError("loadings shape must be (p, q)")
        if np.any(self.psi <= 0):
            raise ValueError("noise variances must be positive")

    @classmethod
    def random(cls, n, p, G, q, observed_per_row, seed, separation=1.5,
               rating_center=5.0):
        """Draw a plausible hedonic-scale truth, deterministic in the seed."""
        rng = np.random.default_rng([seed, 0xA11CE])
        pi = rng.dirichlet(np.full(G, 8.0))
        mu = np.clip(rng.normal(rating_center, separation, size=(G, p)), 1.0, 9.0)
        loadings = rng.normal(0.0, 0.8, size=(p, q))
        psi = rng.uniform(0.3, 1.0, size=(G, p))
        return cls(n=n, p=p, G=G, q=q, observed_per_row=observed_per_row,
                   seed=seed, pi=pi, mu=mu, loadings=loadings, psi=psi)


def _balanced_subsets(n, p, k, rng, max_passes=500):
    """Deal k products to each of n rows with per-product counts within 1.

    Builds a pool with near-equal product multiplicities, shuffles, and
    repairs rows containing duplicates by random swaps.  Returns
    ``(rows, balanced)``; on repair failure falls back to independent
    uniform k-subsets with ``balanced=False``.
    """
    total = n * k
    counts = np.full(p, total // p)
    extra = rng.permutation(p)[: total % p]
    counts[extra] += 1
    pool = np.repeat(np.arange(p), counts)
    rng.shuffle(pool)
    rows = pool.reshape(n, k)
    for _ in range(max_passes):
        dup_rows = [i for i in range(n) if np.unique(rows[i]).size < k]
        if not dup_rows:
            return rows, True
        for i in dup_rows:
            seen = set()
            for j in range(k):
                v = rows[i, j]
                if v in seen:
                    i2 = int(rng.integers(n))
                    j2 = int(rng.integers(k))
                    rows[i, j], rows[i2, j2] = rows[i2, j2], rows[i, j]
                else:
                    seen.add(v)
    rows = np.stack([rng.choice(p, size=k, replace=False) for _ in range(n)])
    return rows, False


def generate_bib(spec: SyntheticSpec):
    """Sample a synthetic rating table plus its ground-truth record.

    Per row: a component from the mixing proportions, latent factors and
    diagonal noise per the factor model, then all but ``observed_per_row``
    entries masked by the balanced block assignment.  Deterministic given
    the spec's seed.

    Returns
    -------
    table : RatingTable
    truth : dict
        JSON-ready record of the generating parameters, per-row component
        labels and factor draws, per-product observation counts, and
        whether the mask is exactly balanced.
    """
    rng = np.random.default_rng([spec.seed, 0xB1B])
    n, p, G, q = spec.n, spec.p, spec.G, spec.q
    labels = rng.choice(G, size=n, p=spec.pi)
    factors = rng.standard_normal((n, q))
    noise = rng.standard_normal((n, p))
    values = spec.mu[labels] + factors @ spec.loadings.T \
        + noise * np.sqrt(spec.psi[labels])
    if spec.observed_per_row == p:
        mask = np.ones((n, p), dtype=bool)
        balanced = True
    else:
        chosen, balanced = _balanced_subsets(n, p, spec.observed_per_row, rng)
        mask = np.zeros((n, p), dtype=bool)
        mask[np.arange(n)[:, None], chosen] = True
    values = np.where(mask, values, np.nan)
    product_names = [product_label(j) for j in range(p)]
    consumer_ids = [str(i + 1) for i in range(n)]
    table = RatingTable(product_names=product_names, consumer_ids=consumer_ids,
                        values=values, mask=mask)
    truth = {
        "n": n, "p": p, "G": G, "q": q,
        "observed_per_row": spec.observed_per_row,
        "seed": spec.seed,
        "balanced": bool(balanced),
        "pi": spec.pi.tolist(),
        "mu": spec.mu.tolist(),
        "loadings": spec.loadings.tolist(),
        "psi": spec.psi.tolist(),
        "labels": labels.tolist(),
        "factors": factors.tolist(),
        "product_counts": mask.sum(axis=0).tolist(),
    }
    return table, truth


def product_label(j: int) -> str:
    """A, B, ..., Z, AA, AB, ... spreadsheet-style product names."""
    name = ""
    j += 1
    while j > 0:
        j, r = divmod(j - 1, 26)
        name = chr(ord("A") + r) + name
    return name


def write_truth(truth: dict, path) -> None:
    _atomic_write(path, json.dumps(truth, sort_keys=True, indent=1) + "\n")


def read_truth(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_fit(result: FitResult, table: RatingTable, outdir) -> dict:
    """Write the artifact set for one fit under ``outdir``.

    Files
    -----
    summary.json
        Parameters, selection criterion, convergence metadata, counters.
    assignments.csv
        Per consumer: MAP component, posterior probabilities, factor
        scores (posterior factor mean of the imputed row under the MAP
        component's regression).
    cluster_means.csv
        Per-component per-product estimated mean liking.
    trace.tsv
        Iteration index and log-likelihood, tab-separated.

    Returns the mapping of artifact names to paths.
    """
    os.makedirs(outdir, exist_ok=True)
    params = result.params
    G, q = params.G, params.q
    paths = {}

    summary = {
        "algorithm": result.algorithm,
        "n": result.n,
        "p": params.p,
        "G": G,
        "q": q,
        "loglik": result.final_loglik,
        "bic": result.bic,
        "bic_convention": "larger_is_better",
        "iterations": result.iterations,
        "converged": result.converged,
        "restarts_used": result.restarts_used,
        "sweep_counts": result.sweep_counts,
        "inversion_counts": result.counters,
        "pi": params.pi.tolist(),
        "mu": params.mu.tolist(),
        "loadings": params.loadings.tolist(),
        "psi": params.psi.tolist(),
        "factor_score_estimator":
            "loadings' * precision * (imputed_row - component_mean), "
            "MAP component",
    }
    paths["summary"] = os.path.join(outdir, "summary.json")
    _atomic_write(paths["summary"], json.dumps(summary, sort_keys=True, indent=1) + "\n")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["consumer", "map_component"]
                    + [f"resp_{g}" for g in range(G)]
                    + [f"factor_{r}" for r in range(q)])
    for i in range(result.n):
        row = [table.consumer_ids[i], str(int(result.labels[i]))]
        row += [repr(float(v)) for v in result.resp[i]]
        row += [repr(float(v)) for v in result.factor_scores[i]]
        writer.writerow(row)
    paths["assignments"] = os.path.join(outdir, "assignments.csv")
    _atomic_write(paths["assignments"], buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["component"] + list(table.product_names))
    for g in range(G):
        writer.writerow([str(g)] + [repr(float(v)) for v in params.mu[g]])
    paths["cluster_means"] = os.path.join(outdir, "cluster_means.csv")
    _atomic_write(paths["cluster_means"], buf.getvalue())

    lines = ["iteration\tloglik"]
    lines += [f"{t}\t{repr(float(v))}" for t, v in enumerate(result.loglik_trace)]
    paths["trace"] = os.path.join(outdir, "trace.tsv")
    _atomic_write(paths["trace"], "\n".join(lines) + "\n")
    return paths


def write_compare(result_em: FitResult, result_pem: FitResult, outdir) -> dict:
    """Write the paired-trace artifact set for an EM-vs-partial-EM run."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}
    n_rows = max(len(result_em.loglik_trace), len(result_pem.loglik_trace))
    lines = ["iteration\tloglik_em\tloglik_pem"]
    for t in range(n_rows):
        em_v = repr(float(result_em.loglik_trace[t])) \
            if t < len(result_em.loglik_trace) else ""
        pem_v = repr(float(result_pem.loglik_trace[t])) \
            if t < len(result_pem.loglik_trace) else ""
        lines.append(f"{t}\t{em_v}\t{pem_v}")
    paths["trace"] = os.path.join(outdir, "compare_trace.tsv")
    _atomic_write(paths["trace"], "\n".join(lines) + "\n")

    gap = abs(result_em.final_loglik - result_pem.final_loglik)
    summary = {
        "loglik_em": result_em.final_loglik,
        "loglik_pem": result_pem.final_loglik,
        "gap_abs": gap,
        "gap_rel": gap / max(abs(result_em.final_loglik), 1e-300),
        "iterations_em": result_em.iterations,
        "iterations_pem": result_pem.iterations,
        "inversion_counts_em": result_em.counters,
        "inversion_counts_pem": result_pem.counters,
    }
    paths["summary"] = os.path.join(outdir, "compare_summary.json")
    _atomic_write(paths["summary"], json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return paths


def write_search(search, outdir) -> dict:
    """Write the BIC grid (selected cell marked) and search metadata."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}
    lines = ["\t".join(["G\\q"] + [str(q) for q in search.q_range])]
    for i, G in enumerate(search.G_range):
        cells = [str(G)]
        for j, q in enumerate(search.q_range):
            v = search.bic_table[i, j]
            if not np.isfinite(v):
                cells.append("failed")
            else:
                text = repr(float(v))
                if search.selected == (G, q):
                    text += "*"
                cells.append(text)
        lines.append("\t".join(cells))
    convention = ("selected cell (*) maximizes 2*loglik - m*log(n)"
                  if search.rule == "max"
                  else "selected cell (*) minimizes 2*loglik - m*log(n)")
    lines.append("# " + convention)
    paths["grid"] = os.path.join(outdir, "bic_grid.tsv")
    _atomic_write(paths["grid"], "\n".join(lines) + "\n")

    summary = {
        "rule": search.rule,
        "convention": convention,
        "G_range": list(search.G_range),
        "q_range": list(search.q_range),
        "selected": list(search.selected) if search.selected else None,
        "cells": [
            {"G": c.G, "q": c.q,
             "bic": (c.fit.bic if c.ok else None),
             "loglik": (c.fit.final_loglik if c.ok else None),
             "converged": (c.fit.converged if c.ok else None),
             "error": c.error}
            for c in search.cells
        ],
    }
    paths["summary"] = os.path.join(outdir, "search_summary.json")
    _atomic_write(paths["summary"], json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return paths
