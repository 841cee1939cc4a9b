"""Score matrix, dustbin augmentation, Sinkhorn normalization, match readout.

All heavy lifting stays in the log domain: the assignment matrix holds log
probabilities, normalization subtracts log-sum-exp corrections, and only the
final readout or exports exponentiate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, NumericError, ShapeError


@dataclass
class AssignmentMatrix:
    """Log-domain soft assignment with one dustbin row and column."""

    log_p: Tensor          # (n+1, m+1)
    iterations: int
    mode: str = "alternating"

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_p.data)


@dataclass(frozen=True)
class MatchSet:
    """Hard matches read out of a soft assignment (or a classical matcher)."""

    pairs: tuple           # of (i, j, confidence)
    unmatched_rows: tuple  # row indices with no accepted match
    unmatched_cols: tuple

    @property
    def index_pairs(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.pairs}


def score_matrix(desc_src: Tensor, desc_tgt: Tensor) -> Tensor:
    """Pairwise descriptor dot products, (n, m); no scaling."""
    if desc_src.ndim != 2 or desc_tgt.ndim != 2 or desc_src.shape[1] != desc_tgt.shape[1]:
        raise ShapeError(
            f"descriptor depths differ: {desc_src.shape} vs {desc_tgt.shape}"
        )
    return desc_src @ desc_tgt.T


def augment_dustbin(raw: Tensor, dustbin: Tensor) -> Tensor:
    """Append one dustbin column and row holding the shared learnable scalar."""
    if raw.ndim != 2:
        raise ShapeError("raw score matrix must be 2-D")
    if dustbin.size != 1:
        raise ShapeError("dustbin score must be a scalar")
    n, m = raw.shape
    flat = dustbin if dustbin.ndim == 1 else dustbin.broadcast_to((1,))
    with_col = ad.concat([raw, flat.broadcast_to((n, 1))], axis=1)
    return ad.concat([with_col, flat.broadcast_to((1, m + 1))], axis=0)


def _log_marginals(n_rows: int, n_cols: int, marginals: str, dtype):
    """Log target masses per row/column of the augmented matrix.

    Uniform: every row and column carries mass 1. Dustbin-weighted: the
    dustbin row absorbs mass m and the dustbin column mass n, with the whole
    plan normalized to total mass 1 (the convention of related image
    matchers).
    """
    if marginals == "uniform":
        return (np.zeros((n_rows, 1), dtype=dtype), np.zeros((1, n_cols), dtype=dtype))
    n, m = n_rows - 1, n_cols - 1
    total = float(n + m)
    row = np.full((n_rows, 1), -np.log(total), dtype=dtype)
    col = np.full((1, n_cols), -np.log(total), dtype=dtype)
    row[-1, 0] = np.log(m / total)
    col[0, -1] = np.log(n / total)
    return row, col


def sinkhorn(
    augmented: Tensor,
    iterations: int = 100,
    mode: str = "alternating",
    marginals: str = "uniform",
    track_deviation: bool = False,
) -> AssignmentMatrix:
    """Iterative log-domain row/column normalization.

    Alternating mode applies the row correction, recomputes, then the column
    correction each iteration and converges to the doubly stochastic target.
    Simultaneous mode subtracts both corrections from the same iterate; it is
    kept for fidelity with the closed-form statement of the update but does
    not converge in general.
    """
    if iterations < 1:
        raise ArgumentError("sinkhorn needs at least one iteration")
    if mode not in ("alternating", "simultaneous"):
        raise ArgumentError(f"unknown sinkhorn mode {mode!r}")
    if not np.all(np.isfinite(augmented.data)):
        raise NumericError("sinkhorn input contains non-finite values")
    n_rows, n_cols = augmented.shape
    log_mu, log_nu = _log_marginals(n_rows, n_cols, marginals, augmented.data.dtype)
    mu = ad.as_tensor(log_mu)
    nu = ad.as_tensor(log_nu)

    deviations = [] if track_deviation else None
    current = augmented
    for _ in range(iterations):
        if mode == "alternating":
            row_fix = current.logsumexp(axis=1, keepdims=True) - mu
            current = current - row_fix.broadcast_to(current.shape)
            col_fix = current.logsumexp(axis=0, keepdims=True) - nu
            current = current - col_fix.broadcast_to(current.shape)
        else:
            row_fix = current.logsumexp(axis=1, keepdims=True) - mu
            col_fix = current.logsumexp(axis=0, keepdims=True) - nu
            current = (
                current
                - row_fix.broadcast_to(current.shape)
                - col_fix.broadcast_to(current.shape)
            )
        if deviations is not None:
            deviations.append(marginal_deviation(current.data, log_mu, log_nu))
    result = AssignmentMatrix(log_p=current, iterations=iterations, mode=mode)
    if track_deviation:
        return result, deviations
    return result


def marginal_deviation(log_p: np.ndarray, log_mu=None, log_nu=None) -> float:
    """Max absolute row/column mass error of exp(log_p) against its targets."""
    p = np.exp(log_p)
    row_target = 1.0 if log_mu is None else np.exp(log_mu).reshape(-1)
    col_target = 1.0 if log_nu is None else np.exp(log_nu).reshape(-1)
    row_err = np.max(np.abs(p.sum(axis=1) - row_target))
    col_err = np.max(np.abs(p.sum(axis=0) - col_target))
    return float(max(row_err, col_err))


def extract_matches(assign: AssignmentMatrix, threshold: float = 0.2) -> MatchSet:
    """Mutual-argmax readout of the soft assignment.

    A pair (i, j) is kept when j is row i's argmax, i is column j's argmax
    (dustbin included in both argmaxes, excluded from pairing) and the
    probability clears the threshold. Everything else is unmatched.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ArgumentError("threshold must be in [0, 1]")
    probs = assign.probabilities
    n, m = probs.shape[0] - 1, probs.shape[1] - 1
    row_best = probs.argmax(axis=1)
    col_best = probs.argmax(axis=0)
    pairs = []
    matched_rows, matched_cols = set(), set()
    for i in range(n):
        j = int(row_best[i])
        if j == m:  # dustbin column
            continue
        if int(col_best[j]) != i:
            continue
        conf = float(probs[i, j])
        if conf >= threshold:
            pairs.append((i, j, conf))
            matched_rows.add(i)
            matched_cols.add(j)
    return MatchSet(
        pairs=tuple(pairs),
        unmatched_rows=tuple(i for i in range(n) if i not in matched_rows),
        unmatched_cols=tuple(j for j in range(m) if j not in matched_cols),
    )


def write_assignment_csv(path, assign: AssignmentMatrix) -> None:
    """Dense probability grid with index headers; last row/column is the dustbin."""
    probs = assign.probabilities
    n, m = probs.shape[0] - 1, probs.shape[1] - 1
    header = [""] + [str(j) for j in range(m)] + ["dustbin"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n + 1):
            label = str(i) if i < n else "dustbin"
            writer.writerow([label] + [f"{v:.8e}" for v in probs[i]])
