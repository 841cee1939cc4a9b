"""Supervised losses, Adam, and the training loop over preprocessed pairs.

All three losses operate on the log-domain Sinkhorn output with standard
cross-entropy signs (subtract the true-cell score, add a log-sum-exp), so
each is bounded below by zero and minimized on a one-hot assignment that
agrees with the labels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .cloud import CorrespondenceLabels
from .errors import ArgumentError, NumericError
from .network import HyperParams, ModelParameters, save_checkpoint
from .pairio import PreprocessedPair
from .pipeline import batch_assignments
from .transport import AssignmentMatrix, MatchSet, extract_matches

LOSS_KINDS = ("nll", "nllp", "dce")


def ground_truth_cells(labels: CorrespondenceLabels, n: int, m: int):
    """Row/column indices of every supervised cell in the augmented matrix.

    Matched pairs map to their own cells, unmatched rows to the dustbin
    column ``m`` and unmatched columns to the dustbin row ``n``. Ignored
    indices contribute nothing.
    """
    rows, cols = [], []
    for i, j in sorted(labels.matched):
        rows.append(i)
        cols.append(j)
    for i in sorted(labels.unmatched_rows):
        rows.append(i)
        cols.append(m)
    for j in sorted(labels.unmatched_cols):
        rows.append(n)
        cols.append(j)
    if not rows:
        raise ArgumentError("labels contain no ground-truth cells")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.max() > n or cols.max() > m:
        raise ArgumentError("label index outside the assignment matrix")
    return rows, cols


def loss_nll(assign: AssignmentMatrix, labels: CorrespondenceLabels) -> Tensor:
    """Negative log-likelihood over every supervised cell."""
    log_p = assign.log_p
    n, m = log_p.shape[0] - 1, log_p.shape[1] - 1
    rows, cols = ground_truth_cells(labels, n, m)
    return -(log_p.gather_pairs(rows, cols).sum())


def loss_nllp(
    assign: AssignmentMatrix,
    labels: CorrespondenceLabels,
    penalty_excludes_dustbin: bool = False,
) -> Tensor:
    """NLL plus a row-direction penalty for ground-truth-unmatched rows.

    The penalty is a cross entropy pushing each unmatched row's mass onto the
    dustbin. By default its log-sum runs over the whole row including the
    dustbin, which keeps it non-negative and zero when the row is correctly
    assigned; ``penalty_excludes_dustbin`` restricts the sum to the real
    columns instead (the literal summation bound), at the cost of losing the
    lower bound.
    """
    base = loss_nll(assign, labels)
    unmatched = sorted(labels.unmatched_rows)
    if not unmatched:
        return base
    log_p = assign.log_p
    m = log_p.shape[1] - 1
    rows = log_p.gather_rows(np.asarray(unmatched, dtype=np.intp))
    if penalty_excludes_dustbin:
        rows = rows.narrow(1, 0, m)
    lse = rows.logsumexp(axis=1)
    dust = log_p.gather_pairs(
        np.asarray(unmatched, dtype=np.intp), np.full(len(unmatched), m, dtype=np.intp)
    )
    return base + (lse - dust).sum()


def loss_dce(assign: AssignmentMatrix, labels: CorrespondenceLabels) -> Tensor:
    """Dual cross entropy: row-wise and column-wise softmax losses.

    Matched cells pay both directions; dustbin cells pay only the direction
    they supervise.
    """
    log_p = assign.log_p
    n, m = log_p.shape[0] - 1, log_p.shape[1] - 1
    rows, cols = ground_truth_cells(labels, n, m)  # validates emptiness

    matched = np.asarray(sorted(labels.matched), dtype=np.intp).reshape(-1, 2)
    un_rows = np.asarray(sorted(labels.unmatched_rows), dtype=np.intp)
    un_cols = np.asarray(sorted(labels.unmatched_cols), dtype=np.intp)

    row_lse = log_p.logsumexp(axis=1)
    col_lse = log_p.logsumexp(axis=0)

    row_idx = np.concatenate([matched[:, 0], un_rows])
    row_cell_cols = np.concatenate([matched[:, 1], np.full(len(un_rows), m, dtype=np.intp)])
    col_idx = np.concatenate([matched[:, 1], un_cols])
    col_cell_rows = np.concatenate([matched[:, 0], np.full(len(un_cols), n, dtype=np.intp)])

    total = None
    if len(row_idx):
        row_term = row_lse.gather_rows(row_idx).sum() - log_p.gather_pairs(
            row_idx, row_cell_cols
        ).sum()
        total = row_term
    if len(col_idx):
        col_term = col_lse.gather_rows(col_idx).sum() - log_p.gather_pairs(
            col_cell_rows, col_idx
        ).sum()
        total = col_term if total is None else total + col_term
    return total


def compute_loss(kind: str, assign, labels, penalty_excludes_dustbin: bool = False) -> Tensor:
    if kind == "nll":
        return loss_nll(assign, labels)
    if kind == "nllp":
        return loss_nllp(assign, labels, penalty_excludes_dustbin)
    if kind == "dce":
        return loss_dce(assign, labels)
    raise ArgumentError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(named_params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update in place; raises on non-finite gradients."""
    state.step += 1
    correct1 = 1.0 - state.beta1 ** state.step
    correct2 = 1.0 - state.beta2 ** state.step
    for name, tensor in named_params.items():
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.first_moment.setdefault(name, np.zeros_like(tensor.data))
        v = state.second_moment.setdefault(name, np.zeros_like(tensor.data))
        m += (1.0 - state.beta1) * (grad - m)
        v += (1.0 - state.beta2) * (grad * grad - v)
        m_hat = m / correct1
        v_hat = v / correct2
        tensor.data = tensor.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def match_metrics(matches: MatchSet, labels: CorrespondenceLabels) -> dict:
    """Precision and accuracy of hard matches against the labels.

    Precision counts correct predicted matches over all judgeable predicted
    matches (pairs touching an ignored index cannot be judged and are left
    out). Accuracy counts correct decisions over every supervised cell,
    dustbin assignments included.
    """
    judged = {
        (i, j)
        for (i, j) in matches.index_pairs
        if i not in labels.ignored_rows and j not in labels.ignored_cols
    }
    correct_pairs = judged & labels.matched
    precision = len(correct_pairs) / len(judged) if judged else 0.0

    unmatched_rows_pred = set(matches.unmatched_rows)
    unmatched_cols_pred = set(matches.unmatched_cols)
    correct_cells = (
        len(correct_pairs)
        + len(labels.unmatched_rows & unmatched_rows_pred)
        + len(labels.unmatched_cols & unmatched_cols_pred)
    )
    total = labels.total_cells()
    accuracy = correct_cells / total if total else 0.0
    return {
        "precision": precision,
        "accuracy": accuracy,
        "predicted": len(matches.pairs),
        "judged": len(judged),
        "correct": len(correct_pairs),
        "gt_matches": len(labels.matched),
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainRun:
    """Configuration for one training run; deterministic given the seed."""

    dataset_id: str = "synthetic"
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    loss_kind: str = "nllp"
    learning_rate: float = 1e-4
    max_steps: int | None = None
    checkpoint_every: int = 0  # epochs between checkpoints; 0 writes only the final one
    match_threshold: float = 0.2
    nllp_penalty_excludes_dustbin: bool = False

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ArgumentError(f"unknown loss kind {self.loss_kind!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    params: ModelParameters
    history: list
    optimizer: AdamState
    steps: int


def train(
    pairs: list[PreprocessedPair],
    run: TrainRun,
    hyper: HyperParams,
    params: ModelParameters | None = None,
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
    run_dir=None,
    log=None,
) -> TrainResult:
    """Train over preprocessed pairs; per-epoch shuffling derives from
    ``(seed, epoch)`` so runs resume deterministically from checkpoints.
    """
    if not pairs:
        raise ArgumentError("training dataset is empty")
    for pair in pairs:
        if pair.labels.total_cells() == 0:
            raise ArgumentError("a training pair has zero ground-truth cells")
    if params is None:
        params = ModelParameters.initialize(hyper, seed=run.seed)
    if optimizer is None:
        optimizer = AdamState(learning_rate=run.learning_rate)
    named = params.named_parameters()
    history: list[dict] = []
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    steps = optimizer.step
    stop = False
    for epoch in range(start_epoch, run.epochs):
        rng = np.random.default_rng([run.seed, epoch])
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        batches = 0
        stats = {"precision": 0.0, "accuracy": 0.0}
        pair_count = 0
        for lo in range(0, len(order), run.batch_size):
            batch = [pairs[i] for i in order[lo : lo + run.batch_size]]
            assignments = batch_assignments(params, batch, train=True)
            loss = None
            for pair, assign in zip(batch, assignments):
                term = compute_loss(
                    run.loss_kind, assign, pair.labels, run.nllp_penalty_excludes_dustbin
                )
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            params.zero_grad()
            loss.backward()
            adam_step(named, optimizer)
            steps += 1
            epoch_loss += loss.item()
            batches += 1
            for pair, assign in zip(batch, assignments):
                metrics = match_metrics(
                    extract_matches(assign, run.match_threshold), pair.labels
                )
                stats["precision"] += metrics["precision"]
                stats["accuracy"] += metrics["accuracy"]
                pair_count += 1
            if run.max_steps is not None and steps >= run.max_steps:
                stop = True
                break
        record = {
            "epoch": epoch,
            "loss": epoch_loss / max(batches, 1),
            "precision": stats["precision"] / max(pair_count, 1),
            "accuracy": stats["accuracy"] / max(pair_count, 1),
            "steps": steps,
        }
        history.append(record)
        if log is not None:
            log(record)
        if run_dir is not None:
            with open(run_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            due = run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0
            if due:
                write_training_checkpoint(
                    run_dir / f"checkpoint_{epoch:05d}.pmc", params, run, optimizer, epoch + 1
                )
        if stop:
            break
    if run_dir is not None:
        write_training_checkpoint(run_dir / "checkpoint_final.pmc", params, run, optimizer,
                                  history[-1]["epoch"] + 1 if history else start_epoch)
    return TrainResult(params=params, history=history, optimizer=optimizer, steps=steps)


def write_training_checkpoint(path, params, run: TrainRun, optimizer: AdamState,
                              next_epoch: int) -> None:
    meta = {
        "run": {
            "dataset_id": run.dataset_id,
            "epochs": run.epochs,
            "batch_size": run.batch_size,
            "seed": run.seed,
            "loss_kind": run.loss_kind,
            "learning_rate": run.learning_rate,
            "match_threshold": run.match_threshold,
            "nllp_penalty_excludes_dustbin": run.nllp_penalty_excludes_dustbin,
        },
        "next_epoch": next_epoch,
        "optimizer": {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "step": optimizer.step,
        },
    }
    arrays = {}
    for name, moment in optimizer.first_moment.items():
        arrays[f"adam.m.{name}"] = moment
    for name, moment in optimizer.second_moment.items():
        arrays[f"adam.v.{name}"] = moment
    save_checkpoint(path, params, extra_meta=meta, extra_arrays=arrays)


def load_optimizer(meta: dict, extras: dict) -> AdamState:
    info = meta.get("optimizer", {})
    state = AdamState(
        learning_rate=info.get("learning_rate", 1e-4),
        beta1=info.get("beta1", 0.9),
        beta2=info.get("beta2", 0.999),
        eps=info.get("eps", 1e-8),
        step=info.get("step", 0),
    )
    for name, arr in extras.items():
        if name.startswith("adam.m."):
            state.first_moment[name[len("adam.m.") :]] = arr.astype(np.float32)
        elif name.startswith("adam.v."):
            state.second_moment[name[len("adam.v.") :]] = arr.astype(np.float32)
    return state
