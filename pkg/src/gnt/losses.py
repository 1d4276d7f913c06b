"""Training objectives over weight grids, with grid-level gradients.

Four losses build on forward scores and occupancy gradients:

* local_nll: negated alignment-summed log-likelihood after row softmax.
* global_nbest_loss: the reference score against a log-sum over a
  hypothesis set of competitor token sequences, each scored on its own
  grid built from the same input.
* interpolated_loss: mixes the two through an exponent alpha applied to
  each row's normalizer; the reference grid is visited by two separate
  forward-backward passes, one on partially normalized rows and one raw.
* normalization_regularizer: mean squared row log-sum, pulling rows
  toward being roughly normalized so that time-synchronous pruning
  stays meaningful.

Gradients returned here are with respect to the raw grid logits and are
exactly what `model.backprop` consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gnt.lattice import (
    WeightGrid,
    apply_partial_normalization,
    forward_score,
    occupancy_gradients,
    row_logsumexp,
)


@dataclass(frozen=True)
class HypothesisSet:
    """Distinct competitor token sequences with the reference among them."""

    hypotheses: tuple[tuple[int, ...], ...]
    ref_index: int

    def __post_init__(self):
        hyps = tuple(tuple(int(z) for z in h) for h in self.hypotheses)
        object.__setattr__(self, "hypotheses", hyps)
        if not 0 <= self.ref_index < len(hyps):
            raise ValueError("ref_index outside the hypothesis list")
        if len(set(hyps)) != len(hyps):
            raise ValueError("duplicate token sequences in hypothesis set")

    @property
    def reference(self) -> tuple[int, ...]:
        return self.hypotheses[self.ref_index]

    def __len__(self) -> int:
        return len(self.hypotheses)


@dataclass
class LossResult:
    value: float
    grid_grad: np.ndarray


@dataclass
class NBestLossResult:
    value: float
    grid_grads: list[np.ndarray]
    scores: np.ndarray  # forward scores per hypothesis as used by this loss


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _through_partial_normalization(grid: WeightGrid, alpha: float,
                                   normalized_grad: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. alpha-normalized rows back to the raw logits."""
    if alpha == 0.0:
        return normalized_grad
    soft = _softmax_rows(grid.logits)
    row_total = normalized_grad.sum(axis=-1, keepdims=True)
    return normalized_grad - alpha * soft * row_total


def local_nll(grid: WeightGrid, tokens) -> LossResult:
    """Negated log-likelihood of `tokens` under row-softmax normalization."""
    normalized = apply_partial_normalization(grid, 1.0)
    value = -forward_score(normalized, tokens)
    occ = occupancy_gradients(normalized, tokens)
    grad = _through_partial_normalization(grid, 1.0, -occ)
    return LossResult(value, grad)


def _check_aligned(grids, hset: HypothesisSet) -> None:
    if len(grids) != len(hset):
        raise ValueError(f"{len(grids)} grids for {len(hset)} hypotheses")
    for grid, hyp in zip(grids, hset.hypotheses):
        if grid.U != len(hyp):
            raise ValueError("grid token dimension does not match its hypothesis")


def global_nbest_loss(grids, hset: HypothesisSet) -> NBestLossResult:
    """Reference score against the log-sum of all hypothesis scores.

    Always >= 0; exactly 0 when the competitors carry no relative mass,
    the collapse mode the training guard watches for.
    """
    _check_aligned(grids, hset)
    scores = np.array([forward_score(g, h) for g, h in zip(grids, hset.hypotheses)])
    lse = _stable_lse(scores)
    value = lse - scores[hset.ref_index]
    weights = np.exp(scores - lse)
    grads = []
    for i, (grid, hyp) in enumerate(zip(grids, hset.hypotheses)):
        occ = occupancy_gradients(grid, hyp)
        w = weights[i] - (1.0 if i == hset.ref_index else 0.0)
        grads.append(w * occ)
    return NBestLossResult(float(value), grads, scores)


def _stable_lse(scores: np.ndarray) -> float:
    m = scores.max()
    if m == -math.inf:
        return -math.inf
    return float(m + np.log(np.exp(scores - m).sum()))


def interpolated_loss(grids, hset: HypothesisSet, alpha: float) -> NBestLossResult:
    """Loss of the log-linear local/global mixture at exponent alpha.

    value = (1 - alpha) * logsumexp of raw hypothesis scores
            - forward score of the reference on its alpha-normalized grid.

    At alpha = 1 this is local_nll of the reference; at alpha = 0 it is
    global_nbest_loss.  The reference grid contributes through both
    terms, so forward-backward runs twice on it.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    _check_aligned(grids, hset)
    ref = hset.ref_index
    scores = np.array([forward_score(g, h) for g, h in zip(grids, hset.hypotheses)])
    lse = _stable_lse(scores)
    ref_grid = grids[ref]
    normalized_ref = apply_partial_normalization(ref_grid, alpha)
    ref_term = forward_score(normalized_ref, hset.reference)
    value = (1.0 - alpha) * lse - ref_term

    grads: list[np.ndarray] = []
    if alpha == 1.0:
        grads = [np.zeros_like(g.logits) for g in grids]
    else:
        weights = (1.0 - alpha) * np.exp(scores - lse)
        for grid, hyp, w in zip(grids, hset.hypotheses, weights):
            grads.append(w * occupancy_gradients(grid, hyp))
    occ_norm = occupancy_gradients(normalized_ref, hset.reference)
    grads[ref] = grads[ref] + _through_partial_normalization(ref_grid, alpha, -occ_norm)
    return NBestLossResult(float(value), grads, scores)


def normalization_regularizer(rows: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of the squared row log-sum, with per-row gradients.

    `rows` is (R, K+1); an empty row set yields 0 by definition.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.size == 0:
        return 0.0, np.zeros_like(rows)
    if rows.ndim != 2:
        raise ValueError(f"rows must be 2-d, got shape {rows.shape}")
    z = row_logsumexp(rows)
    value = float(np.mean(z ** 2))
    grad = 2.0 * z[:, None] * _softmax_rows(rows) / rows.shape[0]
    return value, grad


@dataclass
class ObjectiveResult:
    value: float
    grid_grads: list[np.ndarray]
    interp_value: float
    reg_value: float
    scores: np.ndarray


def total_objective(grids, hset: HypothesisSet, alpha: float,
                    lam: float) -> ObjectiveResult:
    """interpolated_loss plus lam times the regularizer over every row of
    every hypothesis grid."""
    if lam < 0.0:
        raise ValueError(f"regularizer weight must be >= 0, got {lam}")
    interp = interpolated_loss(grids, hset, alpha)
    grads = [g.copy() for g in interp.grid_grads]
    if lam == 0.0:
        return ObjectiveResult(interp.value, grads, interp.value, 0.0, interp.scores)
    rows = np.concatenate([g.logits.reshape(-1, g.K + 1) for g in grids], axis=0)
    reg_value, reg_grad = normalization_regularizer(rows)
    offset = 0
    for i, grid in enumerate(grids):
        n = (grid.T + 1) * (grid.U + 1)
        grads[i] += lam * reg_grad[offset:offset + n].reshape(grid.logits.shape)
        offset += n
    return ObjectiveResult(interp.value + lam * reg_value, grads,
                           interp.value, reg_value, interp.scores)
