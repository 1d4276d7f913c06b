"""Alignment lattice: log-space numerics, exhaustive oracles, and forward/backward.

The lattice for an utterance with T frames and U output tokens is a
(T+1) x (U+1) grid of nodes.  From node (t, u) a BLANK move advances to
(t+1, u) with weight W[t, u, 0] and a TOKEN move advances to (t, u+1)
with weight W[t, u, z[u]].  Complete paths run from (0, 0) to (T, U);
by default a path may end with a token move (no final blank is
required), so token moves at t = T are legal and blank moves at t = T
are not.  All weights are natural-log values; nothing here assumes the
per-node weight rows are normalized.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

LOG_ZERO = float("-inf")

BLANK = 0

DEFAULT_ORACLE_CAP = 12


class OracleSizeError(ValueError):
    """Raised when an exhaustive enumeration would be too large to be instant."""


class Move(NamedTuple):
    """One lattice move departing from node (t, u)."""

    t: int
    u: int
    is_token: bool


Path = tuple[Move, ...]


@dataclass(frozen=True)
class WeightGrid:
    """Per-node unnormalized log-weight rows over the alignment grid.

    logits has shape (T+1, U+1, K+1) with label 0 the blank.  Blank
    entries at t = T and token entries at u = U exist but are masked in
    every algorithm (no path uses them).
    """

    logits: np.ndarray

    def __post_init__(self):
        if self.logits.ndim != 3:
            raise ValueError(f"grid logits must be 3-d, got shape {self.logits.shape}")
        if self.logits.shape[2] < 2:
            raise ValueError("grid needs at least blank plus one token label")
        if not np.isfinite(self.logits).all():
            raise ValueError("grid logits must be finite")

    @property
    def T(self) -> int:
        return self.logits.shape[0] - 1

    @property
    def U(self) -> int:
        return self.logits.shape[1] - 1

    @property
    def K(self) -> int:
        return self.logits.shape[2] - 1


def logsumexp(values) -> float:
    """Stable log(sum(exp(values))) over a non-empty sequence of log values.

    Exact for a single element, and absorbs -inf entries exactly:
    logsumexp([a, -inf]) == a.
    """
    vals = list(values)
    if not vals:
        raise ValueError("logsumexp of an empty sequence")
    m = max(vals)
    if m == LOG_ZERO:
        return LOG_ZERO
    if len(vals) == 1:
        return float(vals[0])
    acc = 0.0
    for v in vals:
        acc += math.exp(v - m)
    return m + math.log(acc)


def row_logsumexp(rows: np.ndarray) -> np.ndarray:
    """logsumexp along the last axis of an array of log values."""
    m = np.max(rows, axis=-1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(rows - safe), axis=-1)) + np.squeeze(safe, axis=-1)
    return np.where(np.isfinite(np.squeeze(m, axis=-1)), out, np.squeeze(m, axis=-1))


def enumerate_paths(T: int, U: int, cap: int = DEFAULT_ORACLE_CAP,
                    final_blank: bool = False) -> list[Path]:
    """All C(T+U, U) monotone staircase paths from (0, 0) to (T, U).

    Brute-force oracle; refuses instances with T + U beyond `cap`.  With
    final_blank=True only paths whose last move is a blank are returned
    (token moves at t = T excluded), the convention under which the
    per-grid path masses of a row-normalized model sum to at most one.
    """
    if T < 0 or U < 0:
        raise ValueError("negative grid dimensions")
    if T + U > cap:
        raise OracleSizeError(f"T+U = {T + U} exceeds oracle cap {cap}")
    paths = []
    for token_positions in itertools.combinations(range(T + U), U):
        token_set = set(token_positions)
        t = u = 0
        moves = []
        for v in range(T + U):
            if v in token_set:
                moves.append(Move(t, u, True))
                u += 1
            else:
                moves.append(Move(t, u, False))
                t += 1
        if final_blank and moves and moves[-1].is_token:
            continue
        paths.append(tuple(moves))
    return paths


def path_to_labels(path: Path, tokens) -> tuple[int, ...]:
    """Interleave blanks (0) and the entries of `tokens` along `path`.

    Stripping blanks from the result recovers `tokens` exactly.
    """
    n_token_moves = sum(1 for m in path if m.is_token)
    if n_token_moves != len(tokens):
        raise ValueError(
            f"path has {n_token_moves} token moves but {len(tokens)} tokens given")
    labels = []
    for move in path:
        labels.append(int(tokens[move.u]) if move.is_token else BLANK)
    return tuple(labels)


def _check_tokens(grid: WeightGrid, tokens) -> tuple[int, ...]:
    tokens = tuple(int(z) for z in tokens)
    if len(tokens) != grid.U:
        raise ValueError(f"token sequence length {len(tokens)} != grid U {grid.U}")
    for z in tokens:
        if not 1 <= z <= grid.K:
            raise ValueError(f"token {z} outside vocabulary 1..{grid.K}")
    return tokens


def forward_score(grid: WeightGrid, tokens, final_blank: bool = False) -> float:
    """log-sum over all alignments of `tokens` of the per-path weight sums.

    Runs the forward recurrence
        a[t, u] = logaddexp(a[t-1, u] + W[t-1, u, blank],
                            a[t, u-1] + W[t, u-1, z[u]])
    with a[0, 0] = 0 and returns a[T, U].  Works on unnormalized rows.
    An empty grid (T = U = 0) scores 0, the empty product.
    """
    tokens = _check_tokens(grid, tokens)
    return _forward(grid.logits, tokens, final_blank)[grid.T, grid.U]


def _forward(logits: np.ndarray, tokens: tuple[int, ...],
             final_blank: bool = False) -> np.ndarray:
    T = logits.shape[0] - 1
    U = logits.shape[1] - 1
    alpha = np.full((T + 1, U + 1), LOG_ZERO)
    alpha[0, 0] = 0.0
    for t in range(T + 1):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            blank_in = LOG_ZERO if t == 0 else alpha[t - 1, u] + logits[t - 1, u, BLANK]
            if u == 0 or (final_blank and t == T):
                alpha[t, u] = blank_in
            else:
                token_in = alpha[t, u - 1] + logits[t, u - 1, tokens[u - 1]]
                alpha[t, u] = np.logaddexp(blank_in, token_in)
    return alpha


def _backward(logits: np.ndarray, tokens: tuple[int, ...],
              final_blank: bool = False) -> np.ndarray:
    T = logits.shape[0] - 1
    U = logits.shape[1] - 1
    beta = np.full((T + 1, U + 1), LOG_ZERO)
    beta[T, U] = 0.0
    for t in range(T, -1, -1):
        for u in range(U, -1, -1):
            if t == T and u == U:
                continue
            blank_out = LOG_ZERO if t == T else logits[t, u, BLANK] + beta[t + 1, u]
            if u == U or (final_blank and t == T):
                beta[t, u] = blank_out
            else:
                token_out = logits[t, u, tokens[u]] + beta[t, u + 1]
                beta[t, u] = np.logaddexp(blank_out, token_out)
    return beta


def brute_force_score(grid: WeightGrid, tokens, cap: int = DEFAULT_ORACLE_CAP,
                      final_blank: bool = False) -> float:
    """Oracle for forward_score: explicit logsumexp over every enumerated path."""
    tokens = _check_tokens(grid, tokens)
    paths = enumerate_paths(grid.T, grid.U, cap=cap, final_blank=final_blank)
    if not paths:
        return LOG_ZERO
    totals = []
    for path in paths:
        s = 0.0
        for move in path:
            label = tokens[move.u] if move.is_token else BLANK
            s += grid.logits[move.t, move.u, label]
        totals.append(s)
    return logsumexp(totals)


def occupancy_gradients(grid: WeightGrid, tokens,
                        final_blank: bool = False) -> np.ndarray:
    """d forward_score / d W[t, u, y] for every entry: edge posterior occupancies.

    Returned array matches grid.logits in shape.  Entries are posterior
    probabilities in [0, 1]; masked entries (blank at t = T, tokens at
    u = U, and labels not on the reference lattice) are exactly zero.
    Blank occupancies sum to T and token occupancies to U because every
    complete path makes exactly that many moves of each kind.
    """
    tokens = _check_tokens(grid, tokens)
    logits = grid.logits
    T, U = grid.T, grid.U
    alpha = _forward(logits, tokens, final_blank)
    beta = _backward(logits, tokens, final_blank)
    total = alpha[T, U]
    grad = np.zeros_like(logits)
    if total == LOG_ZERO:
        return grad
    for t in range(T + 1):
        for u in range(U + 1):
            if t < T:
                grad[t, u, BLANK] = math.exp(
                    alpha[t, u] + logits[t, u, BLANK] + beta[t + 1, u] - total)
            if u < U and not (final_blank and t == T):
                grad[t, u, tokens[u]] = math.exp(
                    alpha[t, u] + logits[t, u, tokens[u]] + beta[t, u + 1] - total)
    return grad


def apply_partial_normalization(grid: WeightGrid, alpha: float) -> WeightGrid:
    """Subtract alpha times each node's row log-sum from that row.

    alpha = 1 turns every row into log-softmax (each exponentiated row
    sums to one); alpha = 0 returns the grid unchanged.  Done entirely
    in log space.
    """
    if alpha == 0.0:
        return WeightGrid(grid.logits.copy())
    z_row = row_logsumexp(grid.logits)
    return WeightGrid(grid.logits - alpha * z_row[:, :, None])
