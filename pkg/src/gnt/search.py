"""Time-synchronous streaming beam search over unnormalized weights.

Frames are processed left to right.  Within a frame every hypothesis may
emit up to `max_emissions` tokens (children are expanded in ascending
prefix length, so a prefix's score is final before its children see it)
and then every surviving hypothesis takes the blank transition.  Token
emissions at the final frame are allowed; there is no blank there.
Hypotheses with identical token prefixes are merged by logsumexp, so
with the beam wide enough to exhaust the space the returned scores equal
the forward scores of the corresponding grids exactly.

Scores never involve a global normalizer; ranking raw path weights is
all decoding needs.  An optional exponent `alpha` subtracts that
fraction of each row's log-sum on the fly, which is how search follows
the current local/global interpolation while generating training
hypotheses.
"""

from __future__ import annotations

import numpy as np

from gnt.lattice import row_logsumexp
from gnt.losses import HypothesisSet
from gnt.model import ModelParams, encode, predictor_start, predictor_step, row_logits

DEFAULT_DECODE_BEAM = 50
DEFAULT_EMISSION_CAP = 4


def beam_search(features, params: ModelParams, beam_width: int, n_best: int,
                max_emissions: int = DEFAULT_EMISSION_CAP,
                alpha: float = 0.0) -> list[tuple[tuple[int, ...], float]]:
    """Up to n_best distinct token sequences with accumulated log scores,
    best first.  Deterministic: ties break on the token sequence itself."""
    if not beam_width >= n_best >= 1:
        raise ValueError(f"need beam_width >= n_best >= 1, got {beam_width}, {n_best}")
    if max_emissions < 1:
        raise ValueError("max_emissions must be >= 1")
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] == 0:
        return [((), 0.0)]
    enc = encode(feats, params)
    T = enc.shape[0]
    K = params.config.vocab_size

    scores: dict[tuple[int, ...], float] = {(): 0.0}
    states = {(): predictor_start(params)}
    for t in range(T + 1):
        enc_vec = enc[min(t, T - 1)]
        rows: dict[tuple[int, ...], np.ndarray] = {}

        def node_row(prefix):
            row = rows.get(prefix)
            if row is None:
                row = row_logits(enc_vec, states[prefix].vec, params)
                if alpha != 0.0:
                    row = row - alpha * row_logsumexp(row)
                rows[prefix] = row
            return row

        emissions = {p: 0 for p in scores}
        u = min(len(p) for p in scores)
        while True:
            group = sorted(p for p in scores if len(p) == u)
            if not group:
                break
            for prefix in group:
                if emissions[prefix] >= max_emissions:
                    continue
                row = node_row(prefix)
                base = scores[prefix]
                for y in range(1, K + 1):
                    child = prefix + (y,)
                    arrival = base + row[y]
                    if child in scores:
                        scores[child] = float(np.logaddexp(scores[child], arrival))
                        emissions[child] = min(emissions[child], emissions[prefix] + 1)
                    else:
                        scores[child] = float(arrival)
                        states[child] = predictor_step(states[prefix], y, params)
                        emissions[child] = emissions[prefix] + 1
            _prune_group(scores, states, emissions, u + 1, beam_width)
            u += 1

        keep = _top(scores, beam_width)
        scores = {p: scores[p] for p in keep}
        states = {p: states[p] for p in keep}
        if t < T:
            scores = {p: s + node_row(p)[0] for p, s in scores.items()}
    ranked = _top(scores, n_best)
    return [(p, scores[p]) for p in ranked]


def _top(scores: dict, limit: int) -> list:
    return sorted(scores, key=lambda p: (-scores[p], p))[:limit]


def _prune_group(scores, states, emissions, length: int, beam_width: int) -> None:
    group = [p for p in scores if len(p) == length]
    if len(group) <= beam_width:
        return
    group.sort(key=lambda p: (-scores[p], p))
    for p in group[beam_width:]:
        del scores[p], states[p], emissions[p]


def build_training_hypotheses(features, ref_tokens, params: ModelParams,
                              beam_width: int, n_best: int,
                              max_emissions: int = DEFAULT_EMISSION_CAP,
                              alpha: float = 0.0) -> HypothesisSet:
    """N-best competitor list with the reference guaranteed present.

    If the beam missed the reference, the last competitor is displaced
    so the set stays within n_best sequences.
    """
    ref = tuple(int(z) for z in ref_tokens)
    found = beam_search(features, params, beam_width, n_best, max_emissions, alpha)
    seqs = [s for s, _ in found]
    if ref in seqs:
        return HypothesisSet(tuple(seqs), seqs.index(ref))
    if len(seqs) >= n_best:
        seqs = seqs[:n_best - 1]
    seqs.append(ref)
    return HypothesisSet(tuple(seqs), len(seqs) - 1)


def decode(features, params: ModelParams, beam_width: int = DEFAULT_DECODE_BEAM,
           max_emissions: int = DEFAULT_EMISSION_CAP,
           alpha: float = 0.0) -> tuple[int, ...]:
    """Best token sequence under beam search."""
    return beam_search(features, params, beam_width, 1, max_emissions, alpha)[0][0]
