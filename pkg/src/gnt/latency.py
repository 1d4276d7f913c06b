"""Expected token-emission times via the expectation semiring.

Each lattice edge carries a pair: its log mass, and its mass times the
emission time contributed by that edge (a token at node (t, u) is
emitted at time t * frame_ms; blanks contribute no time).  Running the
plain forward recurrence in this pairing yields, at (T, U), the total
alignment mass and the mass-weighted sum of per-path emission-time
totals, whose ratio is the expected summed emission time under the
model's alignment posterior.

The weighted-time component is kept as (sign, log magnitude) so long
utterances cannot underflow it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from gnt.lattice import BLANK, LOG_ZERO, WeightGrid, apply_partial_normalization
from gnt.model import ModelParams, encode, predict, joint_grid


def _signed_log_add(s1: int, l1: float, s2: int, l2: float) -> tuple[int, float]:
    """Add two signed numbers kept as (sign, log|value|)."""
    if s1 == 0:
        return s2, l2
    if s2 == 0:
        return s1, l1
    if l1 < l2 or (l1 == l2 and s1 != s2):
        s1, l1, s2, l2 = s2, l2, s1, l1
    if s1 == s2:
        return s1, l1 + math.log1p(math.exp(l2 - l1))
    diff = math.exp(l2 - l1)
    if diff >= 1.0:
        return 0, LOG_ZERO
    return s1, l1 + math.log1p(-diff)


@dataclass(frozen=True)
class ExpectationWeight:
    """(log mass, signed-log weighted value) element of the expectation semiring."""

    w: float
    m_log: float = LOG_ZERO
    m_sign: int = 0

    @staticmethod
    def zero() -> "ExpectationWeight":
        return ExpectationWeight(LOG_ZERO, LOG_ZERO, 0)

    @staticmethod
    def one() -> "ExpectationWeight":
        return ExpectationWeight(0.0, LOG_ZERO, 0)

    @staticmethod
    def from_weight_value(w: float, value: float) -> "ExpectationWeight":
        """Edge element for an edge of log mass w carrying `value`: the pair
        (w, exp(w) * value)."""
        if value == 0.0 or w == LOG_ZERO:
            return ExpectationWeight(w, LOG_ZERO, 0)
        sign = 1 if value > 0 else -1
        return ExpectationWeight(w, w + math.log(abs(value)), sign)

    def oplus(self, other: "ExpectationWeight") -> "ExpectationWeight":
        w = float(np.logaddexp(self.w, other.w))
        sign, mag = _signed_log_add(self.m_sign, self.m_log, other.m_sign, other.m_log)
        return ExpectationWeight(w, mag, sign)

    def otimes(self, other: "ExpectationWeight") -> "ExpectationWeight":
        w = self.w + other.w
        sign, mag = _signed_log_add(
            other.m_sign, self.w + other.m_log,
            self.m_sign, other.w + self.m_log)
        return ExpectationWeight(w, mag, sign)

    @property
    def value(self) -> float:
        """The plain (linear-domain) weighted component."""
        return self.m_sign * math.exp(self.m_log)

    def mean(self) -> float:
        """Weighted component divided by the mass: the expected value."""
        if self.w == LOG_ZERO:
            raise ValueError("mean of a zero-mass element is undefined")
        return self.m_sign * math.exp(self.m_log - self.w)


def expectation_forward(grid: WeightGrid, tokens, frame_ms: float = 10.0
                        ) -> ExpectationWeight:
    """Forward pass in the expectation semiring over the reference lattice.

    The result pairs the total alignment mass with the mass-weighted sum
    of token emission times; .mean() is the expected summed emission
    time.  Undefined for U = 0 (no emissions to time).
    """
    toks = tuple(int(z) for z in tokens)
    if len(toks) != grid.U:
        raise ValueError(f"token sequence length {len(toks)} != grid U {grid.U}")
    if grid.U == 0:
        raise ValueError("no tokens: average emission time undefined")
    T, U = grid.T, grid.U
    table = [[ExpectationWeight.zero()] * (U + 1) for _ in range(T + 1)]
    table[0][0] = ExpectationWeight.one()
    for t in range(T + 1):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            acc = ExpectationWeight.zero()
            if t > 0:
                edge = ExpectationWeight.from_weight_value(
                    float(grid.logits[t - 1, u, BLANK]), 0.0)
                acc = acc.oplus(table[t - 1][u].otimes(edge))
            if u > 0:
                edge = ExpectationWeight.from_weight_value(
                    float(grid.logits[t, u - 1, toks[u - 1]]), t * frame_ms)
                acc = acc.oplus(table[t][u - 1].otimes(edge))
            table[t][u] = acc
    return table[T][U]


@dataclass
class LatencyReport:
    """Per-utterance and aggregate expected token emission times (ms)."""

    utterance_ids: list[str]
    per_utterance_ms: list[float]
    skipped_empty: int
    mean_ms: float
    pooled: bool

    def to_json(self) -> str:
        return json.dumps({
            "mean_emission_ms": self.mean_ms,
            "pooled": self.pooled,
            "skipped_empty": self.skipped_empty,
            "utterances": [
                {"id": uid, "mean_emission_ms": ms}
                for uid, ms in zip(self.utterance_ids, self.per_utterance_ms)
            ],
        }, indent=2)


def average_emission_time(dataset, params: ModelParams, frame_ms: float = 10.0,
                          alpha: float = 0.0, pooled: bool = False) -> LatencyReport:
    """Mean per-token emission time over a dataset's reference alignments.

    Each utterance's reference is probabilistically aligned under the
    model at interpolation exponent `alpha` and its expected summed
    emission time divided by its token count; by default those
    per-utterance means are averaged, with pooled=True all tokens are
    pooled instead.  Utterances without tokens are skipped and counted.
    """
    ids, per_utt, weights = [], [], []
    skipped = 0
    for utt in dataset:
        if len(utt.tokens) == 0:
            skipped += 1
            continue
        enc = encode(utt.features, params)
        grid = joint_grid(enc, predict(utt.tokens, params), params)
        if alpha != 0.0:
            grid = apply_partial_normalization(grid, alpha)
        expected_total = expectation_forward(grid, utt.tokens, frame_ms).mean()
        ids.append(utt.uid)
        per_utt.append(expected_total / len(utt.tokens))
        weights.append(len(utt.tokens))
    if not ids:
        raise ValueError("no utterance with tokens: average emission time undefined")
    if pooled:
        mean = float(np.average(per_utt, weights=weights))
    else:
        mean = float(np.mean(per_utt))
    return LatencyReport(ids, per_utt, skipped, mean, pooled)


def delta_from_reports(system: LatencyReport, baseline: LatencyReport) -> float:
    """Signed difference of mean emission times; rejects mismatched datasets."""
    if system.utterance_ids != baseline.utterance_ids or system.pooled != baseline.pooled:
        raise ValueError("latency reports were not measured on the same dataset")
    return system.mean_ms - baseline.mean_ms


@dataclass
class LatencyDelta:
    system: LatencyReport
    baseline: LatencyReport
    delta_ms: float

    def to_json(self) -> str:
        return json.dumps({
            "delta_ms": self.delta_ms,
            "system_mean_ms": self.system.mean_ms,
            "baseline_mean_ms": self.baseline.mean_ms,
            "skipped_empty": self.system.skipped_empty,
        }, indent=2)


def latency_delta(system_params: ModelParams, baseline_params: ModelParams,
                  dataset, frame_ms: float = 10.0, system_alpha: float = 0.0,
                  baseline_alpha: float = 0.0, pooled: bool = False) -> LatencyDelta:
    """average_emission_time(system) minus average_emission_time(baseline)
    on the same dataset.  Negative means the system emits earlier."""
    if getattr(dataset, "vocab_size", None) is not None:
        for p in (system_params, baseline_params):
            if p.config.vocab_size != dataset.vocab_size:
                raise ValueError("dataset vocabulary does not match the checkpoint")
    sys_report = average_emission_time(dataset, system_params, frame_ms,
                                       system_alpha, pooled)
    base_report = average_emission_time(dataset, baseline_params, frame_ms,
                                        baseline_alpha, pooled)
    return LatencyDelta(sys_report, base_report,
                        delta_from_reports(sys_report, base_report))
