"""Schedules, optimizer, batching, N-best refresh, and the training loop.

Training starts purely locally normalized (alpha = 1).  The row-sum
regularizer ramps in just before the branch epoch; from the branch epoch
on, the interpolation exponent alpha walks down by a fixed slope per
epoch toward its target, and competitor hypothesis sets are regenerated
by beam search (at the current alpha) every `refresh_period` batches.
The refresh window restarts at each epoch boundary so a window never
straddles an alpha change.

Batches group utterances up to a summed-frame budget.  The per-batch
objective is the mean over utterances of the interpolated loss plus
lambda times the row regularizer taken over every logit row of every
hypothesis grid in the batch.  One JSON object per batch goes to the
metrics log; nothing time-dependent is logged, so identical seeds give
bit-identical logs and checkpoints.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gnt import losses, model, search
from gnt.data import Dataset
from gnt.lattice import WeightGrid, apply_partial_normalization
from gnt.losses import HypothesisSet, NBestLossResult, normalization_regularizer
from gnt.model import ModelConfig, ModelParams

GUARD_LOSS_FLOOR = 1e-6
# competitor-margin equivalent of the loss floor: log(exp(floor) - 1)
GUARD_MARGIN_FLOOR = math.log(math.expm1(GUARD_LOSS_FLOOR))


class ConfigError(ValueError):
    """Raised for unparseable or unknown training-config entries."""


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class Schedule:
    """Piecewise-linear interpolation and regularizer schedules over epochs."""

    branch_epoch: int
    alpha_target: float = 0.3
    alpha_slope: float = 0.25
    lambda_target: float = 0.01
    lambda_ramp_epochs: int = 1

    def __post_init__(self):
        if self.branch_epoch < 0:
            raise ValueError("branch_epoch must be >= 0")
        if not 0.0 <= self.alpha_target <= 1.0:
            raise ValueError("alpha_target must be in [0, 1]")
        if self.alpha_slope < 0 or self.lambda_target < 0:
            raise ValueError("slopes and targets must be non-negative")
        if self.lambda_ramp_epochs < 1:
            raise ValueError("lambda_ramp_epochs must be >= 1")


def alpha_schedule(epoch: int, schedule: Schedule) -> float:
    """1 before the branch epoch, then down by alpha_slope per epoch,
    clamped at alpha_target."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < schedule.branch_epoch:
        return 1.0
    steps = epoch - schedule.branch_epoch + 1
    return max(schedule.alpha_target, 1.0 - schedule.alpha_slope * steps)


def lambda_schedule(epoch: int, schedule: Schedule) -> float:
    """Linear ramp from 0 to lambda_target over the lambda_ramp_epochs
    epochs immediately before the branch epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    start = schedule.branch_epoch - schedule.lambda_ramp_epochs
    if epoch < start:
        return 0.0
    frac = (epoch - start + 1) / schedule.lambda_ramp_epochs
    return schedule.lambda_target * min(1.0, frac)


@dataclass
class TrainConfig:
    """Knobs of the training loop itself (model dimensions live in ModelConfig)."""

    epochs: int = 40
    n_best: int = 10
    refresh_period: int = 20
    batch_budget: int = 2000
    beam_width: int = 20
    max_emissions: int = 4
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.n_best < 1 or self.refresh_period < 1:
            raise ValueError("n_best and refresh_period must be >= 1")
        if self.beam_width < self.n_best:
            raise ValueError("beam_width must be >= n_best")


# ---------------------------------------------------------------------------
# Flat key=value config files


_CONFIG_SECTIONS: dict[str, type] = {
    "train": TrainConfig, "schedule": Schedule, "model": ModelConfig}


def _field_types(cls) -> dict[str, type]:
    import typing
    return typing.get_type_hints(cls)


def parse_config(text: str) -> dict[str, dict]:
    """Parse `section.key = value` lines into per-section keyword dicts.

    Sections: train.* (TrainConfig), schedule.* (Schedule), model.*
    (ModelConfig).  Comments start with '#'.  Unknown keys are rejected.
    """
    out: dict[str, dict] = {name: {} for name in _CONFIG_SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key must be section.name, got {key!r}")
        section, name = key.split(".", 1)
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        types = _field_types(_CONFIG_SECTIONS[section])
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[section][name] = int(value) if types[name] is int else float(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
    return out


def load_config(path) -> dict[str, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @staticmethod
    def fresh(config: ModelConfig) -> "AdamState":
        return AdamState(0, model.zero_grads(config), model.zero_grads(config))


def optimizer_step(params: ModelParams, grads: dict[str, np.ndarray],
                   state: AdamState, config: TrainConfig) -> None:
    """One in-place adaptive-moment update.  Aborts on non-finite gradients."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    scale = config.lr * math.sqrt(1.0 - b2 ** state.step) / (1.0 - b1 ** state.step)
    for name, g in grads.items():
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        params.arrays[name] -= scale * state.m[name] / (np.sqrt(state.v[name]) + config.eps)


# ---------------------------------------------------------------------------
# Guard


def competitor_mass_guard(scores: np.ndarray, ref_index: int,
                          floor: float = GUARD_MARGIN_FLOOR) -> tuple[float, bool]:
    """Health metric logsumexp(competitor scores) - reference score.

    Flags when the margin falls below the floor, i.e. when the
    competitors carry so little relative mass that the global loss term
    is effectively zero and training stalls.
    """
    others = np.delete(np.asarray(scores, dtype=np.float64), ref_index)
    if others.size == 0:
        return -math.inf, True
    m = others.max()
    lse = m + math.log(np.exp(others - m).sum()) if m > -math.inf else -math.inf
    margin = float(lse - scores[ref_index])
    return margin, margin < floor


# ---------------------------------------------------------------------------
# Batching


def _stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


_BATCH_STREAM = 11


def make_batches(dataset: Dataset, budget: int, rng: np.random.Generator
                 ) -> list[list[int]]:
    """Shuffled batches whose summed frame counts stay within `budget`
    (single oversized utterances still get a batch of their own)."""
    order = rng.permutation(len(dataset))
    batches: list[list[int]] = []
    current: list[int] = []
    frames = 0
    for idx in order:
        t = dataset[int(idx)].features.shape[0]
        if current and frames + t > budget:
            batches.append(current)
            current, frames = [], 0
        current.append(int(idx))
        frames += t
    if current:
        batches.append(current)
    return batches


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    checkpoint_paths: list[str] = field(default_factory=list)


def _reference_only_sets(dataset: Dataset, batch: list[int]) -> dict[int, HypothesisSet]:
    return {i: HypothesisSet((dataset[i].tokens,), 0) for i in batch}


def _refresh_hypotheses(dataset: Dataset, batches: list[list[int]], start: int,
                        params: ModelParams, config: TrainConfig,
                        alpha: float) -> dict[int, HypothesisSet]:
    fresh: dict[int, HypothesisSet] = {}
    for batch in batches[start:start + config.refresh_period]:
        for i in batch:
            utt = dataset[i]
            fresh[i] = search.build_training_hypotheses(
                utt.features, utt.tokens, params, config.beam_width,
                config.n_best, config.max_emissions, alpha)
    return fresh


def _batch_pass(dataset: Dataset, batch: list[int], hyp_sets: dict[int, HypothesisSet],
                params: ModelParams, alpha: float, lam: float
                ) -> tuple[float, float, float, bool, dict[str, np.ndarray]]:
    """Forward and backward over one batch.

    Returns (loss, regularizer metric, mean competitor margin, guard
    flag, parameter gradients).  The objective is the utterance mean of
    the interpolated loss plus lam times the row regularizer over every
    row of every hypothesis grid in the batch.
    """
    n_utts = len(batch)
    per_utt: list[tuple[HypothesisSet, list[WeightGrid], list, model.EncoderCache,
                        NBestLossResult]] = []
    margins = []
    global_terms = []
    for i in batch:
        utt = dataset[i]
        hset = hyp_sets[i]
        enc_cache = model.encode_with_cache(utt.features, params)
        grids, caches = [], []
        for hyp in hset.hypotheses:
            pred_cache = model.predict_with_cache(hyp, params)
            grid, joint_cache = model.joint_with_cache(
                enc_cache.out, pred_cache.states, params)
            grids.append(grid)
            caches.append((pred_cache, joint_cache))
        interp = losses.interpolated_loss(grids, hset, alpha)
        margin, _ = competitor_mass_guard(interp.scores, hset.ref_index)
        margins.append(margin)
        # global loss term = logsumexp(all) - ref = log(1 + exp(margin))
        global_terms.append(float(np.logaddexp(0.0, margin)))
        per_utt.append((hset, grids, caches, enc_cache, interp))

    loss = sum(item[4].value for item in per_utt) / n_utts
    all_rows = np.concatenate(
        [g.logits.reshape(-1, g.K + 1)
         for item in per_utt for g in item[1]], axis=0)
    reg_value, reg_grads = normalization_regularizer(all_rows)
    if lam > 0.0:
        loss += lam * reg_value

    grads = model.zero_grads(params.config)
    row_offset = 0
    for hset, grids, caches, enc_cache, interp in per_utt:
        d_enc_total = np.zeros_like(enc_cache.out)
        for grid, (pred_cache, joint_cache), g_interp in zip(grids, caches,
                                                             interp.grid_grads):
            grid_grad = g_interp / n_utts
            if lam > 0.0:
                n = (grid.T + 1) * (grid.U + 1)
                grid_grad = grid_grad + lam * reg_grads[
                    row_offset:row_offset + n].reshape(grid.logits.shape)
            row_offset += (grid.T + 1) * (grid.U + 1)
            joiner_grads, d_enc, d_pred = model.joint_backward(
                joint_cache, grid_grad, params)
            model.accumulate_grads(grads, joiner_grads)
            model.accumulate_grads(
                grads, model.predict_backward(pred_cache, d_pred, params))
            d_enc_total += d_enc
        model.accumulate_grads(
            grads, model.encode_backward(enc_cache, d_enc_total, params))

    mean_margin = float(np.mean(margins))
    mean_global_term = float(np.mean(global_terms))
    guard = alpha < 1.0 and mean_global_term < GUARD_LOSS_FLOOR
    return loss, reg_value, mean_margin, guard, grads


def train(dataset: Dataset, config: TrainConfig, schedule: Schedule,
          model_config: ModelConfig | None = None,
          params: ModelParams | None = None,
          out_dir: str | None = None,
          epoch_callback: Callable[[int, ModelParams], None] | None = None
          ) -> TrainResult:
    """Run the full schedule over `dataset`.

    Writes one checkpoint per epoch and a JSONL metrics log (one object
    per batch with epoch, batch, loss, reg_metric, alpha, lambda, guard,
    competitor_margin) when out_dir is given.  Raises DivergenceError as
    soon as any batch loss stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if params is None:
        if model_config is None:
            raise ValueError("need model_config or initial params")
        params = model.init_params(model_config,
                                   seed=_stream_rng(config.seed, 7).integers(2 ** 31))
    else:
        params = params.copy()

    metrics: list[dict] = []
    checkpoint_paths: list[str] = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")
    state = AdamState.fresh(params.config)
    try:
        for epoch in range(config.epochs):
            alpha = alpha_schedule(epoch, schedule)
            lam = lambda_schedule(epoch, schedule)
            batches = make_batches(dataset, config.batch_budget,
                                   _stream_rng(config.seed, _BATCH_STREAM, epoch))
            hyp_sets: dict[int, HypothesisSet] = {}
            for b, batch in enumerate(batches):
                if alpha < 1.0:
                    if b % config.refresh_period == 0:
                        hyp_sets = _refresh_hypotheses(
                            dataset, batches, b, params, config, alpha)
                else:
                    hyp_sets = _reference_only_sets(dataset, batch)
                loss, reg_value, margin, guard, grads = _batch_pass(
                    dataset, batch, hyp_sets, params, alpha, lam)
                if not math.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss {loss} at epoch {epoch} batch {b}")
                optimizer_step(params, grads, state, config)
                row = {
                    "epoch": epoch, "batch": b, "loss": loss,
                    "reg_metric": reg_value, "alpha": alpha, "lambda": lam,
                    "guard": guard,
                    "competitor_margin": margin if math.isfinite(margin) else None,
                }
                metrics.append(row)
                if log_fh is not None:
                    log_fh.write(json.dumps(row) + "\n")
            if out_dir is not None:
                path = os.path.join(out_dir, f"epoch{epoch:04d}.ckpt")
                model.save_checkpoint(params, path)
                checkpoint_paths.append(path)
            if epoch_callback is not None:
                epoch_callback(epoch, params)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(params, metrics, checkpoint_paths)


# ---------------------------------------------------------------------------
# Evaluation helpers


def evaluate_local_nll(dataset: Dataset, params: ModelParams) -> float:
    """Mean per-utterance negated log-likelihood under row-softmax rows."""
    total = 0.0
    for utt in dataset:
        grid, _ = model.forward_grid(utt.features, utt.tokens, params)
        total += losses.local_nll(grid, utt.tokens).value
    return total / len(dataset)


def evaluate_restricted_nll(dataset: Dataset, params: ModelParams, alpha: float,
                            n_best: int, beam_width: int,
                            max_emissions: int = 4) -> float:
    """Mean -log posterior of the reference over beam hypotheses plus the
    reference, with all grids taken at interpolation exponent alpha."""
    total = 0.0
    for utt in dataset:
        hset = search.build_training_hypotheses(
            utt.features, utt.tokens, params, beam_width, n_best,
            max_emissions, alpha)
        enc = model.encode(utt.features, params)
        grids = []
        for hyp in hset.hypotheses:
            grid = model.joint_grid(enc, model.predict(hyp, params), params)
            grids.append(apply_partial_normalization(grid, alpha)
                         if alpha != 0.0 else grid)
        total += losses.global_nbest_loss(grids, hset).value
    return total / len(dataset)


def token_error_count(dataset: Dataset, params: ModelParams, beam_width: int = 50,
                      max_emissions: int = 4, alpha: float = 0.0) -> int:
    """Number of utterances whose decode differs from the reference."""
    wrong = 0
    for utt in dataset:
        hyp = search.decode(utt.features, params, beam_width, max_emissions, alpha)
        wrong += int(hyp != tuple(utt.tokens))
    return wrong
