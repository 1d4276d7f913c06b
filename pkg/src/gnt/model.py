"""Tiny streaming transducer producing unnormalized per-node weight rows.

Three pieces feed the lattice: a strictly causal encoder (two affine+tanh
layers over a sliding window of the current and previous context-1
frames), a predictor over the token history (a single-layer gated
recurrence by default, or a fixed-order feed-forward table), and a
joiner that combines one encoder frame with one predictor state into a
row of K+1 logits.  The row at grid node (t, u) is computed from the
encoding of frame min(t+1, T) (1-indexed), so token emissions at t = T
condition on the full input, and from the predictor state for the first
u tokens.  No softmax is applied anywhere in the forward pass.

All arithmetic is 64-bit.  Reverse-mode gradients are exact and written
out by hand; `backprop` consumes a gradient w.r.t. the grid logits and
returns gradients for every parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from gnt.lattice import WeightGrid

CHECKPOINT_MAGIC = b"GNTCHKPT"
CHECKPOINT_VERSION = 1

FULL_HISTORY = 0


class CheckpointError(ValueError):
    """Raised for unreadable, truncated, or inconsistent checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and structural choices of the transducer."""

    feat_dim: int
    vocab_size: int
    context: int = 3
    enc_hidden: int = 8
    emb_dim: int = 8
    pred_hidden: int = 8
    join_hidden: int = 8
    history: int = FULL_HISTORY  # 0 = full-history recurrence, n >= 1 = order-n table

    def __post_init__(self):
        if self.feat_dim < 1 or self.vocab_size < 1:
            raise ValueError("feat_dim and vocab_size must be positive")
        if self.context < 1:
            raise ValueError("context window must cover at least the current frame")
        if self.history < 0:
            raise ValueError("history must be 0 (full) or a positive order")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter registry; iteration order fixes the checkpoint layout."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "enc_w1": (c.context * c.feat_dim, c.enc_hidden),
        "enc_b1": (c.enc_hidden,),
        "enc_w2": (c.enc_hidden, c.enc_hidden),
        "enc_b2": (c.enc_hidden,),
        "emb": (c.vocab_size + 1, c.emb_dim),  # row 0 = start / empty-history slot
    }
    if c.history == FULL_HISTORY:
        shapes.update({
            "gate_w": (c.emb_dim, c.pred_hidden),
            "gate_u": (c.pred_hidden, c.pred_hidden),
            "gate_b": (c.pred_hidden,),
            "cand_w": (c.emb_dim, c.pred_hidden),
            "cand_u": (c.pred_hidden, c.pred_hidden),
            "cand_b": (c.pred_hidden,),
        })
    else:
        shapes.update({
            "hist_w": (c.history * c.emb_dim, c.pred_hidden),
            "hist_b": (c.pred_hidden,),
        })
    shapes.update({
        "join_enc": (c.enc_hidden, c.join_hidden),
        "join_pred": (c.pred_hidden, c.join_hidden),
        "join_b": (c.join_hidden,),
        "out_w": (c.join_hidden, c.vocab_size + 1),
        "out_b": (c.vocab_size + 1,),
    })
    return shapes


@dataclass
class ModelParams:
    """Model configuration plus the named parameter arrays."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-0.1, 0.1) initialization, deterministic given the seed."""
    rng = np.random.default_rng(seed)
    arrays = {name: rng.uniform(-0.1, 0.1, size=shape)
              for name, shape in param_shapes(config).items()}
    return ModelParams(config, arrays)


def zero_grads(config: ModelConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(config).items()}


def accumulate_grads(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for name, g in part.items():
        total[name] += g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Encoder


class EncoderCache(NamedTuple):
    windows: np.ndarray  # (T, context*feat_dim)
    h1: np.ndarray       # (T, enc_hidden)
    out: np.ndarray      # (T, enc_hidden)


def _causal_windows(features: np.ndarray, context: int) -> np.ndarray:
    T, D = features.shape
    win = np.zeros((T, context * D))
    for i in range(context):
        # slot i holds the frame (context - 1 - i) steps back, zero-padded
        shift = context - 1 - i
        if shift < T:
            win[shift:, i * D:(i + 1) * D] = features[:T - shift]
    return win


def encode_with_cache(features: np.ndarray, params: ModelParams) -> EncoderCache:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.config.feat_dim:
        raise ValueError(
            f"features must be (T, {params.config.feat_dim}), got {feats.shape}")
    win = _causal_windows(feats, params.config.context)
    h1 = np.tanh(win @ params["enc_w1"] + params["enc_b1"])
    out = np.tanh(h1 @ params["enc_w2"] + params["enc_b2"])
    return EncoderCache(win, h1, out)


def encode(features: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-frame causal encodings, shape (T, enc_hidden).

    Frame t depends only on input frames max(1, t-context+1)..t, so
    perturbing frame t' leaves all outputs before t' bit-identical.
    """
    return encode_with_cache(features, params).out


def encode_backward(cache: EncoderCache, d_out: np.ndarray,
                    params: ModelParams) -> dict[str, np.ndarray]:
    if d_out.shape != cache.out.shape:
        raise ValueError("gradient shape does not match the cached encoder output")
    dpre2 = d_out * (1.0 - cache.out ** 2)
    dh1 = dpre2 @ params["enc_w2"].T
    dpre1 = dh1 * (1.0 - cache.h1 ** 2)
    return {
        "enc_w2": cache.h1.T @ dpre2,
        "enc_b2": dpre2.sum(axis=0),
        "enc_w1": cache.windows.T @ dpre1,
        "enc_b1": dpre1.sum(axis=0),
    }


# ---------------------------------------------------------------------------
# Predictor


@dataclass(frozen=True)
class PredictorState:
    """Predictor state vector plus the token context a step needs to extend it."""

    vec: np.ndarray
    history: tuple[int, ...] = ()


class PredictorCache(NamedTuple):
    tokens: tuple[int, ...]
    states: np.ndarray                 # (U+1, pred_hidden)
    emb_in: np.ndarray | None          # full: (U, emb_dim); limited: None
    gates: np.ndarray | None           # full: (U, pred_hidden)
    cands: np.ndarray | None           # full: (U, pred_hidden)
    contexts: np.ndarray | None        # limited: (U+1, history) int token ids


def _check_token_range(tokens, vocab_size: int) -> tuple[int, ...]:
    toks = tuple(int(z) for z in tokens)
    for z in toks:
        if not 1 <= z <= vocab_size:
            raise ValueError(f"token {z} outside vocabulary 1..{vocab_size}")
    return toks


def _limited_state(context_ids: np.ndarray, params: ModelParams) -> np.ndarray:
    x = params["emb"][context_ids].reshape(-1)
    return np.tanh(x @ params["hist_w"] + params["hist_b"])


def predictor_start(params: ModelParams) -> PredictorState:
    """State for the empty token prefix."""
    c = params.config
    if c.history == FULL_HISTORY:
        return PredictorState(np.zeros(c.pred_hidden), ())
    ctx = np.zeros(c.history, dtype=np.int64)
    return PredictorState(_limited_state(ctx, params), ())


def predictor_step(state: PredictorState, token: int,
                   params: ModelParams) -> PredictorState:
    """Advance the predictor by one token; folding this over a sequence
    reproduces predict() states bit-identically."""
    c = params.config
    (token,) = _check_token_range([token], c.vocab_size)
    if c.history == FULL_HISTORY:
        e = params["emb"][token]
        g = _sigmoid(e @ params["gate_w"] + state.vec @ params["gate_u"] + params["gate_b"])
        cand = np.tanh(e @ params["cand_w"] + state.vec @ params["cand_u"] + params["cand_b"])
        return PredictorState((1.0 - g) * state.vec + g * cand, ())
    history = (state.history + (token,))[-c.history:]
    ctx = np.zeros(c.history, dtype=np.int64)
    ctx[c.history - len(history):] = history
    return PredictorState(_limited_state(ctx, params), history)


def predict_with_cache(tokens, params: ModelParams) -> PredictorCache:
    c = params.config
    toks = _check_token_range(tokens, c.vocab_size)
    U = len(toks)
    states = np.zeros((U + 1, c.pred_hidden))
    if c.history == FULL_HISTORY:
        emb_in = np.zeros((U, c.emb_dim))
        gates = np.zeros((U, c.pred_hidden))
        cands = np.zeros((U, c.pred_hidden))
        h = np.zeros(c.pred_hidden)
        for u, z in enumerate(toks):
            e = params["emb"][z]
            g = _sigmoid(e @ params["gate_w"] + h @ params["gate_u"] + params["gate_b"])
            cand = np.tanh(e @ params["cand_w"] + h @ params["cand_u"] + params["cand_b"])
            h = (1.0 - g) * h + g * cand
            emb_in[u], gates[u], cands[u], states[u + 1] = e, g, cand, h
        return PredictorCache(toks, states, emb_in, gates, cands, None)
    contexts = np.zeros((U + 1, c.history), dtype=np.int64)
    for u in range(U + 1):
        recent = toks[max(0, u - c.history):u]
        contexts[u, c.history - len(recent):] = recent
        states[u] = _limited_state(contexts[u], params)
    return PredictorCache(toks, states, None, None, None, contexts)


def predict(tokens, params: ModelParams) -> np.ndarray:
    """States for every prefix of `tokens`, shape (U+1, pred_hidden).

    In limited-history mode with order n, the state for prefix length u
    depends only on tokens u-n+1..u.
    """
    return predict_with_cache(tokens, params).states


def predict_backward(cache: PredictorCache, d_states: np.ndarray,
                     params: ModelParams) -> dict[str, np.ndarray]:
    c = params.config
    if d_states.shape != cache.states.shape:
        raise ValueError("gradient shape does not match the cached predictor states")
    grads = {name: np.zeros_like(params[name]) for name in
             (("gate_w", "gate_u", "gate_b", "cand_w", "cand_u", "cand_b")
              if c.history == FULL_HISTORY else ("hist_w", "hist_b"))}
    grads["emb"] = np.zeros_like(params["emb"])
    U = len(cache.tokens)
    if c.history == FULL_HISTORY:
        dh = d_states[U].copy()
        for u in range(U - 1, -1, -1):
            h_prev = cache.states[u]
            g, cand, e = cache.gates[u], cache.cands[u], cache.emb_in[u]
            dg = dh * (cand - h_prev)
            dcand = dh * g
            da = dg * g * (1.0 - g)
            dcpre = dcand * (1.0 - cand ** 2)
            grads["gate_w"] += np.outer(e, da)
            grads["gate_u"] += np.outer(h_prev, da)
            grads["gate_b"] += da
            grads["cand_w"] += np.outer(e, dcpre)
            grads["cand_u"] += np.outer(h_prev, dcpre)
            grads["cand_b"] += dcpre
            grads["emb"][cache.tokens[u]] += da @ params["gate_w"].T + dcpre @ params["cand_w"].T
            dh = (dh * (1.0 - g) + da @ params["gate_u"].T + dcpre @ params["cand_u"].T
                  + d_states[u])
        return grads
    for u in range(U + 1):
        state = cache.states[u]
        dpre = d_states[u] * (1.0 - state ** 2)
        x = params["emb"][cache.contexts[u]].reshape(-1)
        grads["hist_w"] += np.outer(x, dpre)
        grads["hist_b"] += dpre
        dx = (params["hist_w"] @ dpre).reshape(c.history, c.emb_dim)
        np.add.at(grads["emb"], cache.contexts[u], dx)
    return grads


# ---------------------------------------------------------------------------
# Joiner


class JointCache(NamedTuple):
    enc_sel: np.ndarray    # (T+1, enc_hidden)
    pred: np.ndarray       # (U+1, pred_hidden)
    hid: np.ndarray        # (T+1, U+1, join_hidden)
    T: int


def _select_frames(enc: np.ndarray, params: ModelParams) -> np.ndarray:
    T = enc.shape[0]
    if T == 0:
        return np.zeros((1, params.config.enc_hidden))
    idx = np.minimum(np.arange(T + 1), T - 1)
    return enc[idx]


def joint_with_cache(enc: np.ndarray, pred_states: np.ndarray,
                     params: ModelParams) -> tuple[WeightGrid, JointCache]:
    c = params.config
    if enc.ndim != 2 or enc.shape[1] != c.enc_hidden:
        raise ValueError(f"encoder output must be (T, {c.enc_hidden}), got {enc.shape}")
    if pred_states.ndim != 2 or pred_states.shape[1] != c.pred_hidden:
        raise ValueError(
            f"predictor states must be (U+1, {c.pred_hidden}), got {pred_states.shape}")
    enc_sel = _select_frames(enc, params)
    pre = (enc_sel @ params["join_enc"])[:, None, :] \
        + (pred_states @ params["join_pred"])[None, :, :] + params["join_b"]
    hid = np.tanh(pre)
    logits = hid @ params["out_w"] + params["out_b"]
    return WeightGrid(logits), JointCache(enc_sel, pred_states, hid, enc.shape[0])


def joint_grid(enc: np.ndarray, pred_states: np.ndarray,
               params: ModelParams) -> WeightGrid:
    """Unnormalized logit rows for every grid node, shape (T+1, U+1, K+1)."""
    return joint_with_cache(enc, pred_states, params)[0]


def row_logits(enc_vec: np.ndarray | None, state_vec: np.ndarray,
               params: ModelParams) -> np.ndarray:
    """Single joiner row for one (encoder frame, predictor state) pair.

    enc_vec None stands for an empty input (T = 0), encoded as zeros.
    """
    if enc_vec is None:
        enc_vec = np.zeros(params.config.enc_hidden)
    pre = enc_vec @ params["join_enc"] + state_vec @ params["join_pred"] + params["join_b"]
    return np.tanh(pre) @ params["out_w"] + params["out_b"]


def joint_backward(cache: JointCache, d_logits: np.ndarray, params: ModelParams
                   ) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Returns (joiner parameter grads, d_enc (T, enc_hidden), d_pred (U+1, ...))."""
    if d_logits.shape != cache.hid.shape[:2] + (params.config.vocab_size + 1,):
        raise ValueError("gradient shape does not match the cached joint grid")
    hid2 = cache.hid.reshape(-1, cache.hid.shape[-1])
    dl2 = d_logits.reshape(-1, d_logits.shape[-1])
    dhid = d_logits @ params["out_w"].T
    dpre = dhid * (1.0 - cache.hid ** 2)
    grads = {
        "out_w": hid2.T @ dl2,
        "out_b": dl2.sum(axis=0),
        "join_b": dpre.sum(axis=(0, 1)),
        "join_enc": cache.enc_sel.T @ dpre.sum(axis=1),
        "join_pred": cache.pred.T @ dpre.sum(axis=0),
    }
    d_enc_sel = dpre.sum(axis=1) @ params["join_enc"].T
    d_pred = dpre.sum(axis=0) @ params["join_pred"].T
    d_enc = np.zeros((cache.T, params.config.enc_hidden))
    if cache.T > 0:
        idx = np.minimum(np.arange(cache.T + 1), cache.T - 1)
        np.add.at(d_enc, idx, d_enc_sel)
    return grads, d_enc, d_pred


# ---------------------------------------------------------------------------
# Whole pipeline


@dataclass
class ForwardCache:
    """Everything needed to run the exact backward pass for one grid."""

    encoder: EncoderCache
    predictor: PredictorCache
    joint: JointCache


def forward_grid(features: np.ndarray, tokens, params: ModelParams
                 ) -> tuple[WeightGrid, ForwardCache]:
    """Build the full weight grid for one utterance and one token sequence."""
    enc_cache = encode_with_cache(features, params)
    pred_cache = predict_with_cache(tokens, params)
    grid, joint_cache = joint_with_cache(enc_cache.out, pred_cache.states, params)
    return grid, ForwardCache(enc_cache, pred_cache, joint_cache)


def backprop(cache: ForwardCache, grid_grad: np.ndarray,
             params: ModelParams) -> dict[str, np.ndarray]:
    """Exact parameter gradients from a gradient w.r.t. the grid logits."""
    joiner_grads, d_enc, d_pred = joint_backward(cache.joint, grid_grad, params)
    grads = zero_grads(params.config)
    accumulate_grads(grads, joiner_grads)
    accumulate_grads(grads, predict_backward(cache.predictor, d_pred, params))
    accumulate_grads(grads, encode_backward(cache.encoder, d_enc, params))
    return grads


# ---------------------------------------------------------------------------
# Checkpoints

_HEADER_FIELDS = ("feat_dim", "vocab_size", "context", "enc_hidden",
                  "emb_dim", "pred_hidden", "join_hidden", "history")


def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic, version, integer dimension header, then the parameter
    arrays flattened row-major as little-endian float64, in registry order."""
    c = params.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<8I", *(getattr(c, f) for f in _HEADER_FIELDS)))
        for name in param_shapes(c):
            arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise CheckpointError("truncated checkpoint: header incomplete")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 4
    header = struct.unpack_from("<8I", blob, off)
    off += 32
    config = ModelConfig(**dict(zip(_HEADER_FIELDS, header)))
    shapes = param_shapes(config)
    expected = sum(int(np.prod(s)) for s in shapes.values()) * 8
    if len(blob) - off != expected:
        raise CheckpointError(
            f"payload is {len(blob) - off} bytes but header dimensions imply {expected}")
    arrays = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(blob[off:off + n], dtype="<f8").reshape(shape).copy()
        off += n
    return ModelParams(config, arrays)
