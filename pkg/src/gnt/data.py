"""Toy datasets and the on-disk dataset container.

The two-word ambiguity task: every utterance is 20 frames and two
tokens.  Utterances come in pairs, one per class; the first 10 frames of
a pair are blended toward a shared draw by the ambiguity knob (at
ambiguity 1 they are bit-identical, so nothing observable before frame
11 separates the classes), while frames 11..20 are always class
distinct.  Class one is tokens (mail, order) = (1, 3) and class two is
(nail, polish) = (2, 4).  Recovering the first word therefore requires
audio that only arrives after the point where a streaming model with
per-row normalization has to have committed its first-word mass.

The synthetic task renders random token sequences as per-token embedding
vectors stretched over a fixed number of frames plus Gaussian noise; at
noise 0 the features are exactly the embeddings.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

MAIL_NAIL_VOCAB = {"mail": 1, "nail": 2, "order": 3, "polish": 4}

_DATA_MAGIC = "gnt-dataset v1"


class DatasetFormatError(ValueError):
    """Raised for malformed dataset container files."""


@dataclass(frozen=True)
class Utterance:
    uid: str
    features: np.ndarray  # (T, feat_dim) float64
    tokens: tuple[int, ...]


@dataclass
class Dataset:
    utterances: list[Utterance]
    vocab_size: int
    feat_dim: int

    def __iter__(self):
        return iter(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]


def make_mail_nail_dataset(ambiguity: float, copies: int, seed: int,
                           feat_dim: int = 4, noise: float = 0.25) -> Dataset:
    """`copies` paired utterances per class (2 * copies total), 20 frames each.

    ambiguity = 1 makes the first 10 frames of each pair bit-identical;
    ambiguity = 0 keeps the full class separation in the first chunk too.
    """
    if not 0.0 <= ambiguity <= 1.0:
        raise ValueError(f"ambiguity must be in [0, 1], got {ambiguity}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    mean_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    first_means = mean_rng.normal(0.0, 1.0, size=(2, feat_dim))
    second_means = mean_rng.normal(0.0, 1.0, size=(2, feat_dim))
    labels = ((MAIL_NAIL_VOCAB["mail"], MAIL_NAIL_VOCAB["order"]),
              (MAIL_NAIL_VOCAB["nail"], MAIL_NAIL_VOCAB["polish"]))
    utts = []
    for pair in range(copies):
        shared_first = rng.normal(0.0, noise, size=(10, feat_dim))
        for cls in (0, 1):
            first = shared_first + (1.0 - ambiguity) * first_means[cls]
            second = rng.normal(0.0, noise, size=(10, feat_dim)) + second_means[cls]
            features = np.concatenate([first, second], axis=0)
            utts.append(Utterance(f"pair{pair:04d}_class{cls}", features, labels[cls]))
    return Dataset(utts, vocab_size=4, feat_dim=feat_dim)


def make_synthetic_dataset(vocab_size: int, u_range: tuple[int, int],
                           frames_per_token: int, noise: float, seed: int,
                           count: int = 128, heldout: int = 0,
                           feat_dim: int = 4) -> tuple[Dataset, Dataset]:
    """Random token sequences rendered as noisy stretched embeddings.

    Returns (train, heldout) splits drawn from one stream, so they are
    disjoint by construction.
    """
    if vocab_size < 2:
        raise ValueError("need a vocabulary of at least 2 tokens")
    lo, hi = u_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad token-count range {u_range}")
    emb_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    token_vectors = emb_rng.normal(0.0, 1.0, size=(vocab_size + 1, feat_dim))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    utts = []
    for i in range(count + heldout):
        u = int(rng.integers(lo, hi + 1))
        tokens = tuple(int(z) for z in rng.integers(1, vocab_size + 1, size=u))
        clean = np.repeat(token_vectors[list(tokens)], frames_per_token, axis=0)
        features = clean if noise == 0.0 else clean + rng.normal(0.0, noise, clean.shape)
        utts.append(Utterance(f"utt{i:05d}", features, tokens))
    train = Dataset(utts[:count], vocab_size, feat_dim)
    held = Dataset(utts[count:], vocab_size, feat_dim)
    return train, held


# ---------------------------------------------------------------------------
# Dataset container file
#
# One ASCII header line:  "gnt-dataset v1 count=<n> dim=<d> vocab=<k>\n"
# then per utterance one ASCII line "<id>\t<T>\t<token token ...>\n"
# followed by T*d raw little-endian float64 bytes (row-major frames).


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{_DATA_MAGIC} count={len(dataset)} dim={dataset.feat_dim} "
                 f"vocab={dataset.vocab_size}\n".encode())
        for utt in dataset:
            tok = " ".join(str(z) for z in utt.tokens)
            fh.write(f"{utt.uid}\t{utt.features.shape[0]}\t{tok}\n".encode())
            fh.write(np.ascontiguousarray(utt.features, dtype="<f8").tobytes())


def _read_line(fh: io.BufferedReader) -> str:
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise DatasetFormatError("truncated dataset file")
    return raw[:-1].decode()


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header = _read_line(fh)
        parts = header.split()
        if parts[:2] != _DATA_MAGIC.split() or len(parts) != 5:
            raise DatasetFormatError(f"bad dataset header: {header!r}")
        try:
            fields = dict(p.split("=", 1) for p in parts[2:])
            count, dim, vocab = (int(fields[k]) for k in ("count", "dim", "vocab"))
        except (ValueError, KeyError) as exc:
            raise DatasetFormatError(f"bad dataset header: {header!r}") from exc
        utts = []
        for _ in range(count):
            line = _read_line(fh).split("\t")
            if len(line) != 3:
                raise DatasetFormatError(f"bad utterance line: {line!r}")
            uid, t_str, tok_str = line
            T = int(t_str)
            tokens = tuple(int(z) for z in tok_str.split()) if tok_str else ()
            raw = fh.read(T * dim * 8)
            if len(raw) != T * dim * 8:
                raise DatasetFormatError(f"truncated features for utterance {uid}")
            features = np.frombuffer(raw, dtype="<f8").reshape(T, dim).copy()
            utts.append(Utterance(uid, features, tokens))
    return Dataset(utts, vocab_size=vocab, feat_dim=dim)
