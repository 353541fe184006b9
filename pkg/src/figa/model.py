"""A fixed-window (K=2) embedding-MLP language model with hand-written backprop.

Each response token is predicted from the two tokens before it in the
sequence ``query + [SEP] + response``, padded on the left with BOS::

    logits = W2 @ tanh(W1 @ [E[prev1]; E[prev2]] + b1) + b2

Everything is float64 so finite-difference checks can be tight.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, StructuralError, VocabularyError
from .weighting import TokenWeights

CONTEXT = 2
BOS, SEP, EOS = "<bos>", "<sep>", "</s>"
SPECIALS = (BOS, SEP, EOS)
BOS_ID, SEP_ID, EOS_ID = 0, 1, 2

_MAGIC = b"FIGACKP1"
_HEADER = struct.Struct("<8sQQQQ")


class Vocab:
    def __init__(self, tokens: Iterable[str]) -> None:
        self.itos: list[str] = list(SPECIALS)
        for tok in tokens:
            if tok not in SPECIALS:
                self.itos.append(tok)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise StructuralError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]]) -> "Vocab":
        seen: set[str] = set()
        for seq in sequences:
            seen.update(seq)
        return cls(sorted(seen - set(SPECIALS)))

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise VocabularyError(f"out-of-vocabulary token {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise StructuralError(f"{path}: vocabulary does not start with the reserved tokens")
        return cls(tokens[len(SPECIALS) :])


@dataclass
class ModelParams:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    K: int = field(default=CONTEXT)

    NAMES = ("E", "W1", "b1", "W2", "b2")

    def __post_init__(self) -> None:
        V, d = self.E.shape
        h = self.b1.shape[0]
        if self.K != CONTEXT:
            raise StructuralError(f"context window is fixed at {CONTEXT}, got {self.K}")
        expected = {"E": (V, d), "W1": (h, self.K * d), "b1": (h,), "W2": (V, h), "b2": (V,)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise StructuralError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.E.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.b1.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, n) for n in self.NAMES)

    @classmethod
    def init(cls, vocab_size: int, embed_dim: int = 16, hidden_dim: int = 32, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        V, d, h = vocab_size, embed_dim, hidden_dim

        def u(*shape: int) -> np.ndarray:
            return rng.uniform(-0.1, 0.1, size=shape)

        return cls(u(V, d), u(h, CONTEXT * d), u(h), u(V, h), u(V))

    @classmethod
    def zeros(cls, vocab_size: int, embed_dim: int = 16, hidden_dim: int = 32) -> "ModelParams":
        V, d, h = vocab_size, embed_dim, hidden_dim
        z = np.zeros
        return cls(z((V, d)), z((h, CONTEXT * d)), z(h), z((V, h)), z(V))

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(a * a)) for a in self.arrays()))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(_MAGIC, self.vocab_size, self.embed_dim, self.hidden_dim, self.K)
        return header + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        if len(blob) < _HEADER.size:
            raise StructuralError("checkpoint truncated")
        magic, V, d, h, K = _HEADER.unpack_from(blob)
        if magic != _MAGIC:
            raise StructuralError("not a checkpoint file")
        if K != CONTEXT:
            raise StructuralError(f"unsupported context window {K}")
        shapes = [(V, d), (h, K * d), (h,), (V, h), (V,)]
        offset = _HEADER.size
        if len(blob) != offset + 8 * sum(int(np.prod(s)) for s in shapes):
            raise StructuralError("checkpoint size does not match its header")
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape))
            chunk = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
            arrays.append(chunk.astype(np.float64).reshape(shape))
            offset += 8 * n
        return cls(*arrays, K=K)


def context_ids(query_ids: Sequence[int], response_ids: Sequence[int]) -> list[int]:
    return [*query_ids, SEP_ID, *response_ids]


def _window(seq: Sequence[int], positions: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    padded = np.asarray([BOS_ID] * CONTEXT + list(seq), dtype=np.int64)
    pos = np.asarray(positions, dtype=np.int64) + CONTEXT
    return padded[pos - 1], padded[pos - 2]


def _forward(params: ModelParams, prev1: np.ndarray, prev2: np.ndarray):
    x = np.concatenate([params.E[prev1], params.E[prev2]], axis=1)
    hidden = np.tanh(x @ params.W1.T + params.b1)
    logits = hidden @ params.W2.T + params.b2
    top = logits.max(axis=1, keepdims=True)
    lse = top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True))
    return x, hidden, logits - lse


def log_probs(params: ModelParams, seq: Sequence[int], positions: Sequence[int]) -> np.ndarray:
    """Log-distributions over the vocabulary at each position of ``seq``.

    Row ``k`` conditions on the two tokens preceding ``seq[positions[k]]``.
    """
    V = params.vocab_size
    if any(not 0 <= t < V for t in seq):
        raise VocabularyError(f"token id outside vocabulary of size {V}")
    if len(positions) == 0:
        return np.zeros((0, V))
    prev1, prev2 = _window(seq, positions)
    return _forward(params, prev1, prev2)[2]


@dataclass(frozen=True)
class WeightedRecord:
    id: str
    query_tokens: tuple[str, ...]
    revised_tokens: tuple[str, ...]
    initial_tokens: tuple[str, ...]
    weights: TokenWeights

    def __post_init__(self) -> None:
        if len(self.weights.revised_weights) != len(self.revised_tokens):
            raise StructuralError(f"{self.id}: revised weights do not match revised tokens")
        if len(self.weights.initial_weights) != len(self.initial_tokens):
            raise StructuralError(f"{self.id}: initial weights do not match initial tokens")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "query_tokens": list(self.query_tokens),
            "revised_tokens": list(self.revised_tokens),
            "initial_tokens": list(self.initial_tokens),
            "revised_weights": list(self.weights.revised_weights),
            "initial_weights": list(self.weights.initial_weights),
        }

    @classmethod
    def from_dict(cls, row: dict) -> "WeightedRecord":
        return cls(
            str(row["id"]),
            tuple(row["query_tokens"]),
            tuple(row["revised_tokens"]),
            tuple(row["initial_tokens"]),
            TokenWeights(tuple(row["revised_weights"]), tuple(row["initial_weights"])),
        )


@dataclass(frozen=True)
class EncodedRecord:
    """Nonzero-weight positions of a record, flattened for the forward pass.

    ``coef`` multiplies each position's NLL: ``+r~`` on the revised side and
    ``-r^`` on the initial side, so the loss is ``sum(coef * -logp)``.
    """

    id: str
    prev1: np.ndarray
    prev2: np.ndarray
    target: np.ndarray
    coef: np.ndarray
    n_revised: int
    revised_weights: np.ndarray
    initial_weights: np.ndarray


def _side(query: list[int], response: list[int], weights: Sequence[float]):
    seq = context_ids(query, response)
    offset = len(query) + 1
    keep = [t for t, w in enumerate(weights) if w != 0]
    prev1, prev2 = _window(seq, [offset + t for t in keep])
    target = np.asarray([response[t] for t in keep], dtype=np.int64)
    return prev1, prev2, target, np.asarray([weights[t] for t in keep], dtype=np.float64)


def encode_record(record: WeightedRecord, vocab: Vocab) -> EncodedRecord:
    q = vocab.encode(record.query_tokens)
    rp1, rp2, rt, rw = _side(q, vocab.encode(record.revised_tokens), record.weights.revised_weights)
    ip1, ip2, it, iw = _side(q, vocab.encode(record.initial_tokens), record.weights.initial_weights)
    return EncodedRecord(
        record.id,
        np.concatenate([rp1, ip1]),
        np.concatenate([rp2, ip2]),
        np.concatenate([rt, it]),
        np.concatenate([rw, -iw]),
        len(rt),
        rw,
        iw,
    )


@dataclass(frozen=True)
class LossReport:
    encourage_term: float
    penalty_term: float
    total: float
    token_counts: dict[str, int]

    @classmethod
    def of(cls, encourage: float, penalty: float, counts: dict[str, int]) -> "LossReport":
        return cls(encourage, penalty, encourage + penalty, counts)

    def __add__(self, other: "LossReport") -> "LossReport":
        counts = {k: self.token_counts.get(k, 0) + other.token_counts.get(k, 0) for k in self.token_counts}
        return LossReport.of(self.encourage_term + other.encourage_term, self.penalty_term + other.penalty_term, counts)


def _report(enc: EncodedRecord, target_logp: np.ndarray) -> LossReport:
    n = enc.n_revised
    encourage = -float(np.sum(enc.revised_weights * target_logp[:n]))
    penalty = float(np.sum(enc.initial_weights * target_logp[n:]))
    counts = {"encouraged": n, "penalised": len(enc.target) - n}
    return LossReport.of(encourage, penalty, counts)


def figa_loss(params: ModelParams, record: EncodedRecord) -> LossReport:
    """Weighted NLL of the revised tokens plus weighted log-likelihood of the penalised initial ones."""
    if len(record.target) == 0:
        return LossReport.of(0.0, 0.0, {"encouraged": 0, "penalised": 0})
    logp = _forward(params, record.prev1, record.prev2)[2]
    return _report(record, logp[np.arange(len(record.target)), record.target])


def sft_loss(params: ModelParams, query_ids: Sequence[int], target_ids: Sequence[int]) -> float:
    if len(target_ids) == 0:
        return 0.0
    seq = context_ids(query_ids, target_ids)
    offset = len(query_ids) + 1
    logp = log_probs(params, seq, range(offset, offset + len(target_ids)))
    picked = logp[np.arange(len(target_ids)), np.asarray(target_ids)]
    return -float(np.sum(np.ones(len(target_ids)) * picked))


def loss_and_grad(params: ModelParams, record: EncodedRecord) -> tuple[LossReport, ModelParams]:
    """FIGA loss and its exact gradient with respect to every parameter."""
    grad = ModelParams.zeros(params.vocab_size, params.embed_dim, params.hidden_dim)
    if len(record.target) == 0:
        return LossReport.of(0.0, 0.0, {"encouraged": 0, "penalised": 0}), grad
    x, hidden, logp = _forward(params, record.prev1, record.prev2)
    rows = np.arange(len(record.target))
    report = _report(record, logp[rows, record.target])

    dlogits = np.exp(logp)
    dlogits[rows, record.target] -= 1.0
    dlogits *= record.coef[:, None]
    grad.W2[...] = dlogits.T @ hidden
    grad.b2[...] = dlogits.sum(axis=0)
    dpre = (dlogits @ params.W2) * (1.0 - hidden * hidden)
    grad.W1[...] = dpre.T @ x
    grad.b1[...] = dpre.sum(axis=0)
    dx = dpre @ params.W1
    d = params.embed_dim
    np.add.at(grad.E, record.prev1, dx[:, :d])
    np.add.at(grad.E, record.prev2, dx[:, d:])
    return report, grad


def grad(params: ModelParams, record: EncodedRecord) -> ModelParams:
    return loss_and_grad(params, record)[1]


def sequence_logprobs(params: ModelParams, query_ids: Sequence[int], response_ids: Sequence[int]) -> np.ndarray:
    """Teacher-forced log-probability of every response token."""
    if not response_ids:
        return np.zeros(0)
    seq = context_ids(query_ids, response_ids)
    offset = len(query_ids) + 1
    logp = log_probs(params, seq, range(offset, offset + len(response_ids)))
    return logp[np.arange(len(response_ids)), np.asarray(response_ids)]


def greedy_decode(params: ModelParams, query_ids: Sequence[int], max_len: int = 64) -> list[int]:
    """Argmax decoding; stops on SEP or end-of-response and never emits BOS."""
    seq = context_ids(query_ids, [])
    out: list[int] = []
    for _ in range(max_len):
        logp = log_probs(params, seq, [len(seq)])[0]
        logp[BOS_ID] = -np.inf
        nxt = int(np.argmax(logp))
        if nxt in (SEP_ID, EOS_ID):
            break
        seq.append(nxt)
        out.append(nxt)
    return out


def save_checkpoint(params: ModelParams, vocab: Vocab, path: str | os.PathLike, manifest: dict) -> None:
    if len(vocab) != params.vocab_size:
        raise ConfigError("vocabulary size does not match parameters")
    path = Path(path)
    path.write_bytes(params.to_bytes())
    vocab.save(str(path) + ".vocab")
    lines = [f"{k}: {manifest[k]}" for k in sorted(manifest)]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, Vocab, dict[str, str]]:
    path = Path(path)
    params = ModelParams.from_bytes(path.read_bytes())
    vocab = Vocab.load(str(path) + ".vocab")
    manifest = {}
    mpath = Path(str(path) + ".manifest")
    if mpath.exists():
        for line in mpath.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition(": ")
            manifest[key] = value
    if len(vocab) != params.vocab_size:
        raise StructuralError("checkpoint vocabulary does not match its parameters")
    return params, vocab, manifest
