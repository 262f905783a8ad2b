"""Desk-scale autoregressive policies.

Two families share one flat float64 parameter vector layout so that any two
checkpoints with the same :class:`ModelSpec` can be merged coordinate-wise:

* ``tabular_bigram``: a ``V x V`` table of next-token logits indexed by the
  previous token.
* ``tiny_neural_lm``: token embeddings for the last ``k`` tokens, one tanh
  hidden layer and an output projection. Layout is
  ``[E (V*d), W1 (k*d*h), b1 (h), W2 (h*V), b2 (V)]``.

Token 0 is EOS. Responses end with exactly one EOS; contexts shorter than the
window are left-padded with EOS.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import FormatError, InputError
from .seeding import rng_for

EOS = 0

Tokens = tuple[int, ...]


class Family(str, Enum):
    TABULAR_BIGRAM = "tabular_bigram"
    TINY_NEURAL_LM = "tiny_neural_lm"


_FAMILY_TAG = {Family.TABULAR_BIGRAM: 0, Family.TINY_NEURAL_LM: 1}
_TAG_FAMILY = {v: k for k, v in _FAMILY_TAG.items()}


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    family: Family = Family.TINY_NEURAL_LM
    vocab_size: int = Field(16, ge=2)
    context_window: int = Field(3, ge=0)
    embed_dim: int = Field(8, ge=0)
    hidden_dim: int = Field(16, ge=0)
    max_response_len: int = Field(8, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _zero_unused_dims(cls, data):
        # k, d, h are meaningless for the bigram table and serialize as 0.
        if isinstance(data, dict) and Family(data.get("family", Family.TINY_NEURAL_LM)) is Family.TABULAR_BIGRAM:
            data = {**data, "context_window": 0, "embed_dim": 0, "hidden_dim": 0}
        return data

    @model_validator(mode="after")
    def _check_neural_dims(self):
        if self.family is Family.TINY_NEURAL_LM:
            for name in ("context_window", "embed_dim", "hidden_dim"):
                if getattr(self, name) < 1:
                    raise ValueError(f"{name} must be >= 1 for tiny_neural_lm")
        return self

    @property
    def window(self) -> int:
        """Number of preceding tokens each prediction conditions on."""
        return 1 if self.family is Family.TABULAR_BIGRAM else self.context_window

    @property
    def param_count(self) -> int:
        V = self.vocab_size
        if self.family is Family.TABULAR_BIGRAM:
            return V * V
        k, d, h = self.context_window, self.embed_dim, self.hidden_dim
        return V * d + (k * d * h + h) + (h * V + V)


@dataclass(frozen=True, eq=False)
class PolicyCheckpoint:
    """Immutable parameter vector plus the ModelSpec that gives it meaning."""

    spec: ModelSpec
    params: np.ndarray
    iteration_index: int = 0
    label: str = ""

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        if params.size != self.spec.param_count:
            raise InputError(
                f"params has length {params.size}, spec requires {self.spec.param_count}"
            )
        if not np.all(np.isfinite(params)):
            raise InputError("params contain NaN or Inf")
        if self.iteration_index < 0:
            raise InputError("iteration_index must be >= 0")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    def replace(self, params=None, iteration_index=None, label=None) -> "PolicyCheckpoint":
        return PolicyCheckpoint(
            spec=self.spec,
            params=self.params if params is None else params,
            iteration_index=self.iteration_index if iteration_index is None else iteration_index,
            label=self.label if label is None else label,
        )

    def identical_to(self, other: "PolicyCheckpoint") -> bool:
        """Bitwise equality of spec, params and iteration index."""
        return (
            self.spec == other.spec
            and self.iteration_index == other.iteration_index
            and self.params.tobytes() == other.params.tobytes()
        )


def build_model(spec: ModelSpec, init: str = "zeros", seed: int = 0, stddev: float = 0.1,
                label: str = "init") -> PolicyCheckpoint:
    """Create an iteration-0 checkpoint.

    ``init`` is ``"zeros"`` or ``"seeded_normal"``; the latter draws
    ``N(0, stddev^2)`` entries from a stream keyed by ``seed``.
    """
    n = spec.param_count
    if init == "zeros":
        params = np.zeros(n)
    elif init == "seeded_normal":
        params = rng_for(seed, "build_model").normal(0.0, stddev, size=n)
    else:
        raise InputError(f"unknown init {init!r}")
    return PolicyCheckpoint(spec=spec, params=params, iteration_index=0, label=label)


# -- sequence validation and encoding ----------------------------------------

def check_prompt(spec: ModelSpec, prompt: Sequence[int]) -> None:
    for t in prompt:
        if not 0 <= t < spec.vocab_size:
            raise InputError(f"prompt token {t} outside [0, {spec.vocab_size})")
        if t == EOS:
            raise InputError("prompt contains EOS")


def check_response(spec: ModelSpec, response: Sequence[int]) -> None:
    if len(response) == 0:
        raise InputError("response is empty")
    if len(response) > spec.max_response_len:
        raise InputError(f"response length {len(response)} exceeds {spec.max_response_len}")
    for i, t in enumerate(response):
        if not 0 <= t < spec.vocab_size:
            raise InputError(f"response token {t} outside [0, {spec.vocab_size})")
        if (t == EOS) != (i == len(response) - 1):
            raise InputError("response must contain EOS exactly once, as its final token")


@dataclass(frozen=True)
class SequenceBatch:
    """Flattened prediction positions of several (prompt, response) pairs."""

    contexts: np.ndarray  # (N, window) token ids
    targets: np.ndarray   # (N,)
    segment: np.ndarray   # (N,) index of the source sequence
    n_sequences: int


def encode(spec: ModelSpec, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> SequenceBatch:
    w = spec.window
    contexts, targets, segment = [], [], []
    for i, (prompt, response) in enumerate(pairs):
        check_prompt(spec, prompt)
        check_response(spec, response)
        padded = np.array([EOS] * w + list(prompt) + list(response), dtype=np.int64)
        P, L = len(prompt), len(response)
        contexts.append(sliding_window_view(padded, w)[P:P + L])
        targets.append(padded[w + P:])
        segment.append(np.full(L, i, dtype=np.int64))
    if not pairs:
        return SequenceBatch(np.zeros((0, w), np.int64), np.zeros(0, np.int64),
                             np.zeros(0, np.int64), 0)
    return SequenceBatch(np.concatenate(contexts), np.concatenate(targets),
                         np.concatenate(segment), len(pairs))


# -- forward / backward ------------------------------------------------------

def _unpack(spec: ModelSpec, params: np.ndarray):
    V, k, d, h = spec.vocab_size, spec.context_window, spec.embed_dim, spec.hidden_dim
    o = 0
    E = params[o:o + V * d].reshape(V, d); o += V * d
    W1 = params[o:o + k * d * h].reshape(k * d, h); o += k * d * h
    b1 = params[o:o + h]; o += h
    W2 = params[o:o + h * V].reshape(h, V); o += h * V
    b2 = params[o:o + V]
    return E, W1, b1, W2, b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def next_token_logits(spec: ModelSpec, params: np.ndarray, contexts: np.ndarray):
    """Logits for each context row, plus whatever backward needs."""
    if spec.family is Family.TABULAR_BIGRAM:
        V = spec.vocab_size
        return params.reshape(V, V)[contexts[:, -1]], None
    E, W1, b1, W2, b2 = _unpack(spec, params)
    x = E[contexts].reshape(len(contexts), -1)
    hid = np.tanh(x @ W1 + b1)
    return hid @ W2 + b2, (x, hid)


def _logits_backward(spec, params, contexts, cache, dlogits) -> np.ndarray:
    grad = np.zeros_like(params)
    if spec.family is Family.TABULAR_BIGRAM:
        V = spec.vocab_size
        np.add.at(grad.reshape(V, V), contexts[:, -1], dlogits)
        return grad
    x, hid = cache
    E, W1, b1, W2, b2 = _unpack(spec, params)
    gE, gW1, gb1, gW2, gb2 = _unpack(spec, grad)
    gW2 += hid.T @ dlogits
    gb2 += dlogits.sum(axis=0)
    da = (dlogits @ W2.T) * (1.0 - hid * hid)
    gW1 += x.T @ da
    gb1 += da.sum(axis=0)
    dx = (da @ W1.T).reshape(len(contexts), spec.context_window, spec.embed_dim)
    np.add.at(gE, contexts, dx)
    return grad


class Forward:
    """One forward pass over a :class:`SequenceBatch`.

    ``seq_log_probs[i]`` is log pi(response_i | prompt_i). ``backward(c)``
    returns the gradient of ``sum_i c[i] * seq_log_probs[i]`` with respect to
    the parameters, reusing the cached activations.
    """

    def __init__(self, spec: ModelSpec, params: np.ndarray, batch: SequenceBatch):
        self.spec, self.params, self.batch = spec, params, batch
        logits, self._cache = next_token_logits(spec, params, batch.contexts)
        logp = _log_softmax(logits)
        self._probs = np.exp(logp)
        pos = logp[np.arange(len(batch.targets)), batch.targets]
        self.seq_log_probs = np.bincount(batch.segment, weights=pos, minlength=batch.n_sequences)

    def backward(self, seq_coef: np.ndarray) -> np.ndarray:
        b = self.batch
        c = np.asarray(seq_coef, dtype=np.float64)[b.segment]
        dlogits = -c[:, None] * self._probs
        dlogits[np.arange(len(b.targets)), b.targets] += c
        return _logits_backward(self.spec, self.params, b.contexts, self._cache, dlogits)


def sequence_log_probs(model: PolicyCheckpoint, batch: SequenceBatch) -> np.ndarray:
    return Forward(model.spec, model.params, batch).seq_log_probs


def log_prob(model: PolicyCheckpoint, prompt: Sequence[int], response: Sequence[int]) -> float:
    """log pi(response | prompt), EOS included."""
    return float(sequence_log_probs(model, encode(model.spec, [(prompt, response)]))[0])


def grad_log_prob(model: PolicyCheckpoint, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
    fwd = Forward(model.spec, model.params, encode(model.spec, [(prompt, response)]))
    return fwd.backward(np.ones(1))


def next_token_probs(model: PolicyCheckpoint, context: Sequence[int]) -> np.ndarray:
    """Next-token distribution after the (prompt + partial response) ``context``."""
    w = model.spec.window
    ctx = ([EOS] * w + list(context))[-w:]
    logits, _ = next_token_logits(model.spec, model.params, np.array([ctx], dtype=np.int64))
    return np.exp(_log_softmax(logits))[0]


# -- sampling ----------------------------------------------------------------

def sample_responses(model: PolicyCheckpoint, prompts: Sequence[Sequence[int]], temperature: float,
                     max_len: int | None, seeds: Sequence[int]) -> list[Tokens]:
    """Decode one response per prompt, all prompts advanced in lock step.

    ``temperature == 0`` is greedy (lowest token id wins ties). Otherwise each
    sequence draws its uniforms from its own seed, so a response depends only
    on (model, prompt, temperature, max_len, seed). A response that reaches
    ``max_len - 1`` content tokens gets EOS appended.
    """
    spec = model.spec
    max_len = spec.max_response_len if max_len is None else max_len
    if max_len < 1:
        raise InputError("max_len must be >= 1")
    if max_len > spec.max_response_len:
        raise InputError(f"max_len {max_len} exceeds model max_response_len {spec.max_response_len}")
    if temperature < 0:
        raise InputError("temperature must be >= 0")
    n, w = len(prompts), spec.window
    if len(seeds) != n:
        raise InputError("need one seed per prompt")
    hist = np.zeros((n, w), dtype=np.int64)
    for i, p in enumerate(prompts):
        check_prompt(spec, p)
        tail = ([EOS] * w + list(p))[-w:]
        hist[i] = tail
    if temperature > 0:
        uniforms = np.stack([rng_for(s, "sample").random(max_len) for s in seeds]) if n else None
    out: list[list[int]] = [[] for _ in range(n)]
    active = np.arange(n)
    for step in range(max_len):
        if active.size == 0:
            break
        if step == max_len - 1:
            tokens = np.full(active.size, EOS, dtype=np.int64)
        else:
            logits, _ = next_token_logits(spec, model.params, hist[active])
            if temperature == 0:
                tokens = np.argmax(logits, axis=1)
            else:
                probs = np.exp(_log_softmax(logits / temperature))
                cdf = np.cumsum(probs, axis=1)
                u = uniforms[active, step] * cdf[:, -1]
                tokens = np.minimum((cdf <= u[:, None]).sum(axis=1), spec.vocab_size - 1)
        for i, t in zip(active, tokens):
            out[i].append(int(t))
        hist[active] = np.concatenate([hist[active, 1:], tokens[:, None]], axis=1)
        active = active[tokens != EOS]
    return [tuple(r) for r in out]


def sample_response(model: PolicyCheckpoint, prompt: Sequence[int], temperature: float = 1.0,
                    max_len: int | None = None, rng_seed: int = 0) -> Tokens:
    return sample_responses(model, [prompt], temperature, max_len, [rng_seed])[0]


# -- checkpoint file ---------------------------------------------------------

_MAGIC = b"TPMM"
_VERSION = 1
_HEADER = struct.Struct("<4sIB5IIQ")


def checkpoint_to_bytes(ckpt: PolicyCheckpoint) -> bytes:
    s = ckpt.spec
    header = _HEADER.pack(_MAGIC, _VERSION, _FAMILY_TAG[s.family], s.vocab_size, s.context_window,
                          s.embed_dim, s.hidden_dim, s.max_response_len, ckpt.iteration_index,
                          s.param_count)
    return header + ckpt.params.astype("<f8").tobytes()


def checkpoint_from_bytes(data: bytes, label: str = "") -> PolicyCheckpoint:
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint shorter than header")
    magic, version, tag, V, k, d, h, max_len, it, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if tag not in _TAG_FAMILY:
        raise FormatError(f"unknown family tag {tag}")
    try:
        spec = ModelSpec(family=_TAG_FAMILY[tag], vocab_size=V, context_window=k, embed_dim=d,
                         hidden_dim=h, max_response_len=max_len)
    except ValueError as exc:
        raise FormatError(f"invalid model spec in header: {exc}") from exc
    if count != spec.param_count:
        raise FormatError(f"header param_count {count} does not match spec ({spec.param_count})")
    payload = data[_HEADER.size:]
    if len(payload) != 8 * count:
        raise FormatError(f"payload holds {len(payload)} bytes, expected {8 * count}")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    try:
        return PolicyCheckpoint(spec=spec, params=params, iteration_index=it, label=label)
    except InputError as exc:
        raise FormatError(str(exc)) from exc


def save_checkpoint(ckpt: PolicyCheckpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> PolicyCheckpoint:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), label=path.stem)


def param_roundtrip(ckpt: PolicyCheckpoint) -> PolicyCheckpoint:
    return checkpoint_from_bytes(checkpoint_to_bytes(ckpt), label=ckpt.label)
