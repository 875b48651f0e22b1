"""Router-logit traces: binary and JSONL formats, synthetic generation.

Binary layout (little-endian)::

    offset  size  field
    0       4     magic b"MOET"
    4       2     version (u16, = 1)
    6       4     num_layers
    10      4     experts_per_layer
    14      4     top_k
    18      4     shared_experts
    22      4     num_tokens
    26      4     prompt_len
    30      1     dtype (0 = float32)
    31      ...   logits, float32, token-major then layer then expert
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, TextIO, Union

import numpy as np

from .errors import FormatError, InvalidParam
from .routing import ModelConfig, model_for

MAGIC = b"MOET"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sH6IB")
HEADER_SIZE = HEADER.size  # 31

PathOrFile = Union[str, os.PathLike, BinaryIO]


@dataclass(frozen=True)
class TraceHeader:
    num_layers: int
    experts_per_layer: int
    top_k: int
    shared_experts: int
    num_tokens: int
    prompt_len: int = 0
    dtype: int = DTYPE_F32
    version: int = VERSION

    def validate(self, offset=None):
        def bad(msg):
            raise FormatError(msg, offset=offset)
        if self.version != VERSION:
            bad(f"unsupported trace version {self.version}")
        if self.dtype != DTYPE_F32:
            bad(f"unsupported dtype tag {self.dtype}")
        if self.num_layers < 1 or self.experts_per_layer < 1:
            bad("num_layers and experts_per_layer must be positive")
        if not 1 <= self.top_k <= self.experts_per_layer:
            bad(f"top_k={self.top_k} outside [1, {self.experts_per_layer}]")
        if self.num_tokens < 1:
            bad("num_tokens must be >= 1")
        if self.prompt_len > self.num_tokens:
            bad(f"prompt_len={self.prompt_len} exceeds num_tokens={self.num_tokens}")

    @property
    def shape(self):
        return (self.num_tokens, self.num_layers, self.experts_per_layer)

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.num_layers, self.experts_per_layer,
                           self.top_k, self.shared_experts, self.num_tokens, self.prompt_len,
                           self.dtype)

    def to_dict(self) -> dict:
        return {
            "magic": MAGIC.decode(), "version": self.version, "num_layers": self.num_layers,
            "experts_per_layer": self.experts_per_layer, "top_k": self.top_k,
            "shared_experts": self.shared_experts, "num_tokens": self.num_tokens,
            "prompt_len": self.prompt_len, "dtype": self.dtype,
        }


@dataclass(frozen=True, eq=False)
class LogitTrace:
    header: TraceHeader
    logits: np.ndarray  # float32 [tokens, layers, experts]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.logits, dtype=np.float32)
        if arr.shape != self.header.shape:
            raise FormatError(f"logits shape {arr.shape} does not match header {self.header.shape}")
        if not np.isfinite(arr).all():
            raise FormatError("trace contains non-finite logits")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    def __eq__(self, other):
        if not isinstance(other, LogitTrace):
            return NotImplemented
        return (self.header == other.header
                and self.logits.tobytes() == other.logits.tobytes())

    @property
    def num_tokens(self) -> int:
        return self.header.num_tokens

    def model(self, name="custom") -> ModelConfig:
        h = self.header
        return model_for(h.num_layers, h.experts_per_layer, h.top_k, h.shared_experts, name)

    @classmethod
    def from_array(cls, logits, top_k, shared_experts=0, prompt_len=0) -> "LogitTrace":
        arr = np.asarray(logits, dtype=np.float32)
        if arr.ndim != 3:
            raise FormatError(f"expected a [tokens, layers, experts] array, got {arr.ndim} dims")
        t, l, n = arr.shape
        header = TraceHeader(l, n, top_k, shared_experts, t, prompt_len)
        header.validate()
        return cls(header, arr)


# -- binary -------------------------------------------------------------------

def dumps(trace: LogitTrace) -> bytes:
    return trace.header.pack() + trace.logits.astype("<f4", copy=False).tobytes()


def loads(data: bytes) -> LogitTrace:
    if len(data) == 0:
        raise FormatError("missing header", offset=0)
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: need {HEADER_SIZE} bytes, got {len(data)}", offset=len(data))
    magic, version, layers, experts, top_k, shared, tokens, prompt_len, dtype = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported trace version {version}", offset=4)
    header = TraceHeader(layers, experts, top_k, shared, tokens, prompt_len, dtype, version)
    header.validate(offset=6)
    expected = HEADER_SIZE + 4 * tokens * layers * experts
    if len(data) < expected:
        raise FormatError(f"truncated logits: expected {expected} bytes, got {len(data)}", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after logits", offset=expected)
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).reshape(header.shape)
    bad = ~np.isfinite(arr)
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError("non-finite logit", offset=HEADER_SIZE + 4 * first)
    return LogitTrace(header, arr.astype(np.float32))


def write_trace(trace: LogitTrace, destination: PathOrFile) -> int:
    data = dumps(trace)
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        with open(destination, "wb") as fh:
            fh.write(data)
    return len(data)


def read_trace(source: PathOrFile) -> LogitTrace:
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    return loads(data)


# -- JSONL --------------------------------------------------------------------

def export_jsonl(trace: LogitTrace, out: TextIO) -> None:
    """Header object on the first line, then one ``{"t", "layers"}`` object per token."""
    out.write(json.dumps(trace.header.to_dict()) + "\n")
    for t in range(trace.num_tokens):
        # float() of a float32 is exact and repr() is the shortest round-tripping form.
        layers = [[float(v) for v in row] for row in trace.logits[t]]
        out.write(json.dumps({"t": t, "layers": layers}) + "\n")


def dumps_jsonl(trace: LogitTrace) -> str:
    buf = io.StringIO()
    export_jsonl(trace, buf)
    return buf.getvalue()


def import_jsonl(src: Union[TextIO, str]) -> LogitTrace:
    lines = src.splitlines() if isinstance(src, str) else src.read().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not lines:
        raise FormatError("missing header", line=1)

    def parse(lineno, text):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed JSON: {exc.msg}", line=lineno) from None
        if not isinstance(obj, dict):
            raise FormatError("expected a JSON object", line=lineno)
        return obj

    lineno, text = lines[0]
    head = parse(lineno, text)
    if head.get("magic") != MAGIC.decode():
        raise FormatError("first line is not a MOET header", line=lineno)
    try:
        header = TraceHeader(int(head["num_layers"]), int(head["experts_per_layer"]),
                             int(head["top_k"]), int(head.get("shared_experts", 0)),
                             int(head["num_tokens"]), int(head.get("prompt_len", 0)),
                             int(head.get("dtype", DTYPE_F32)), int(head.get("version", VERSION)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad header field: {exc}", line=lineno) from None
    try:
        header.validate()
    except FormatError as exc:
        raise FormatError(str(exc), line=lineno) from None

    body = lines[1:]
    if len(body) != header.num_tokens:
        raise FormatError(f"expected {header.num_tokens} token lines, got {len(body)}",
                          line=body[-1][0] if body else lineno)
    arr = np.empty(header.shape, dtype=np.float32)
    for t, (lineno, text) in enumerate(body):
        obj = parse(lineno, text)
        if "layers" not in obj:
            raise FormatError('missing "layers" key', line=lineno)
        if obj.get("t", t) != t:
            raise FormatError(f"token index {obj.get('t')} out of order, expected {t}", line=lineno)
        layers = obj["layers"]
        if not isinstance(layers, list) or len(layers) != header.num_layers:
            got = len(layers) if isinstance(layers, list) else type(layers).__name__
            raise FormatError(f"expected {header.num_layers} layers, got {got}", line=lineno)
        try:
            row = np.array(layers, dtype=np.float64)
        except (TypeError, ValueError):
            raise FormatError("layers must be numeric lists", line=lineno) from None
        if row.shape != header.shape[1:]:
            raise FormatError(f"layer shape {row.shape} does not match header {header.shape[1:]}", line=lineno)
        if not np.isfinite(row).all():
            raise FormatError("non-finite logit", line=lineno)
        arr[t] = row
    return LogitTrace(header, arr)


# -- synthetic traces ---------------------------------------------------------

DEFAULT_TOKENS = 1024
# Logit offset of "hot" experts; 0.2 with locality 0.5 lands near 35% LRU
# misses for a Qwen-shaped model at half cache.
HOT_BIAS = 0.2


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic router-logit generator.

    ``locality`` is the AR(1) persistence of each layer's latent preference
    vector, ``hot_fraction`` the share of experts with an elevated base
    preference, ``logit_scale`` a multiplier on every logit.
    """
    locality: float = 0.5
    hot_fraction: float = 0.25
    logit_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.locality <= 1.0:
            raise InvalidParam(f"locality must lie in [0, 1], got {self.locality}")
        if not 0.0 < self.hot_fraction <= 1.0:
            raise InvalidParam(f"hot_fraction must lie in (0, 1], got {self.hot_fraction}")
        if not self.logit_scale > 0:
            raise InvalidParam(f"logit_scale must be positive, got {self.logit_scale}")


def generate_synthetic(config: ModelConfig, tokens: int = DEFAULT_TOKENS,
                       params: SynthParams = SynthParams(), prompt_len: int = 0) -> LogitTrace:
    """Draw a trace whose per-layer preferences follow an AR(1) process.

    v[t] = a * v[t-1] + (1 - a) * eps[t] with eps ~ N(0, I); v[0] is drawn
    from the stationary distribution.  logits = scale * (v + hot bias).
    """
    if tokens < 1:
        raise InvalidParam("tokens must be >= 1")
    if not 0 <= prompt_len <= tokens:
        raise InvalidParam(f"prompt_len must lie in [0, {tokens}]")
    rng = np.random.default_rng(params.seed)
    layers, n = config.num_layers, config.num_experts
    a = params.locality

    bias = np.zeros((layers, n))
    n_hot = max(1, int(round(params.hot_fraction * n)))
    if n_hot < n:
        for layer in range(layers):
            bias[layer, rng.choice(n, size=n_hot, replace=False)] = HOT_BIAS

    eps = rng.standard_normal((tokens, layers, n))
    v = np.empty_like(eps)
    v[0] = eps[0] * np.sqrt((1 - a) / (1 + a)) if a < 1 else 0.0
    for t in range(1, tokens):
        v[t] = a * v[t - 1] + (1 - a) * eps[t]
    logits = params.logit_scale * (v + bias)
    header = TraceHeader(layers, n, config.top_k, config.shared_experts, tokens, prompt_len)
    return LogitTrace(header, logits.astype(np.float32))


# -- diagnostics --------------------------------------------------------------

def locality_stats(trace: LogitTrace, top_k=None) -> dict:
    """Consecutive-token top-1 agreement, its independence baseline, and top-K Jaccard."""
    k = top_k or trace.header.top_k
    z = trace.logits.astype(np.float64)
    order = np.argsort(-z, axis=2, kind="stable")
    top1 = order[:, :, 0]
    tokens, layers, n = z.shape
    agree, chance, jacc = [], [], []
    for layer in range(layers):
        s = top1[:, layer]
        agree.append(float(np.mean(s[1:] == s[:-1])) if tokens > 1 else 1.0)
        freq = np.bincount(s, minlength=n) / tokens
        chance.append(float(np.sum(freq ** 2)))
        sets = [set(row) for row in order[:, layer, :k].tolist()]
        j = [len(a & b) / len(a | b) for a, b in zip(sets, sets[1:])]
        jacc.append(float(np.mean(j)) if j else 1.0)
    spread = z.max(axis=2) - z.min(axis=2)
    return {
        "top1_agreement": agree,
        "top1_chance": chance,
        "topk_jaccard": jacc,
        "range_mean": spread.mean(axis=0).tolist(),
        "range_std": spread.std(axis=0).tolist(),
        "range_min": spread.min(axis=0).tolist(),
        "range_max": spread.max(axis=0).tolist(),
    }
