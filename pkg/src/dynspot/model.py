"""Query-based temporal spotting model.

Pipeline: affine frame embedding -> pre-norm transformer encoder (sinusoidal
positions added to attention queries/keys only) -> transformer decoder over
learned query embeddings, conditioned on per-query reference times -> class
head (sigmoid scores) and time head (sigmoid of head output plus reference
logit). Every decoder layer produces a prediction set.

All forward functions accept batched input ``(B, T, D_f)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"DYNSPOT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    d_feat: int = 8
    d_model: int = 32
    n_enc: int = 2
    n_dec: int = 2
    n_heads: int = 2
    n_queries: int = 16
    d_ff: int = 64
    window: int = 64

    def __post_init__(self):
        if self.d_model % 2:
            raise ValueError("d_model must be even (sinusoidal encoding)")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_classes, self.d_feat, self.n_heads, self.n_queries, self.d_ff) < 1:
            raise ValueError("model extents must be positive")
        if self.window < 2:
            raise ValueError("window must be at least 2 frames")
        if self.n_enc < 0 or self.n_dec < 1:
            raise ValueError("need n_enc >= 0 and n_dec >= 1")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def replace(self, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> ModelParams:
        return ModelParams(
            self.config,
            {k: Tensor(arrays[k], requires_grad=requires_grad, name=k) for k in self.tensors},
        )

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class LayerOutput:
    """Predictions of one decoder layer for a batch.

    ``class_logits`` is ``(B, N_q, N_c)``, ``time_logits`` ``(B, N_q)``;
    scores and normalised times are their sigmoids.
    """

    class_logits: Tensor
    time_logits: Tensor

    @property
    def scores(self) -> np.ndarray:
        return tn._sigmoid(self.class_logits.data)

    @property
    def times(self) -> np.ndarray:
        return tn._sigmoid(self.time_logits.data)


# ---------------------------------------------------------------------------
# parameters

def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in); fan_in 0 marks norm gains/shifts."""
    D, F = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[tuple[int, ...], int]] = {
        "embed.w": ((cfg.d_feat, D), cfg.d_feat),
        "embed.b": ((D,), cfg.d_feat),
    }

    def attn(prefix):
        for p in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{p}"] = ((D, D), D)
            shapes[f"{prefix}.b{p}"] = ((D,), D)

    def norm(prefix):
        shapes[f"{prefix}.g"] = ((D,), 0)
        shapes[f"{prefix}.b"] = ((D,), 0)

    def ff(prefix):
        shapes[f"{prefix}.w1"] = ((D, F), D)
        shapes[f"{prefix}.b1"] = ((F,), D)
        shapes[f"{prefix}.w2"] = ((F, D), F)
        shapes[f"{prefix}.b2"] = ((D,), F)

    for i in range(cfg.n_enc):
        norm(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        ff(f"enc{i}.ff")
    norm("enc.norm")
    shapes["queries"] = ((cfg.n_queries, D), 1)
    for i in range(cfg.n_dec):
        norm(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        ff(f"dec{i}.ff")
    norm("dec.norm")
    shapes.update({
        "ref.w1": ((D, D), D), "ref.b1": ((D,), D),
        "ref.w2": ((D, 1), D), "ref.b2": ((1,), D),
        "cls.w": ((D, cfg.n_classes), D), "cls.b": ((cfg.n_classes,), D),
        "time.w1": ((D, D), D), "time.b1": ((D,), D),
        "time.w2": ((D, D), D), "time.b2": ((D,), D),
        "time.w3": ((D, 1), D), "time.b3": ((1,), D),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, unit-gain/zero-shift norms."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (shape, fan_in) in _param_shapes(cfg).items():
        if fan_in == 0:
            arr = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# positional encoding

def sinusoidal_at(positions, dim: int) -> np.ndarray:
    """Sinusoidal encoding at arbitrary (real) positions: sin at even columns,
    cos at odd columns, frequency 1/10000^(2k/dim)."""
    if dim % 2:
        raise ValueError(f"sinusoidal encoding needs an even dimension, got {dim}")
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    out = np.empty(pos.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(pos * freq)
    out[..., 1::2] = np.cos(pos * freq)
    return out


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Rows for positions ``0 .. length-1``."""
    return sinusoidal_at(np.arange(length), dim)


def _sinusoidal_tensor(positions: Tensor, dim: int) -> Tensor:
    # differentiable in the positions; same layout as sinusoidal_at
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    interleave = np.zeros((dim // 2, dim))
    interleave[np.arange(dim // 2), 2 * np.arange(dim // 2)] = 1.0
    shift = np.zeros((dim // 2, dim))
    shift[np.arange(dim // 2), 2 * np.arange(dim // 2) + 1] = 1.0
    angles = tn.matmul(tn.reshape(positions, positions.shape + (1,)), Tensor(freq[None, :]))
    return tn.add(tn.matmul(tn.sin(angles), Tensor(interleave)),
                  tn.matmul(tn.cos(angles), Tensor(shift)))


# ---------------------------------------------------------------------------
# building blocks

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tn.add(tn.matmul(x, w), b)


def _norm(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return tn.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return tn.transpose(tn.reshape(x, (B, L, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: ModelParams, prefix: str,
              heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with input/output projections."""
    q = _split_heads(_linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _split_heads(_linear(k_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _split_heads(_linear(v_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    mixed = _merge_heads(tn.matmul(tn.softmax(scores, axis=-1), v))
    return _linear(mixed, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _feed_forward(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    h = tn.relu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _as_batch(features) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim == 2:
        x = tn.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"features must be (T, D_f) or (B, T, D_f), got {x.shape}")
    return x


def frame_positions(length: int, dim: int) -> np.ndarray:
    """Encoding of frames 1..length (frame f sits at normalised time f/length)."""
    return sinusoidal_at(np.arange(1, length + 1), dim)


# ---------------------------------------------------------------------------
# model stages

def encode(features, params: ModelParams) -> Tensor:
    """Embed frames and run the encoder; returns ``(B, T, D)``."""
    cfg = params.config
    x = _as_batch(features)
    if x.shape[-1] != cfg.d_feat:
        raise ShapeError(f"encode: feature width {x.shape[-1]} != d_feat {cfg.d_feat}")
    h = _linear(x, params["embed.w"], params["embed.b"])
    if cfg.n_enc == 0:
        return h
    pos = Tensor(frame_positions(x.shape[1], cfg.d_model))
    for i in range(cfg.n_enc):
        y = _norm(h, params, f"enc{i}.ln1")
        qk = tn.add(y, pos)
        h = tn.add(h, attention(qk, qk, y, params, f"enc{i}.attn", cfg.n_heads))
        y = _norm(h, params, f"enc{i}.ln2")
        h = tn.add(h, _feed_forward(y, params, f"enc{i}.ff"))
    return _norm(h, params, "enc.norm")


def reference_times(params: ModelParams) -> Tensor:
    """Per-query reference logits, shape ``(N_q,)``."""
    q = params["queries"]
    h = tn.relu(_linear(q, params["ref.w1"], params["ref.b1"]))
    r = _linear(h, params["ref.w2"], params["ref.b2"])
    return tn.reshape(r, (q.shape[0],))


def decode(encoded: Tensor, params: ModelParams, refs: Tensor | None = None) -> list[Tensor]:
    """Decoder embeddings ``(B, N_q, D)`` after each layer (final norm applied)."""
    cfg = params.config
    if encoded.ndim != 3 or encoded.shape[-1] != cfg.d_model:
        raise ShapeError(f"decode: encoded must be (B, T, {cfg.d_model}), got {encoded.shape}")
    B, T, D = encoded.shape
    if refs is None:
        refs = reference_times(params)
    # query positional term: encoding of the reference position sigmoid(r) * T
    ref_pos = _sinusoidal_tensor(tn.scale(tn.sigmoid(refs), float(T)), D)
    frame_pos = Tensor(frame_positions(T, D))
    keys = tn.add(encoded, frame_pos)
    tgt = tn.add(Tensor(np.zeros((B, cfg.n_queries, D))), params["queries"])
    outputs = []
    for i in range(cfg.n_dec):
        y = _norm(tgt, params, f"dec{i}.ln1")
        qk = tn.add(y, ref_pos)
        tgt = tn.add(tgt, attention(qk, qk, y, params, f"dec{i}.self", cfg.n_heads))
        y = _norm(tgt, params, f"dec{i}.ln2")
        tgt = tn.add(tgt, attention(tn.add(y, ref_pos), keys, encoded, params,
                                    f"dec{i}.cross", cfg.n_heads))
        y = _norm(tgt, params, f"dec{i}.ln3")
        tgt = tn.add(tgt, _feed_forward(y, params, f"dec{i}.ff"))
        outputs.append(_norm(tgt, params, "dec.norm"))
    return outputs


def predict_heads(embeddings: Tensor, refs: Tensor, params: ModelParams) -> LayerOutput:
    """Class logits and time logits (head output + reference logit)."""
    if embeddings.ndim == 2:
        embeddings = tn.reshape(embeddings, (1,) + embeddings.shape)
    B, Nq, D = embeddings.shape
    if refs.shape != (Nq,):
        raise ShapeError(f"predict_heads: refs {refs.shape} vs {Nq} queries")
    logits = _linear(embeddings, params["cls.w"], params["cls.b"])
    h = tn.relu(_linear(embeddings, params["time.w1"], params["time.b1"]))
    h = tn.relu(_linear(h, params["time.w2"], params["time.b2"]))
    t = tn.reshape(_linear(h, params["time.w3"], params["time.b3"]), (B, Nq))
    return LayerOutput(logits, tn.add(t, refs))


def forward(features, params: ModelParams) -> list[LayerOutput]:
    """One :class:`LayerOutput` per decoder layer; the last is the model output."""
    encoded = encode(features, params)
    refs = reference_times(params)
    return [predict_heads(h, refs, params) for h in decode(encoded, params, refs)]


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Binary blob of named row-major float64 arrays plus a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors)))
        for name, t in params.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    sidecar = {"format_version": CHECKPOINT_VERSION, "model": asdict(params.config)}
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    cfg = ModelConfig(**sidecar["model"])
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a dynspot checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", data, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    expected = _param_shapes(cfg)
    if set(tensors) != set(expected) or any(tensors[k].shape != expected[k][0] for k in expected):
        raise ValueError(f"{path}: parameters do not match the sidecar configuration")
    return ModelParams(cfg, {k: tensors[k] for k in expected})
