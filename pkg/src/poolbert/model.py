"""BERT-style encoder with interchangeable classification heads.

The classifier heads differ only in how the final hidden states are pooled:
``cls`` feeds the [CLS] state (H features) to the output layer, ``rupool``
concatenates the [CLS] state with masked elementwise max and mean pooling
over all non-pad positions (3H features).  An ``mlm`` head predicts original
token ids at selected positions for pretraining.

Weight convention: internal dense layers store [in, out] matrices applied as
``x @ w + b``; the classifier and MLM projection store [classes, in] and are
applied as ``x @ w.T + b`` so their first dimension is the label count.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import tensor as T
from .errors import DataError, FormatError, ParameterError, ShapeError
from .tensor import Tape, Tensor
from .tokenizer import Encoding

LN_EPS = 1e-5
ATTENTION_MASK_BIAS = -1e9
INIT_STD = 0.02

HEAD_KINDS = ("cls", "rupool", "mlm")

CHECKPOINT_MAGIC = b"PBRT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ff_size: int = 256
    vocab_size: int = 2000
    max_positions: int = 64
    num_segments: int = 2
    dropout_rate: float = 0.1
    num_classes: int = 8
    head_kind: str = "cls"

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ParameterError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.head_kind not in HEAD_KINDS:
            raise ParameterError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head_kind != "mlm" and self.num_classes < 2:
            raise ParameterError("classifier heads need num_classes >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout_rate must be in [0, 1)")

    @property
    def pooled_size(self) -> int:
        return 3 * self.hidden_size if self.head_kind == "rupool" \
            else self.hidden_size

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"config line {lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            if key == "head_kind":
                kwargs[key] = value
            elif key == "dropout_rate":
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def paper_scale_config(num_classes: int = 265, head_kind: str = "rupool") \
        -> ModelConfig:
    """Full-scale configuration: 12 layers, H=768, 12 heads, 128 positions."""
    return ModelConfig(
        num_layers=12, hidden_size=768, num_heads=12, ff_size=3072,
        vocab_size=40000, max_positions=128, num_segments=2,
        dropout_rate=0.1, num_classes=num_classes, head_kind=head_kind,
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden_size, config.ff_size
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (config.vocab_size, h),
        "embeddings.segment": (config.num_segments, h),
        "embeddings.position": (config.max_positions, h),
        "embeddings.norm.gamma": (h,),
        "embeddings.norm.beta": (h,),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.{name}.w"] = (h, h)
            shapes[p + f"attn.{name}.b"] = (h,)
        shapes[p + "attn.norm.gamma"] = (h,)
        shapes[p + "attn.norm.beta"] = (h,)
        shapes[p + "ff.in.w"] = (h, f)
        shapes[p + "ff.in.b"] = (f,)
        shapes[p + "ff.out.w"] = (f, h)
        shapes[p + "ff.out.b"] = (h,)
        shapes[p + "ff.norm.gamma"] = (h,)
        shapes[p + "ff.norm.beta"] = (h,)
    if config.head_kind == "mlm":
        shapes["mlm.dense.w"] = (h, h)
        shapes["mlm.dense.b"] = (h,)
        shapes["mlm.norm.gamma"] = (h,)
        shapes["mlm.norm.beta"] = (h,)
        shapes["mlm.proj.w"] = (config.vocab_size, h)
        shapes["mlm.proj.b"] = (config.vocab_size,)
    else:
        shapes["classifier.w"] = (config.num_classes, config.pooled_size)
        shapes["classifier.b"] = (config.num_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters: normal(0, 0.02) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            init = np.ones(shape, dtype=np.float32)
        elif leaf in ("b", "beta"):
            init = np.zeros(shape, dtype=np.float32)
        else:
            init = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        params[name] = Tensor(init, requires_grad=True, name=name)
    return params


def encoder_param_names(config: ModelConfig) -> list[str]:
    """Parameters shared between heads (embeddings + transformer blocks)."""
    return [n for n in param_shapes(config)
            if not n.startswith(("classifier.", "mlm."))]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def batch_arrays(encodings: list[Encoding]) -> tuple[np.ndarray, np.ndarray,
                                                     np.ndarray]:
    """Stack encodings into (ids, attention_mask, segment_ids) arrays."""
    ids = np.array([e.ids for e in encodings], dtype=np.int64)
    mask = np.array([e.attention_mask for e in encodings], dtype=np.int64)
    segs = np.array([e.segment_ids for e in encodings], dtype=np.int64)
    return ids, mask, segs


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def embed_sum(
    params: dict[str, Tensor],
    ids: np.ndarray,
    segment_ids: np.ndarray,
    config: ModelConfig,
    tape: Tape | None = None,
) -> Tensor:
    """token + segment + position embedding sum, before norm and dropout."""
    ids = np.asarray(ids)
    segment_ids = np.asarray(segment_ids)
    n = ids.shape[1]
    if n > config.max_positions:
        raise DataError(
            f"sequence length {n} exceeds max_positions {config.max_positions}"
        )
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise DataError("token id out of range for the embedding table")
    if segment_ids.min() < 0 or segment_ids.max() >= config.num_segments:
        raise DataError("segment id out of range")
    tok = T.gather_rows(params["embeddings.token"], ids, tape)
    seg = T.gather_rows(params["embeddings.segment"], segment_ids, tape)
    pos = T.slice_rows(params["embeddings.position"], n, tape)
    return T.add(T.add(tok, seg, tape), pos, tape)


def embed(
    params: dict[str, Tensor],
    ids: np.ndarray,
    segment_ids: np.ndarray,
    config: ModelConfig,
    tape: Tape | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    x = embed_sum(params, ids, segment_ids, config, tape)
    x = T.layer_norm(x, params["embeddings.norm.gamma"],
                     params["embeddings.norm.beta"], LN_EPS, tape)
    return T.dropout(x, config.dropout_rate, training, rng, tape)


def _split_heads(x: Tensor, num_heads: int, tape: Tape | None) -> Tensor:
    b, n, h = x.shape
    dh = h // num_heads
    return T.transpose(T.reshape(x, (b, n, num_heads, dh), tape),
                       (0, 2, 1, 3), tape)


def _merge_heads(x: Tensor, tape: Tape | None) -> Tensor:
    b, nh, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3), tape), (b, n, nh * dh), tape)


def mask_bias(attention_mask: np.ndarray) -> np.ndarray:
    """Additive [B,1,1,N] bias: ~-1e9 on pad key positions, 0 elsewhere."""
    m = np.asarray(attention_mask, dtype=np.float32)
    return ((1.0 - m) * ATTENTION_MASK_BIAS)[:, None, None, :]


def encode_sequence(
    params: dict[str, Tensor],
    embeddings: Tensor,
    attention_mask: np.ndarray,
    config: ModelConfig,
    tape: Tape | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the transformer block stack over embedded inputs.

    Each block is multi-head self-attention -> add&norm -> GELU feed-forward
    -> add&norm; pad key positions are masked out of every attention softmax.
    """
    x = embeddings
    bias = mask_bias(attention_mask)
    scale = 1.0 / math.sqrt(config.hidden_size // config.num_heads)
    rate = config.dropout_rate
    for i in range(config.num_layers):
        p = f"layer{i}."
        q = _split_heads(T.linear(x, params[p + "attn.q.w"],
                                  params[p + "attn.q.b"], tape),
                         config.num_heads, tape)
        k = _split_heads(T.linear(x, params[p + "attn.k.w"],
                                  params[p + "attn.k.b"], tape),
                         config.num_heads, tape)
        v = _split_heads(T.linear(x, params[p + "attn.v.w"],
                                  params[p + "attn.v.b"], tape),
                         config.num_heads, tape)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2), tape), tape),
                         scale, tape)
        probs = T.softmax(T.add_constant(scores, bias, tape), -1, tape)
        probs = T.dropout(probs, rate, training, rng, tape)
        ctx = _merge_heads(T.matmul(probs, v, tape), tape)
        attn_out = T.linear(ctx, params[p + "attn.o.w"],
                            params[p + "attn.o.b"], tape)
        attn_out = T.dropout(attn_out, rate, training, rng, tape)
        x = T.layer_norm(T.add(x, attn_out, tape),
                         params[p + "attn.norm.gamma"],
                         params[p + "attn.norm.beta"], LN_EPS, tape)
        inner = T.gelu(T.linear(x, params[p + "ff.in.w"],
                                params[p + "ff.in.b"], tape), tape)
        ff_out = T.linear(inner, params[p + "ff.out.w"],
                          params[p + "ff.out.b"], tape)
        ff_out = T.dropout(ff_out, rate, training, rng, tape)
        x = T.layer_norm(T.add(x, ff_out, tape),
                         params[p + "ff.norm.gamma"],
                         params[p + "ff.norm.beta"], LN_EPS, tape)
    return x


def attention_probabilities(
    params: dict[str, Tensor],
    layer: int,
    x: Tensor,
    attention_mask: np.ndarray,
    config: ModelConfig,
) -> np.ndarray:
    """Eval-mode attention weights of one layer given its input states.

    Inspection helper: returns the [B, heads, N, N] softmax weights."""
    p = f"layer{layer}."
    q = _split_heads(T.linear(x, params[p + "attn.q.w"],
                              params[p + "attn.q.b"]), config.num_heads, None)
    k = _split_heads(T.linear(x, params[p + "attn.k.w"],
                              params[p + "attn.k.b"]), config.num_heads, None)
    scale = 1.0 / math.sqrt(config.hidden_size // config.num_heads)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    return T.softmax(T.add_constant(scores, mask_bias(attention_mask)), -1).data


def pool_cls(hidden: Tensor, tape: Tape | None = None) -> Tensor:
    """The [CLS] state: hidden[:, 0, :]."""
    return T.select_index(hidden, 1, 0, tape)


def pool_rupool(
    hidden: Tensor, attention_mask: np.ndarray, tape: Tape | None = None
) -> Tensor:
    """[CLS] state ++ masked max ++ masked mean over non-pad positions.

    Pooling covers every non-pad position including [CLS] and [SEP], so the
    result is independent of how far the batch is padded."""
    parts = [
        pool_cls(hidden, tape),
        T.masked_max(hidden, attention_mask, tape),
        T.masked_mean(hidden, attention_mask, tape),
    ]
    return T.concat(parts, axis=-1, tape=tape)


def classify(
    pooled: Tensor,
    w: Tensor,
    b: Tensor,
    tape: Tape | None = None,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """logits = dropout(pooled) @ w.T + b for a [classes, features] weight."""
    if w.shape[1] != pooled.shape[-1]:
        raise ShapeError(
            f"classifier expects {w.shape[1]} features, pooled vector has "
            f"{pooled.shape[-1]}"
        )
    pooled = T.dropout(pooled, dropout_rate, training, rng, tape)
    return T.add(T.matmul(pooled, T.transpose(w, (1, 0), tape), tape), b, tape)


def mlm_logits(
    hidden: Tensor,
    batch_idx: np.ndarray,
    pos_idx: np.ndarray,
    params: dict[str, Tensor],
    tape: Tape | None = None,
) -> Tensor:
    """Vocabulary logits at selected (batch, position) pairs: [P, V].

    Positions must point at non-pad tokens (enforced upstream by the batch
    masker)."""
    g = T.gather_positions(hidden, batch_idx, pos_idx, tape)
    t = T.gelu(T.linear(g, params["mlm.dense.w"], params["mlm.dense.b"], tape),
               tape)
    t = T.layer_norm(t, params["mlm.norm.gamma"], params["mlm.norm.beta"],
                     LN_EPS, tape)
    return T.add(
        T.matmul(t, T.transpose(params["mlm.proj.w"], (1, 0), tape), tape),
        params["mlm.proj.b"], tape,
    )


def forward_classifier(
    params: dict[str, Tensor],
    config: ModelConfig,
    ids: np.ndarray,
    attention_mask: np.ndarray,
    segment_ids: np.ndarray,
    tape: Tape | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Full text-classification forward pass to [B, K] logits."""
    if config.head_kind not in ("cls", "rupool"):
        raise ParameterError("forward_classifier needs a cls or rupool head")
    x = embed(params, ids, segment_ids, config, tape, training, rng)
    hidden = encode_sequence(params, x, attention_mask, config, tape,
                             training, rng)
    if config.head_kind == "rupool":
        pooled = pool_rupool(hidden, attention_mask, tape)
    else:
        pooled = pool_cls(hidden, tape)
    return classify(pooled, params["classifier.w"], params["classifier.b"],
                    tape, config.dropout_rate, training, rng)


def forward_mlm(
    params: dict[str, Tensor],
    config: ModelConfig,
    ids: np.ndarray,
    attention_mask: np.ndarray,
    segment_ids: np.ndarray,
    batch_idx: np.ndarray,
    pos_idx: np.ndarray,
    tape: Tape | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Masked-token prediction forward pass to [P, V] logits."""
    if config.head_kind != "mlm":
        raise ParameterError("forward_mlm needs an mlm head")
    x = embed(params, ids, segment_ids, config, tape, training, rng)
    hidden = encode_sequence(params, x, attention_mask, config, tape,
                             training, rng)
    return mlm_logits(hidden, batch_idx, pos_idx, params, tape)


def softmax_probabilities(logits: Tensor) -> np.ndarray:
    """Reporting-mode class probabilities (rows sum to 1)."""
    return T.softmax(logits, axis=-1).data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: dict[str, Tensor], config: ModelConfig,
                    path) -> None:
    """Binary format: magic, u32 version, length-prefixed key=value config,
    then per-tensor (name, rank, dims, little-endian float32 payload)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", tensor.data.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path, expected_config: ModelConfig | None = None) \
        -> tuple[dict[str, Tensor], ModelConfig]:
    """Load (params, config); optionally validate against an expected config.

    Raises FormatError on any structural problem and never returns partial
    state."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError("not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = ModelConfig.from_text(
            _read_exact(fh, cfg_len, "config").decode("utf-8")
        )
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            if name in params:
                raise FormatError(f"duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, "dims")
            )
            size = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 4 * size, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor")

    shapes = param_shapes(config)
    if set(shapes) != set(params):
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        raise FormatError(
            f"checkpoint tensors do not match config: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise FormatError(
                f"tensor {name!r} has shape {params[name].shape}, "
                f"config implies {shape}"
            )
    if expected_config is not None:
        want = param_shapes(expected_config)
        for name, shape in want.items():
            if name not in params or params[name].shape != shape:
                raise FormatError(
                    f"checkpoint incompatible with expected config at {name!r}: "
                    f"want {shape}, have "
                    f"{params[name].shape if name in params else 'nothing'}"
                )
    return params, config
