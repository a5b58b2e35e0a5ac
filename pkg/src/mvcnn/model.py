"""The multi-view CNN: layer plan, forward/backward passes, checkpoints.

Each conv stage is conv(3x3, valid) -> ReLU -> batch norm, optionally followed
by 2x2 max pooling. After the last stage come global average pooling,
dropout, and a dense layer with a softmax over classes. The default plan is

    conv 32, conv 32, pool, conv 64, conv 64, pool,
    conv 128, conv 128, pool, conv 256, pool, GAP, dense(K)

which takes a 256x256 input down to 13x13x256 before pooling to 256 features.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, CorruptCheckpointError, DimensionError, ShapeError
from .views import ViewCombination

PUBLISHED_PARAMETER_CLAIM = 726_000


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int = 3
    pool_after: bool = False


DEFAULT_PLAN: tuple[ConvSpec, ...] = (
    ConvSpec(32),
    ConvSpec(32, pool_after=True),
    ConvSpec(64),
    ConvSpec(64, pool_after=True),
    ConvSpec(128),
    ConvSpec(128, pool_after=True),
    ConvSpec(256, pool_after=True),
)


def parse_plan(text: str) -> tuple[ConvSpec, ...]:
    """Parse ``"32,32p,64,64p"``: one entry per conv, ``p`` = pool after it."""
    plan = []
    for tok in text.replace(" ", "").split(","):
        if not tok:
            continue
        pool = tok.endswith("p")
        try:
            filters = int(tok[:-1] if pool else tok)
        except ValueError:
            raise ConfigurationError(f"bad conv plan entry {tok!r}") from None
        if filters < 1:
            raise ConfigurationError(f"conv plan entry {tok!r} needs at least one filter")
        plan.append(ConvSpec(filters, pool_after=pool))
    if not plan:
        raise ConfigurationError("conv plan is empty")
    return tuple(plan)


def format_plan(plan: Sequence[ConvSpec]) -> str:
    return ",".join(f"{s.filters}{'p' if s.pool_after else ''}" for s in plan)


@dataclass
class ModelConfig:
    view_combination: ViewCombination = ViewCombination.RGB_GM
    input_size: tuple[int, int] = (256, 256)
    class_count: int = 38
    dropout_rate: float = 0.2
    conv_plan: tuple[ConvSpec, ...] = DEFAULT_PLAN

    def __post_init__(self):
        self.view_combination = ViewCombination.parse(self.view_combination)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.conv_plan = tuple(self.conv_plan)
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def in_channels(self) -> int:
        return self.view_combination.channel_count


@dataclass
class LayerSpec:
    name: str
    kind: str  # "conv" or "dense"
    pool_after: bool = False


@dataclass
class Model:
    config: ModelConfig
    layers: list[tuple[LayerSpec, T.LayerParams]]
    seed: int = 0

    @property
    def conv_layers(self) -> list[tuple[LayerSpec, T.LayerParams]]:
        return [(s, p) for s, p in self.layers if s.kind == "conv"]

    @property
    def dense(self) -> T.LayerParams:
        return self.layers[-1][1]

    def layer(self, name: str) -> tuple[LayerSpec, T.LayerParams]:
        for spec, params in self.layers:
            if spec.name == name:
                return spec, params
        names = ", ".join(s.name for s, _ in self.layers)
        raise ConfigurationError(f"no layer named {name!r}; layers are {names}")

    def copy(self) -> "Model":
        return Model(
            replace(self.config),
            [(replace(s), p.copy()) for s, p in self.layers],
            self.seed,
        )

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for _, p in m.layers:
            for name, arr in p.arrays().items():
                setattr(p, name, arr.astype(dtype))
        return m


def trace_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, int, int]]]:
    """(layer name, (c, h, w)) after every conv and pool for ``config.input_size``."""
    c = config.in_channels
    h, w = config.input_size
    trace = []
    pool_no = 0
    for i, spec in enumerate(config.conv_plan, start=1):
        name = f"conv{i}"
        if h < spec.kernel or w < spec.kernel:
            raise ConfigurationError(
                f"layer {name}: input {h}x{w} is smaller than its {spec.kernel}x{spec.kernel} kernel"
            )
        c, h, w = spec.filters, h - spec.kernel + 1, w - spec.kernel + 1
        trace.append((name, (c, h, w)))
        if spec.pool_after:
            pool_no += 1
            if h < 2 or w < 2:
                raise ConfigurationError(f"layer pool{pool_no}: input {h}x{w} is smaller than the 2x2 window")
            h, w = h // 2, w // 2
            trace.append((f"pool{pool_no}", (c, h, w)))
    return trace


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    # U(-1, 1) scaled by sqrt(2 / fan_in)
    limit = np.sqrt(2.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(T.DTYPE)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    trace_shapes(config)
    rng = np.random.default_rng(seed)
    layers = []
    c_in = config.in_channels
    for i, spec in enumerate(config.conv_plan, start=1):
        fan_in = c_in * spec.kernel * spec.kernel
        params = T.LayerParams(
            weights=_uniform(rng, (spec.filters, c_in, spec.kernel, spec.kernel), fan_in),
            bias=np.zeros(spec.filters, dtype=T.DTYPE),
            bn_gamma=np.ones(spec.filters, dtype=T.DTYPE),
            bn_beta=np.zeros(spec.filters, dtype=T.DTYPE),
            bn_running_mean=np.zeros(spec.filters, dtype=T.DTYPE),
            bn_running_var=np.ones(spec.filters, dtype=T.DTYPE),
        )
        layers.append((LayerSpec(f"conv{i}", "conv", spec.pool_after), params))
        c_in = spec.filters
    dense = T.LayerParams(
        weights=_uniform(rng, (config.class_count, c_in, 1, 1), c_in),
        bias=np.zeros(config.class_count, dtype=T.DTYPE),
    )
    layers.append((LayerSpec("dense", "dense"), dense))
    return Model(config, layers, seed)


# --- forward / backward ------------------------------------------------------


@dataclass
class ForwardCache:
    mode: str
    layer_inputs: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)  # post-ReLU conv outputs
    pools: dict = field(default_factory=dict)
    gap_input_shape: tuple = ()
    dropout_mask: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


def forward(model: Model, batch: np.ndarray, mode: str = "infer", seed: int = 0):
    """Run the network; returns ``(probabilities (n, K), ForwardCache)``.

    ``seed`` selects the dropout mask in train mode. Train mode also updates
    the batch-norm running statistics in place.
    """
    if batch.ndim != 4:
        raise DimensionError(f"batch must be rank-4 (n, c, h, w), got shape {batch.shape}")
    if batch.shape[1] != model.config.in_channels:
        raise DimensionError(
            f"channel axis mismatch: batch has {batch.shape[1]} channels, "
            f"model expects {model.config.in_channels}"
        )
    cache = ForwardCache(mode)
    x = batch
    for spec, params in model.layers[:-1]:
        cache.layer_inputs[spec.name] = x
        a = T.relu(T.conv2d_forward(x, params))
        cache.activations[spec.name] = a
        x = T.batchnorm_forward(a, params, mode)
        if spec.pool_after:
            x, cache.pools[spec.name] = T.maxpool2d(x)
    cache.gap_input_shape = x.shape
    feats = T.global_avg_pool(x)
    rate = model.config.dropout_rate
    if mode == "train" and rate > 0:
        cache.dropout_mask = T.dropout_mask(feats.shape, rate, seed, dtype=feats.dtype)
        feats = feats * cache.dropout_mask
    cache.features = feats
    logits = T.dense_forward(feats, model.dense)
    cache.logits = logits
    return T.softmax(logits), cache


def predict_logits(model: Model, batch: np.ndarray) -> np.ndarray:
    _, cache = forward(model, batch, "infer")
    return cache.logits


def backward(model: Model, cache: ForwardCache, d_logits: np.ndarray):
    """Backpropagate ``d_logits`` through a cached forward pass.

    Returns ``(grads, activation_grads)``: ``grads`` maps layer name to a dict
    of parameter gradients keyed like ``LayerParams`` fields;
    ``activation_grads`` maps conv layer name to d/d(post-ReLU activation).
    """
    grads: dict[str, dict[str, np.ndarray]] = {}
    act_grads: dict[str, np.ndarray] = {}
    dense_spec, dense = model.layers[-1]
    g = T.dense_backward(cache.features, dense, d_logits)
    grads[dense_spec.name] = {"weights": g.d_weights, "bias": g.d_bias}
    d = g.d_input
    if cache.dropout_mask is not None:
        d = d * cache.dropout_mask
    d = T.global_avg_pool_backward(d, cache.gap_input_shape)
    conv_layers = model.layers[:-1]
    for idx in range(len(conv_layers) - 1, -1, -1):
        spec, params = conv_layers[idx]
        if spec.pool_after:
            d = T.maxpool2d_backward(cache.pools[spec.name], d)
        a = cache.activations[spec.name]
        bn = T.batchnorm_backward(a, params, d, cache.mode)
        act_grads[spec.name] = bn.d_input
        dz = T.relu_backward(a, bn.d_input)
        cg = T.conv2d_backward(cache.layer_inputs[spec.name], params, dz, input_grad=idx > 0)
        grads[spec.name] = {
            "weights": cg.d_weights,
            "bias": cg.d_bias,
            "bn_gamma": bn.d_weights,
            "bn_beta": bn.d_bias,
        }
        d = cg.d_input
    return grads, act_grads


def count_parameters(model: Model) -> tuple[int, int]:
    """``(trainable, total)``; total adds the batch-norm running statistics."""
    trainable = total = 0
    for _, p in model.layers:
        n = p.weights.size + p.bias.size
        if p.has_bn:
            n += p.bn_gamma.size + p.bn_beta.size
            total += p.bn_running_mean.size + p.bn_running_var.size
        trainable += n
    return trainable, total + trainable


# --- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"MVCK"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sHHIH")
_LAYER = struct.Struct("<B4I")
_CRC = struct.Struct("<I")
KIND_CONV, KIND_CONV_POOL, KIND_DENSE = 1, 2, 3
_CONV_ARRAYS = ("weights", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")
_DENSE_ARRAYS = ("weights", "bias")


def save_checkpoint(model: Model, path: "str | Path") -> None:
    """Write the MVCK format.

    Header ``<4s magic, u16 version, u16 layer count, u32 classes, u16 channels>``;
    per layer a kind byte (1 conv, 2 conv followed by pool, 3 dense), the four
    u32 weight dimensions, then the float32 arrays in ``_CONV_ARRAYS`` /
    ``_DENSE_ARRAYS`` order; finally the CRC32 of the layer records.
    """
    cfg = model.config
    payload = bytearray()
    for spec, params in model.layers:
        if spec.kind == "dense":
            kind, names = KIND_DENSE, _DENSE_ARRAYS
        else:
            kind, names = (KIND_CONV_POOL if spec.pool_after else KIND_CONV), _CONV_ARRAYS
        payload += _LAYER.pack(kind, *params.weights.shape)
        for name in names:
            payload += np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes()
    header = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(model.layers), cfg.class_count, cfg.in_channels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + bytes(payload) + _CRC.pack(zlib.crc32(payload)))
    tmp.replace(path)


def load_checkpoint(
    path: "str | Path",
    expected_class_count: Optional[int] = None,
    input_size: tuple[int, int] = (256, 256),
    dropout_rate: float = 0.2,
) -> Model:
    """Read an MVCK file; raises ``CorruptCheckpointError`` on any damage."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptCheckpointError("truncated header", len(blob))
    magic, version, n_layers, classes, channels = _HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise CorruptCheckpointError(f"unsupported version {version}", 4)
    if len(blob) < _HEADER.size + _CRC.size:
        raise CorruptCheckpointError("missing payload", len(blob))
    payload_end = len(blob) - _CRC.size
    payload = blob[_HEADER.size : payload_end]
    (crc,) = _CRC.unpack_from(blob, payload_end)

    off = _HEADER.size
    layers = []
    plan = []
    c_in = channels
    for idx in range(n_layers):
        if off + _LAYER.size > payload_end:
            raise CorruptCheckpointError(f"layer {idx}: truncated shape record", off)
        kind, *shape = _LAYER.unpack_from(blob, off)
        rec_off = off
        off += _LAYER.size
        if kind not in (KIND_CONV, KIND_CONV_POOL, KIND_DENSE):
            raise CorruptCheckpointError(f"layer {idx}: unknown layer kind {kind}", rec_off)
        out_c, in_c, kh, kw = shape
        if in_c != c_in or min(shape) < 1 or (kind == KIND_DENSE and (kh, kw) != (1, 1)) or kh != kw:
            raise CorruptCheckpointError(f"layer {idx}: inconsistent shape table {tuple(shape)}", rec_off)
        names = _DENSE_ARRAYS if kind == KIND_DENSE else _CONV_ARRAYS
        arrays = {}
        for name in names:
            count = int(np.prod(shape)) if name == "weights" else out_c
            nbytes = 4 * count
            if off + nbytes > payload_end:
                raise CorruptCheckpointError(f"layer {idx}: truncated {name} array", off)
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(T.DTYPE)
            arrays[name] = arr.reshape(shape) if name == "weights" else arr
            off += nbytes
        if kind == KIND_DENSE:
            if idx != n_layers - 1:
                raise CorruptCheckpointError(f"layer {idx}: dense layer before the end", rec_off)
            if out_c != classes:
                raise CorruptCheckpointError(
                    f"dense layer has {out_c} outputs but header says {classes} classes", rec_off
                )
            layers.append((LayerSpec("dense", "dense"), T.LayerParams(**arrays)))
        else:
            if idx == n_layers - 1:
                raise CorruptCheckpointError("last layer is not dense", rec_off)
            name = f"conv{idx + 1}"
            layers.append((LayerSpec(name, "conv", kind == KIND_CONV_POOL), T.LayerParams(**arrays)))
            plan.append(ConvSpec(out_c, kh, kind == KIND_CONV_POOL))
        c_in = out_c
    if off != payload_end:
        raise CorruptCheckpointError("trailing bytes after the last layer", off)
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpointError("CRC32 mismatch", payload_end)
    if expected_class_count is not None and expected_class_count != classes:
        raise ShapeError(
            f"dense layer: checkpoint has {classes} outputs, expected {expected_class_count} classes"
        )
    config = ModelConfig(
        view_combination=ViewCombination.from_channels(channels),
        input_size=input_size,
        class_count=classes,
        dropout_rate=dropout_rate,
        conv_plan=tuple(plan),
    )
    return Model(config, layers)
