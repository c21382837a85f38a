"""Layers, modality towers and checkpoint serialization.

A modality tower is ``encoder -> projector -> predictor``.  The encoder and
projector also exist as an EMA target copy, which never sees the tape: its
outputs are wrapped in :func:`~slap.diffcore.stop_gradient`.
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from slap import diffcore as dc
from slap.errors import (
    BatchSizeError,
    CheckpointVersionError,
    CorruptCheckpointError,
    SpecError,
)

NORM_KINDS = ("batchnorm", "layernorm", "none")
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None
    norm_eps: float = 1e-5


class Linear:
    def __init__(self, in_dim, out_dim, rng=None):
        self.spec = LayerSpec("linear", in_dim, out_dim)
        if rng is None:
            w = np.zeros((in_dim, out_dim))
        else:
            # Kaiming-uniform: std = sqrt(2 / fan_in)
            bound = np.sqrt(6.0 / in_dim)
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.weight = dc.parameter(w)
        self.bias = dc.parameter(np.zeros(out_dim))

    def __call__(self, x, train_mode=True):
        return x @ self.weight + self.bias

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class ReLU:
    spec = LayerSpec("relu")

    def __call__(self, x, train_mode=True):
        return dc.relu(x)

    def params(self):
        return {}

    def buffers(self):
        return {}


class LayerNorm:
    def __init__(self, dim, eps=1e-5):
        self.spec = LayerSpec("layernorm", dim, dim, eps)
        self.gamma = dc.parameter(np.ones(dim))
        self.beta = dc.parameter(np.zeros(dim))

    def normalize(self, x):
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / dc.sqrt(var + self.spec.norm_eps)

    def __call__(self, x, train_mode=True):
        return self.normalize(x) * self.gamma + self.beta

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {}


class BatchNorm:
    """Batch normalization over the batch axis.

    Train mode normalizes with batch statistics and updates the running
    estimates; eval mode uses the running estimates.
    """

    def __init__(self, dim, eps=1e-5, momentum=BN_MOMENTUM):
        self.spec = LayerSpec("batchnorm", dim, dim, eps)
        self.momentum = momentum
        self.gamma = dc.parameter(np.ones(dim))
        self.beta = dc.parameter(np.zeros(dim))
        self.running_mean = dc.Tensor(np.zeros(dim))
        self.running_var = dc.Tensor(np.ones(dim))

    def normalize(self, x, train_mode=True):
        eps = self.spec.norm_eps
        if not train_mode:
            return (x - dc.stop_gradient(self.running_mean)) / np.sqrt(self.running_var.data + eps)
        n = x.shape[0]
        if n < 2:
            raise BatchSizeError("batchnorm in train mode needs a batch of at least 2 rows")
        mean = x.mean(axis=0, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=0, keepdims=True)
        m = self.momentum
        self.running_mean.data = (1 - m) * self.running_mean.data + m * mean.data[0]
        self.running_var.data = (1 - m) * self.running_var.data + m * var.data[0] * n / (n - 1)
        return centered / dc.sqrt(var + eps)

    def __call__(self, x, train_mode=True):
        return self.normalize(x, train_mode) * self.gamma + self.beta

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def _norm_layer(kind, dim):
    if kind == "batchnorm":
        return BatchNorm(dim)
    if kind == "layernorm":
        return LayerNorm(dim)
    return None


class MLP:
    def __init__(self, layers):
        self.layers = list(layers)
        _check_chain([l.spec for l in self.layers])

    def __call__(self, x, train_mode=True):
        for layer in self.layers:
            x = layer(x, train_mode)
        return x

    @property
    def specs(self):
        return [l.spec for l in self.layers]

    def params(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params().items()}

    def buffers(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.buffers().items()}


def _check_chain(specs):
    width = None
    for s in specs:
        if s.in_dim is None:
            continue
        if s.in_dim < 1 or s.out_dim < 1:
            raise SpecError(f"layer dims must be positive, got {s}")
        if width is not None and s.in_dim != width:
            raise SpecError(f"layer {s.kind} expects input {s.in_dim} but previous layer emits {width}")
        width = s.out_dim


@dataclass(frozen=True)
class TowerSpec:
    """Architecture of one modality tower.

    ``predictor_hidden = 0`` builds a tower without predictor (CLAP mode).
    """

    input_dim: int = 64
    encoder_hidden: tuple = (128,)
    embed_dim: int = 64
    proj_dim: int = 32
    predictor_hidden: int = 128
    norm_kind: str = "batchnorm"

    def validate(self):
        dims = [self.input_dim, *self.encoder_hidden, self.embed_dim, self.proj_dim]
        if any(int(d) < 1 for d in dims) or self.predictor_hidden < 0:
            raise SpecError(f"tower dims must be positive: {self}")
        if self.norm_kind not in NORM_KINDS:
            raise SpecError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")

    @property
    def has_predictor(self):
        return self.predictor_hidden > 0


def _build_encoder(spec, rng):
    # ReLU after every layer: encoder features are non-negative, like a backbone's
    dims = [spec.input_dim, *spec.encoder_hidden, spec.embed_dim]
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers += [Linear(a, b, rng), ReLU()]
    return MLP(layers)


def _build_predictor(spec, rng):
    layers = [Linear(spec.proj_dim, spec.predictor_hidden, rng)]
    norm = _norm_layer(spec.norm_kind, spec.predictor_hidden)
    if norm is not None:
        layers.append(norm)
    layers += [ReLU(), Linear(spec.predictor_hidden, spec.proj_dim, rng)]
    return MLP(layers)


class ModalityTower:
    """Context encoder/projector/predictor plus the EMA target encoder/projector."""

    def __init__(self, spec, encoder, projector, predictor):
        self.spec = spec
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor
        self.target_encoder = copy.deepcopy(encoder)
        self.target_projector = copy.deepcopy(projector)

    def _modules(self, target):
        if target:
            return {"encoder": self.target_encoder, "projector": self.target_projector}
        mods = {"encoder": self.encoder, "projector": self.projector}
        if self.predictor is not None:
            mods["predictor"] = self.predictor
        return mods

    def context_params(self):
        return {f"{m}.{k}": v for m, mod in self._modules(False).items() for k, v in mod.params().items()}

    def target_params(self):
        return {f"{m}.{k}": v for m, mod in self._modules(True).items() for k, v in mod.params().items()}

    def context_buffers(self):
        return {f"{m}.{k}": v for m, mod in self._modules(False).items() for k, v in mod.buffers().items()}

    def target_buffers(self):
        return {f"{m}.{k}": v for m, mod in self._modules(True).items() for k, v in mod.buffers().items()}

    def layer_specs(self, target=False):
        return {m: mod.specs for m, mod in self._modules(target).items()}

    def state(self):
        out = {}
        for prefix, group in (
            ("ctx", {**self.context_params(), **self.context_buffers()}),
            ("tgt", {**self.target_params(), **self.target_buffers()}),
        ):
            for k, v in group.items():
                out[f"{prefix}.{k}"] = v
        return out


def init_tower(spec, seed):
    """Build a tower with Kaiming-uniform weights and zero biases.

    The target encoder/projector start as exact copies of the context ones.
    """
    spec.validate()
    rng = dc.make_rng(seed)
    encoder = _build_encoder(spec, rng)
    projector = MLP([Linear(spec.embed_dim, spec.proj_dim, rng)])
    predictor = _build_predictor(spec, rng) if spec.has_predictor else None
    return ModalityTower(spec, encoder, projector, predictor)


def forward_tower(tower, x, use_target=False, train_mode=True):
    """Return ``(z, q)`` for the context branch or ``(z_bar, None)`` for the target.

    Target outputs are computed off-tape and carry no gradient.
    """
    x = dc.as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise BatchSizeError(f"expected a [B x d] batch with B >= 1, got shape {x.shape}")
    if use_target:
        with dc.no_grad():
            z = tower.target_projector(tower.target_encoder(x, train_mode), train_mode)
        return dc.stop_gradient(z), None
    z = tower.projector(tower.encoder(x, train_mode), train_mode)
    q = tower.predictor(z, train_mode) if tower.predictor is not None else None
    return z, q


@dataclass
class JointModel:
    """Both modality towers plus the contrastive temperature (CLAP mode only).

    ``log_temperature`` is stored as ``log(T)`` so that ``T > 0`` always.
    """

    mode: str
    tower_a: ModalityTower
    tower_t: ModalityTower
    log_temperature: dc.Tensor | None = None
    meta: dict = field(default_factory=dict)

    def trainable(self):
        params = {f"a.{k}": v for k, v in self.tower_a.context_params().items()}
        params.update({f"t.{k}": v for k, v in self.tower_t.context_params().items()})
        if self.log_temperature is not None:
            params["log_temperature"] = self.log_temperature
        return params

    def target_params(self):
        out = {f"a.{k}": v for k, v in self.tower_a.target_params().items()}
        out.update({f"t.{k}": v for k, v in self.tower_t.target_params().items()})
        return out

    def state(self):
        """Ordered ``name -> Tensor`` map of every persisted array."""
        out = {f"a.{k}": v for k, v in self.tower_a.state().items()}
        out.update({f"t.{k}": v for k, v in self.tower_t.state().items()})
        if self.log_temperature is not None:
            out["log_temperature"] = self.log_temperature
        return out

    def arrays(self):
        return {k: v.data for k, v in self.state().items()}

    def load_arrays(self, arrays):
        state = self.state()
        if set(state) != set(arrays):
            missing = sorted(set(state) - set(arrays))
            extra = sorted(set(arrays) - set(state))
            raise CorruptCheckpointError(f"state mismatch: missing={missing[:3]} extra={extra[:3]}")
        for k, t in state.items():
            arr = np.asarray(arrays[k])
            if arr.shape != t.shape:
                raise CorruptCheckpointError(f"{k}: shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def architecture(self):
        return {
            "mode": self.mode,
            "tower_a": _spec_dict(self.tower_a.spec),
            "tower_t": _spec_dict(self.tower_t.spec),
        }


def _spec_dict(spec):
    d = asdict(spec)
    d["encoder_hidden"] = list(spec.encoder_hidden)
    return d


def _spec_from_dict(d):
    d = dict(d)
    d["encoder_hidden"] = tuple(d["encoder_hidden"])
    return TowerSpec(**d)


INIT_TEMPERATURE = 0.07


def build_model(mode, spec_a, spec_t, seed):
    """Initialize a SLAP (with predictors) or CLAP (with temperature) model."""
    if mode not in ("slap", "clap"):
        raise SpecError(f"mode must be 'slap' or 'clap', got {mode!r}")
    if mode == "clap":
        spec_a = TowerSpec(**{**asdict(spec_a), "predictor_hidden": 0})
        spec_t = TowerSpec(**{**asdict(spec_t), "predictor_hidden": 0})
    elif not (spec_a.has_predictor and spec_t.has_predictor):
        raise SpecError("slap mode requires a predictor in both towers")
    if spec_a.proj_dim != spec_t.proj_dim:
        raise SpecError(f"modalities must share proj_dim, got {spec_a.proj_dim} and {spec_t.proj_dim}")
    tower_a = init_tower(spec_a, dc.make_rng(seed, 0).integers(2**63))
    tower_t = init_tower(spec_t, dc.make_rng(seed, 1).integers(2**63))
    log_t = dc.parameter(np.log(INIT_TEMPERATURE)) if mode == "clap" else None
    return JointModel(mode, tower_a, tower_t, log_t)


# -- checkpoint format -----------------------------------------------------------

MAGIC = b"SMMCKPT1"
FORMAT_VERSION = 1
_DTYPE_TAGS = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(params, path, meta=None):
    """Write ``{name: array}`` to ``path``.

    Layout: magic, u32 version, u32 header length, JSON header (dtype tag,
    named shapes, meta), little-endian payload in header order, u32 CRC-32
    of the payload.
    """
    arrays = {k: np.asarray(v.data if isinstance(v, dc.Tensor) else v) for k, v in params.items()}
    dtypes = {a.dtype.name for a in arrays.values()}
    if len(dtypes) > 1:
        raise SpecError(f"mixed dtypes in checkpoint: {sorted(dtypes)}")
    dtype = dtypes.pop() if dtypes else "float64"
    if dtype not in _DTYPE_TAGS:
        raise SpecError(f"unsupported checkpoint dtype {dtype}")
    header = {
        "dtype": dtype,
        "tensors": [[k, list(a.shape)] for k, a in arrays.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype=_DTYPE_TAGS[dtype]).tobytes() for a in arrays.values())
    blob = b"".join([
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(header_bytes)),
        header_bytes,
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])
    Path(path).write_bytes(blob)
    return zlib.crc32(blob)


def read_checkpoint(path):
    """Return ``(arrays, meta)``; raises on any corruption or unknown version."""
    blob = Path(path).read_bytes()
    fixed = len(MAGIC) + 8
    if len(blob) < fixed + 4:
        raise CorruptCheckpointError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    version, header_len = struct.unpack("<II", blob[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    if fixed + header_len + 4 > len(blob):
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed:fixed + header_len])
        dtype = header["dtype"]
        tensors = [(str(name), tuple(int(n) for n in shape)) for name, shape in header["tensors"]]
        tag = _DTYPE_TAGS[dtype]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    itemsize = np.dtype(tag).itemsize
    expected = sum(int(np.prod(s)) for _, s in tensors) * itemsize
    payload = blob[fixed + header_len:-4]
    if len(payload) != expected:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes but header shapes need {expected}"
        )
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    arrays, offset = {}, 0
    for name, shape in tensors:
        n = int(np.prod(shape)) * itemsize
        arrays[name] = np.frombuffer(payload, dtype=tag, count=n // itemsize, offset=offset).reshape(shape).astype(dtype)
        offset += n
    return arrays, header.get("meta", {})


def load_checkpoint(path):
    return read_checkpoint(path)[0]


def save_model(model, path, extra_meta=None):
    meta = {"architecture": model.architecture(), **(extra_meta or {})}
    return save_checkpoint(model.arrays(), path, meta=meta)


def load_model(path):
    """Rebuild a :class:`JointModel` from a checkpoint written by :func:`save_model`."""
    arrays, meta = read_checkpoint(path)
    try:
        arch = meta["architecture"]
        spec_a = _spec_from_dict(arch["tower_a"])
        spec_t = _spec_from_dict(arch["tower_t"])
        mode = arch["mode"]
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: missing architecture metadata ({exc})") from None
    dtype = next(iter(arrays.values())).dtype.name if arrays else "float64"
    with dc.default_dtype(dtype):
        if mode == "clap":
            model = JointModel(mode, init_tower(spec_a, 0), init_tower(spec_t, 0), dc.parameter(0.0))
        else:
            model = build_model(mode, spec_a, spec_t, 0)
    model.load_arrays(arrays)
    model.meta = {k: v for k, v in meta.items() if k != "architecture"}
    return model
