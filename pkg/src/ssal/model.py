"""Dual-branch learner: a gradient-trained query side and its momentum key side.

Query side: encoder -> projector -> predictor (contrastive embedding) and
encoder -> classifier (task logits). Key side: encoder -> projector, updated
only through :func:`ema_update`.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .numcore import (
    BatchNormState,
    DimensionError,
    Tensor,
    batchnorm,
    conv2d,
    global_avg_pool,
    l2_normalize,
    linear,
    no_grad,
    relu,
)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 4
    widths: tuple = (32, 64, 64)
    proj_dim: int = 64
    use_predictor: bool = True
    use_projector: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError("widths must be three positive channel counts")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if self.num_classes < 2 or self.proj_dim < 1:
            raise ValueError("need at least 2 classes and a positive projection size")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype)


class Encoder:
    """Three conv3x3/batchnorm/relu blocks (second one strided) and global average pooling."""

    strides = (1, 2, 1)

    def __init__(self, in_channels: int, widths: tuple, rng: np.random.Generator, dtype):
        self.weights = []
        self.gammas = []
        self.betas = []
        self.bn = []
        c = in_channels
        for f in widths:
            std = np.sqrt(2.0 / (9 * c))
            self.weights.append(_param((rng.standard_normal((f, c, 3, 3)) * std).astype(dtype)))
            self.gammas.append(_param(np.ones(f, dtype=dtype)))
            self.betas.append(_param(np.zeros(f, dtype=dtype)))
            self.bn.append(BatchNormState.create(f, dtype))
            c = f
        self.in_channels = in_channels

    def __call__(self, x: Tensor, train: bool, track: bool = True) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"encoder expects N×{self.in_channels}×H×W images, got {x.shape}")
        h = x
        for w, g, b, st, s in zip(self.weights, self.gammas, self.betas, self.bn, self.strides):
            h = relu(batchnorm(conv2d(h, w, stride=s), g, b, st, train=train, track=track))
        return global_avg_pool(h)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, g, b) in enumerate(zip(self.weights, self.gammas, self.betas)):
            yield f"conv{i}.weight", w
            yield f"bn{i}.gamma", g
            yield f"bn{i}.beta", b

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, st in enumerate(self.bn):
            yield f"bn{i}.running_mean", st.running_mean
            yield f"bn{i}.running_var", st.running_var


class DenseBlock:
    """Affine layer, optionally followed by batchnorm and relu.

    ``plain=True`` gives the bare affine resize used when an ablated block
    has to bridge mismatched widths.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype, plain: bool = False):
        std = np.sqrt(2.0 / d_in)
        self.weight = _param((rng.standard_normal((d_in, d_out)) * std).astype(dtype))
        self.bias = _param(np.zeros(d_out, dtype=dtype))
        self.plain = plain
        if not plain:
            self.gamma = _param(np.ones(d_out, dtype=dtype))
            self.beta = _param(np.zeros(d_out, dtype=dtype))
            self.bn = BatchNormState.create(d_out, dtype)

    def __call__(self, x: Tensor, train: bool, track: bool = True) -> Tensor:
        h = linear(x, self.weight, self.bias)
        if self.plain:
            return h
        return relu(batchnorm(h, self.gamma, self.beta, self.bn, train=train, track=track))

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias
        if not self.plain:
            yield "gamma", self.gamma
            yield "beta", self.beta

    def named_buffers(self):
        if not self.plain:
            yield "running_mean", self.bn.running_mean
            yield "running_var", self.bn.running_var


class Classifier:
    def __init__(self, d_in: int, num_classes: int, rng: np.random.Generator, dtype):
        std = np.sqrt(1.0 / d_in)
        self.weight = _param((rng.standard_normal((d_in, num_classes)) * std).astype(dtype))
        self.bias = _param(np.zeros(num_classes, dtype=dtype))

    def __call__(self, features: Tensor) -> Tensor:
        return linear(features, self.weight, self.bias)

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def named_buffers(self):
        return iter(())


def _resize_block(d_in: int, d_out: int, rng, dtype) -> Optional[DenseBlock]:
    """Stand-in for an ablated block: identity on equal widths, else a plain affine map."""
    return None if d_in == d_out else DenseBlock(d_in, d_out, rng, dtype, plain=True)


class DualModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        d_f, d_p = config.feature_dim, config.proj_dim

        self.query_encoder = Encoder(config.in_channels, config.widths, rng, dtype)
        if config.use_projector:
            self.query_projector = DenseBlock(d_f, d_p, rng, dtype)
        else:
            self.query_projector = _resize_block(d_f, d_p, rng, dtype)
        self.predictor = DenseBlock(d_p, d_p, rng, dtype) if config.use_predictor else None
        self.classifier = Classifier(d_f, config.num_classes, rng, dtype)

        self.key_encoder = copy.deepcopy(self.query_encoder)
        self.key_projector = copy.deepcopy(self.query_projector)
        for _, p in self._key_named_parameters():
            p.requires_grad = False

    # ------------------------------------------------------------ parameter views

    def _query_modules(self):
        yield "query.encoder", self.query_encoder
        if self.query_projector is not None:
            yield "query.projector", self.query_projector
        if self.predictor is not None:
            yield "query.predictor", self.predictor
        yield "query.classifier", self.classifier

    def _key_modules(self):
        yield "key.encoder", self.key_encoder
        if self.key_projector is not None:
            yield "key.projector", self.key_projector

    def _key_named_parameters(self):
        for prefix, mod in self._key_modules():
            for name, p in mod.named_parameters():
                yield f"{prefix}.{name}", p

    def parameters(self) -> list[Tensor]:
        """Trainable (query side) parameters, in a fixed order."""
        return [p for _, mod in self._query_modules() for _, p in mod.named_parameters()]

    def encoder_classifier_parameters(self) -> list[Tensor]:
        return [p for _, p in self.query_encoder.named_parameters()] + [
            p for _, p in self.classifier.named_parameters()
        ]

    def key_parameters(self) -> list[Tensor]:
        return [p for _, p in self._key_named_parameters()]

    def paired(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """(query array, key array) pairs: encoder and projector parameters and
        batchnorm running statistics."""
        pairs = [(self.query_encoder, self.key_encoder)]
        if self.query_projector is not None:
            pairs.append((self.query_projector, self.key_projector))
        for q, k in pairs:
            for (_, pq), (_, pk) in zip(q.named_parameters(), k.named_parameters()):
                yield pq.data, pk.data
            for (_, bq), (_, bk) in zip(q.named_buffers(), k.named_buffers()):
                yield bq, bk

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter and buffer, query side first, in checkpoint order."""
        items = []
        for prefix, mod in list(self._query_modules()) + list(self._key_modules()):
            for name, p in mod.named_parameters():
                items.append((f"{prefix}.{name}", p.data))
            for name, b in mod.named_buffers():
                items.append((f"{prefix}.{name}", b))
        return items

    def clone(self) -> "DualModel":
        return copy.deepcopy(self)

    # ------------------------------------------------------------ forward passes

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.config.dtype))

    def query_forward(self, x, train: bool = True, track: bool = True) -> tuple[Tensor, Tensor]:
        """(features, unit embedding) from one pass through the query side."""
        feats = self.query_encoder(self._as_input(x), train=train, track=track)
        h = feats
        if self.query_projector is not None:
            h = self.query_projector(h, train=train, track=track)
        if self.predictor is not None:
            h = self.predictor(h, train=train, track=track)
        return feats, l2_normalize(h)

    def key_forward(self, x, train: bool = True) -> np.ndarray:
        """Unit key embeddings, never recorded. Train mode normalizes with batch
        statistics but leaves the key running statistics to :func:`ema_update`."""
        with no_grad():
            h = self.key_encoder(self._as_input(x), train=train, track=False)
            if self.key_projector is not None:
                h = self.key_projector(h, train=train, track=False)
            return l2_normalize(h).data

    def classify(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise DimensionError(f"classifier expects N×{self.config.feature_dim} features, got {features.shape}")
        return self.classifier(features)


def forward_features(model: DualModel, x, train: bool = True) -> Tensor:
    return model.query_encoder(model._as_input(x), train=train)


def forward_query_embedding(model: DualModel, x, train: bool = True) -> Tensor:
    return model.query_forward(x, train=train)[1]


def forward_key_embedding(model: DualModel, x, train: bool = True) -> np.ndarray:
    return model.key_forward(x, train=train)


def classify(model: DualModel, features: Tensor) -> Tensor:
    return model.classify(features)


def ema_update(model: DualModel, m: float) -> None:
    """key <- m*key + (1-m)*query for every paired parameter and running statistic."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if m == 1.0:
        return
    for q, k in model.paired():
        if m == 0.0:
            k[...] = q
        else:
            k *= k.dtype.type(m)
            k += k.dtype.type(1.0 - m) * q


def momentum_at(step: int, total_steps: int, start: float = 0.99, end: float = 1.0) -> float:
    """Linear ramp from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError("need 0 <= step <= total_steps and total_steps >= 1")
    return start + (end - start) * (step / total_steps)


# ------------------------------------------------------------ checkpoint file
#
# Layout (all integers little-endian):
#   magic   8 bytes  b"SSALCKP1"
#   u32     length of the JSON model-config block, then that many UTF-8 bytes
#   u32     number of entries
#   entry:  u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
#           prod(dims) x float32 (little-endian)

CHECKPOINT_MAGIC = b"SSALCKP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: DualModel, path) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg)), cfg]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> DualModel:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = json.loads(take(cfg_len))
    cfg["widths"] = tuple(cfg["widths"])
    model = DualModel(ModelConfig(**cfg))
    targets = dict(model.state())
    (count,) = struct.unpack("<I", take(4))
    if count != len(targets):
        raise CheckpointError(f"checkpoint has {count} entries, model expects {len(targets)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        if name not in targets or targets[name].shape != tuple(shape):
            raise CheckpointError(f"unexpected entry {name} {shape}")
        targets[name][...] = data
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last entry")
    return model
