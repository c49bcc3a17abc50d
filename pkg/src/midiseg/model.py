"""Compact CNN boundary classifier: forward/backward, AdamW, training, ensembles."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .evaluation import per_measure_eval
from .nn import Conv2d, Dense, GlobalAvgPool, MaxPool2d, ReLU

log = logging.getLogger(__name__)

EPS_PROB = 1e-7
CHECKPOINT_MAGIC = b"MIDISEG1"


class ShapeMismatch(ValueError):
    pass


class DegenerateDataset(ValueError):
    pass


class EmptyEnsemble(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ModelConfig:
    # strided stem: a full-resolution first block costs ~4x more per epoch
    conv: tuple[ConvSpec, ...] = (ConvSpec(16, stride=2), ConvSpec(32), ConvSpec(64), ConvSpec(64))
    pool: tuple[int, ...] = (2, 2, 2, 2)
    hidden: int = 64
    input_shape: tuple[int, int, int] = (3, 128, 512)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.pool) != len(self.conv):
            raise ValueError("need one pool size per conv block (use 1 for none)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv"] = tuple(ConvSpec(c["out_channels"], tuple(c["kernel"]), c["stride"], c["padding"])
                          for c in d.get("conv", []))
        d["pool"] = tuple(d.get("pool", ()))
        d["input_shape"] = tuple(d.get("input_shape", (3, 128, 512)))
        return cls(**d)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 5
    positive_duplication: int = 2
    threshold: float = 0.5
    seed: int = 0
    # a perfect validation F1 cannot improve, so waiting out the patience
    # window would return the very same parameters
    stop_at_perfect: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "positive_duplication"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def bce_loss(prob, label):
    p = np.clip(np.asarray(prob, dtype=np.float64), EPS_PROB, 1 - EPS_PROB)
    y = np.asarray(label, dtype=np.float64)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


class BoundaryNet:
    """Conv blocks (conv, ReLU, max-pool), global average pool, dense, dense -> logit."""

    def __init__(self, config: ModelConfig = ModelConfig(), params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.layers = []
        c, h, w = config.input_shape
        for i, (spec, pool) in enumerate(zip(config.conv, config.pool)):
            conv = Conv2d(f"conv{i}", c, spec.out_channels, spec.kernel, spec.stride, spec.padding,
                          input_grad=i > 0)
            self.layers.append(conv)
            self.layers.append(ReLU())
            h, w = conv.output_hw(h, w)
            if pool > 1:
                self.layers.append(MaxPool2d(pool))
                h, w = h // pool, w // pool
            c = spec.out_channels
            if h < 1 or w < 1:
                raise ValueError("conv stack reduces the input to nothing")
        self.layers += [GlobalAvgPool(), Dense("fc0", c, config.hidden), ReLU(),
                        Dense("head", config.hidden, 1)]
        self.params = params if params is not None else self.init_params(config.seed)
        self.check_params()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            if layer.params:
                w, b = layer.params
                shapes[w] = layer.weight_shape()
                shapes[b] = (shapes[w][-1],)
        return shapes

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, size=shape).astype(self.dtype)
            else:
                params[name] = np.zeros(shape, dtype=self.dtype)
        return params

    def check_params(self):
        shapes = self.param_shapes()
        if list(shapes) != list(self.params):
            raise ShapeMismatch("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.params[name].shape}")

    def _input(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != tuple(self.config.input_shape):
            raise ShapeMismatch(f"expected input (N, {self.config.input_shape}), got {x.shape}")
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)

    def logits(self, x) -> np.ndarray:
        out = self._input(x)
        for layer in self.layers:
            out = layer.forward(out, self.params)
        return out[:, 0].astype(np.float64)

    def predict_proba(self, x, batch_size: int = 16) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        chunks = [sigmoid(self.logits(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def loss_and_grads(self, x, labels) -> tuple[float, dict[str, np.ndarray]]:
        """Mean BCE over the batch and its gradient for every parameter."""
        z = self.logits(x)
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        if len(y) != len(z):
            raise ShapeMismatch("one label per input required")
        p = sigmoid(z)
        loss = float(bce_loss(p, y).mean())
        dout = ((p - y) / len(y)).astype(self.dtype)[:, None]
        grads: dict[str, np.ndarray] = {}
        for layer in reversed(self.layers):
            dout = layer.backward(dout, self.params, grads)
        return loss, {name: grads[name] for name in self.params}


@dataclass
class TrainedModel:
    net: BoundaryNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def config(self) -> ModelConfig:
        return self.net.config

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.net.params

    def predict_proba(self, x, batch_size: int = 16) -> np.ndarray:
        return self.net.predict_proba(x, batch_size)


def init_model(config: ModelConfig = ModelConfig()) -> TrainedModel:
    return TrainedModel(BoundaryNet(config))


def forward(model: TrainedModel, patch) -> float:
    data = getattr(patch, "data", patch)
    return float(model.predict_proba(np.asarray(data)[None])[0])


def backward(model: TrainedModel, patch, label) -> dict[str, np.ndarray]:
    data = getattr(patch, "data", patch)
    _, grads = model.net.loss_and_grads(np.asarray(data)[None], [label])
    return grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def decays(name: str) -> bool:
    return name.endswith(".weight")


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               decay: Callable[[str], bool] = decays) -> tuple[dict, AdamWState]:
    """One AdamW update, in place: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).

    Weight decay is skipped for parameters where ``decay(name)`` is false.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if wd and decay(name):
            update = update + wd * p
        p -= (lr * update).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# training


@dataclass
class PatchSet:
    x: np.ndarray  # (N, 3, 128, 512)
    y: np.ndarray  # (N,) bool

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=bool)
        if len(self.x) != len(self.y):
            raise ShapeMismatch("patches and labels differ in length")

    def __len__(self):
        return len(self.y)


def epoch_indices(labels: np.ndarray, duplication: int, rng: np.random.Generator) -> np.ndarray:
    """Positives repeated ``duplication`` times, negatives once, shuffled."""
    pos = np.flatnonzero(labels)
    neg = np.flatnonzero(~labels)
    idx = np.concatenate([np.tile(pos, duplication), neg])
    return rng.permutation(idx)


def validation_f1(model: TrainedModel, data: PatchSet, threshold: float = 0.5,
                  batch_size: int = 16) -> float:
    probs = model.predict_proba(data.x, batch_size)
    return per_measure_eval(probs, np.flatnonzero(data.y), threshold=threshold).f1


def train(train_set: PatchSet, val_set: PatchSet, mconfig: ModelConfig = ModelConfig(),
          tconfig: TrainConfig = TrainConfig(), *,
          val_scorer: Callable[[TrainedModel, int], float] | None = None,
          model: TrainedModel | None = None) -> TrainedModel:
    """Train with early stopping on validation F1; returns the best epoch's parameters.

    ``val_scorer(model, epoch)`` replaces the default per-measure F1 on
    ``val_set`` when given.
    """
    if not len(val_set):
        raise DegenerateDataset("validation split is empty")
    if train_set.y.all() or not train_set.y.any():
        raise DegenerateDataset("training split needs both boundary and non-boundary patches")
    model = model or init_model(mconfig)
    net = model.net
    if val_scorer is None:
        def val_scorer(m, epoch):
            return validation_f1(m, val_set, tconfig.threshold, tconfig.batch_size)

    rng = np.random.default_rng(tconfig.seed)
    state = AdamWState()
    best_f1, best_epoch, best_params, stale = -1.0, 0, None, 0
    history = []
    for epoch in range(1, tconfig.max_epochs + 1):
        order = epoch_indices(train_set.y, tconfig.positive_duplication, rng)
        total = 0.0
        for start in range(0, len(order), tconfig.batch_size):
            batch = order[start:start + tconfig.batch_size]
            loss, grads = net.loss_and_grads(train_set.x[batch], train_set.y[batch])
            adamw_step(net.params, grads, state, tconfig.learning_rate, tconfig.weight_decay)
            total += loss * len(batch)
        f1 = float(val_scorer(model, epoch))
        history.append({"epoch": epoch, "samples": int(len(order)),
                        "train_loss": total / len(order), "val_f1": f1})
        log.info("epoch %d loss %.5f val F1 %.4f", epoch, total / len(order), f1)
        if f1 > best_f1:
            best_f1, best_epoch, stale = f1, epoch, 0
            best_params = {k: v.copy() for k, v in net.params.items()}
        else:
            stale += 1
        if stale >= tconfig.patience:
            break
        if tconfig.stop_at_perfect and best_f1 >= 1.0:
            break
    return TrainedModel(BoundaryNet(net.config, best_params), history, best_epoch)


def ensemble_predict(models: Sequence[TrainedModel], patches, batch_size: int = 16) -> np.ndarray:
    """Mean of member probabilities for a single patch or a batch."""
    if not models:
        raise EmptyEnsemble("need at least one model")
    x = np.asarray(getattr(patches, "data", patches))
    return np.mean([m.predict_proba(x, batch_size) for m in models], axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrainedModel, path) -> None:
    """Magic, JSON header, float32 LE blobs in declaration order, JSON history."""
    header = {
        "model_config": model.config.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "best_epoch": model.best_epoch,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    hist = json.dumps(model.history, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(hist)))
        fh.write(hist)


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", blob, 8)
    pos = 12 + n
    header = json.loads(blob[12:pos])
    config = ModelConfig.from_dict(header["model_config"])
    dtype = np.dtype(config.dtype)
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        params[entry["name"]] = arr.reshape(shape).astype(dtype)
        pos += 4 * count
    (h,) = struct.unpack_from("<I", blob, pos)
    history = json.loads(blob[pos + 4:pos + 4 + h])
    return TrainedModel(BoundaryNet(config, params), history, header.get("best_epoch", 0))
