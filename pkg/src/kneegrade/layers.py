"""Layer specifications, sequential networks, SGD, and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_VERSION = 1
LAYER_KINDS = ("conv2d", "dense", "relu", "global-avg-pool", "dense-block", "flatten")


class LayerShapeError(ShapeError):
    """Shape mismatch attributed to one layer of a network."""

    def __init__(self, index: int, kind: str, detail: str):
        super().__init__(f"layer {index} ({kind}): {detail}")
        self.index = index
        self.kind = kind


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0          # dense width or conv output channels
    kernel: int = 3
    stride: int = 1
    growth: int = 0
    layers: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def conv2d(channels: int, kernel: int = 3, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", units=channels, kernel=kernel, stride=stride)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global-avg-pool")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense_block(growth: int, layers: int, kernel: int = 3) -> LayerSpec:
    return LayerSpec("dense-block", growth=growth, layers=layers, kernel=kernel)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


INITIALIZERS = {"glorot": _glorot, "he": _he}


class Network:
    """A sequence of layers plus named weight tensors.

    ``input_shape`` excludes the batch axis: ``(C, H, W)`` for images or
    ``(features,)`` for vectors.
    """

    def __init__(self, input_shape: Sequence[int], specs: Sequence[LayerSpec], seed: int = 0,
                 tags: Optional[dict] = None, init: str = "glorot"):
        if init not in INITIALIZERS:
            raise ValueError(f"unknown initializer {init!r}")
        self.input_shape = tuple(int(s) for s in input_shape)
        self.specs = tuple(specs)
        self.seed = int(seed)
        self.tags = dict(tags or {})
        self.init = init
        self.params: dict[str, Tensor] = {}
        self.output_shape = self._build(np.random.default_rng(self.seed))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _build(self, rng: np.random.Generator) -> tuple[int, ...]:
        draw = INITIALIZERS[self.init]
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            if spec.kind == "conv2d":
                if len(shape) != 3:
                    raise LayerShapeError(i, spec.kind, f"needs (C, H, W) input, got {shape}")
                c, h, w = shape
                k, o = spec.kernel, spec.units
                self._add(f"{i}.w", draw(rng, (o, c, k, k), c * k * k, o * k * k))
                self._add(f"{i}.b", np.zeros(o))
                pad = k // 2
                shape = (o, (h + 2 * pad - k) // spec.stride + 1, (w + 2 * pad - k) // spec.stride + 1)
            elif spec.kind == "dense-block":
                if len(shape) != 3:
                    raise LayerShapeError(i, spec.kind, f"needs (C, H, W) input, got {shape}")
                c, h, w = shape
                k, g = spec.kernel, spec.growth
                for j in range(spec.layers):
                    cin = c + j * g
                    self._add(f"{i}.{j}.w", draw(rng, (g, cin, k, k), cin * k * k, g * k * k))
                    self._add(f"{i}.{j}.b", np.zeros(g))
                shape = (c + spec.layers * g, h, w)
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise LayerShapeError(i, spec.kind, f"needs flat input, got {shape}")
                self._add(f"{i}.w", draw(rng, (spec.units, shape[0]), shape[0], spec.units))
                self._add(f"{i}.b", np.zeros(spec.units))
                shape = (spec.units,)
            elif spec.kind == "global-avg-pool":
                if len(shape) != 3:
                    raise LayerShapeError(i, spec.kind, f"needs (C, H, W) input, got {shape}")
                shape = (shape[0],)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
        return shape

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def config_hash(self) -> str:
        payload = json.dumps({"input": self.input_shape, "layers": [asdict(s) for s in self.specs]},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def copy(self) -> "Network":
        clone = Network.__new__(Network)
        clone.input_shape, clone.specs, clone.seed = self.input_shape, self.specs, self.seed
        clone.tags = dict(self.tags)
        clone.init = self.init
        clone.output_shape = self.output_shape
        clone.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return clone

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    # ------------------------------------------------------------ checkpoints

    def to_bytes(self) -> bytes:
        meta = {
            "version": CHECKPOINT_VERSION,
            "input_shape": list(self.input_shape),
            "layers": [asdict(s) for s in self.specs],
            "seed": self.seed,
            "init": self.init,
            "tags": self.tags,
            "config_hash": self.config_hash,
        }
        buf = io.BytesIO()
        arrays = {f"param:{k}": v.data for k, v in self.params.items()}
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, expect_hash: Optional[str] = None) -> "Network":
        try:
            with np.load(io.BytesIO(blob), allow_pickle=False) as npz:
                meta = json.loads(npz["__meta__"].tobytes().decode())
                arrays = {k[6:]: npz[k] for k in npz.files if k.startswith("param:")}
        except (ValueError, KeyError, OSError) as exc:
            raise CheckpointError(f"unreadable checkpoint: {exc}") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        net = cls(meta["input_shape"], [LayerSpec(**d) for d in meta["layers"]], meta["seed"], meta["tags"],
                  meta.get("init", "glorot"))
        if expect_hash is not None and net.config_hash != expect_hash:
            raise CheckpointError(f"architecture hash {net.config_hash} != expected {expect_hash}")
        if set(arrays) != set(net.params):
            raise CheckpointError("checkpoint parameters do not match its layer list")
        for name, value in arrays.items():
            if value.shape != net.params[name].shape:
                raise CheckpointError(f"parameter {name} has shape {value.shape}")
            net.params[name].data = value.astype(np.float64)
        return net

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, expect_hash: Optional[str] = None) -> "Network":
        return cls.from_bytes(Path(path).read_bytes(), expect_hash)


def forward(net: Network, x) -> Tensor:
    """Run ``x`` (batch-first) through every layer of ``net``."""
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != net.input_shape:
        raise LayerShapeError(0, net.specs[0].kind if net.specs else "input",
                              f"expected input (N, {', '.join(map(str, net.input_shape))}), got {x.shape}")
    p = net.params
    for i, spec in enumerate(net.specs):
        try:
            if spec.kind == "conv2d":
                x = T.conv2d(x, p[f"{i}.w"], p[f"{i}.b"], stride=spec.stride)
            elif spec.kind == "dense-block":
                features = [x]
                for j in range(spec.layers):
                    inp = features[0] if j == 0 else T.concat(features, axis=1)
                    features.append(T.relu(T.conv2d(inp, p[f"{i}.{j}.w"], p[f"{i}.{j}.b"])))
                x = T.concat(features, axis=1)
            elif spec.kind == "dense":
                x = T.linear(x, p[f"{i}.w"], p[f"{i}.b"])
            elif spec.kind == "relu":
                x = T.relu(x)
            elif spec.kind == "global-avg-pool":
                x = T.global_avg_pool(x)
            elif spec.kind == "flatten":
                x = T.flatten(x)
        except ShapeError as exc:
            if isinstance(exc, LayerShapeError):
                raise
            raise LayerShapeError(i, spec.kind, str(exc)) from exc
    return x


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + grad; w -= lr*v``.

    With ``clip_norm`` set, the gradients are rescaled so that their global
    L2 norm does not exceed it before the momentum update.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: Optional[float] = None):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.velocity, self.lr, self.momentum, self.clip_norm)


def sgd_step(params: Sequence[Tensor], velocity: Sequence[np.ndarray], lr: float, momentum: float,
             clip_norm: Optional[float] = None) -> None:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    scale = 1.0
    if clip_norm is not None:
        norm = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
        if norm > clip_norm:
            scale = clip_norm / norm
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad * scale if scale != 1.0 else p.grad
        p.data -= lr * v
