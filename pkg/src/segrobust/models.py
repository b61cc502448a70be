"""Tiny stateless segmentation networks with hand-written reverse mode.

Two architectures are provided: ``pixel-linear`` (a single 1x1 convolution)
and ``small-conv`` (a stack of same-padded 3x3 convolutions with ReLU and a
final 1x1 convolution to ``K`` logits).  The first ``n_backbone`` layers form
the backbone, the rest the decoder.  Inputs in ``[0, 1]`` are shifted by
``INPUT_CENTER`` before the first layer (zero padding therefore acts as mid-gray).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, check_finite, substream

ARCHITECTURES = ("pixel-linear", "small-conv")
INPUT_CENTER = 0.5
CHECKPOINT_FORMAT = "segrobust-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    arch: str
    num_classes: int
    in_channels: int = 3
    widths: tuple[int, ...] = ()
    kernel_sizes: tuple[int, ...] = ()
    n_backbone: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if len(self.widths) != len(self.kernel_sizes):
            raise ConfigError("widths and kernel_sizes must have equal length")
        if self.arch == "pixel-linear" and self.widths:
            raise ConfigError("pixel-linear has no hidden layers")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ConfigError("kernel sizes must be odd")
        if not 0 <= self.n_backbone <= len(self.widths):
            raise ConfigError("backbone must be a prefix of the hidden layers")

    def layer_shapes(self) -> list[tuple[int, int, int, str]]:
        """``(kernel, c_in, c_out, activation)`` per layer, in forward order."""
        shapes = []
        c_in = self.in_channels
        for k, w in zip(self.kernel_sizes, self.widths):
            shapes.append((k, c_in, w, "relu"))
            c_in = w
        shapes.append((1, c_in, self.num_classes, "none"))
        return shapes

    @property
    def n_layers(self) -> int:
        return len(self.widths) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d


def pixel_linear(num_classes: int, in_channels: int = 3) -> ArchSpec:
    return ArchSpec("pixel-linear", num_classes, in_channels)


def small_conv(num_classes: int, widths=(8, 16, 16), kernel_sizes=None,
               n_backbone: int = 2, in_channels: int = 3) -> ArchSpec:
    if kernel_sizes is None:
        kernel_sizes = (3,) * len(widths)
    return ArchSpec("small-conv", num_classes, in_channels, tuple(widths),
                    tuple(kernel_sizes), n_backbone)


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (k, k, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    activation: str

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class ModelParams:
    spec: ArchSpec
    layers: tuple[Layer, ...]
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def backbone(self) -> tuple[Layer, ...]:
        return self.layers[: self.spec.n_backbone]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_arrays(self, arrays) -> "ModelParams":
        arrays = list(arrays)
        layers = tuple(
            Layer(np.asarray(arrays[2 * i], dtype=np.float64),
                  np.asarray(arrays[2 * i + 1], dtype=np.float64), layer.activation)
            for i, layer in enumerate(self.layers))
        return ModelParams(self.spec, layers, self.seed, dict(self.meta))


# -- layer primitives ---------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, k*k*C) patches with zero same-padding."""
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, h, w, k, k, c), (s0, s1, s2, s1, s2, s3), writeable=False)
    return win.reshape(n * h * w, k * k * c)


def _flipped_kernel(weight: np.ndarray) -> np.ndarray:
    """Kernel whose same-padded correlation is the transpose of ``weight``'s."""
    return weight[::-1, ::-1].transpose(0, 1, 3, 2)


def _layer_forward(layer: Layer, x: np.ndarray):
    n, h, w, _ = x.shape
    k = layer.kernel
    cols = _im2col(x, k)
    z = cols @ layer.weight.reshape(-1, layer.weight.shape[-1]) + layer.bias
    z = z.reshape(n, h, w, -1)
    a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return a, (x.shape, cols, z)


def _layer_backward(layer: Layer, cache, g: np.ndarray, need_input: bool, need_params: bool):
    shape, cols, z = cache
    if layer.activation == "relu":
        # subgradient at exactly 0 is 0
        g = g * (z > 0)
    c_out = layer.weight.shape[-1]
    g2 = g.reshape(-1, c_out)
    dw = db = dx = None
    if need_params:
        dw = (cols.T @ g2).reshape(layer.weight.shape)
        db = g2.sum(axis=0)
    if need_input:
        k = layer.kernel
        flipped = _flipped_kernel(layer.weight).reshape(-1, shape[-1])
        dx = (_im2col(g, k) @ flipped).reshape(shape)
    return dx, dw, db


def _batched(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != params.spec.in_channels:
        raise ConfigError(
            f"image shape {x.shape} incompatible with {params.spec.in_channels}-channel model")
    return x - INPUT_CENTER, single


def forward_with_cache(params: ModelParams, x):
    """Forward pass returning logits plus the tape needed by :func:`backward`."""
    x, single = _batched(params, x)
    caches = []
    for layer in params.layers:
        x, cache = _layer_forward(layer, x)
        caches.append(cache)
    return (x[0] if single else x), (caches, single)


def backward(params: ModelParams, tape, cotangent, need_input=True, need_params=False):
    """Vector-Jacobian product of the logits with ``cotangent``.

    Returns ``(input_grad, param_grads)`` where ``param_grads`` is a flat list
    ordered like :meth:`ModelParams.arrays` (or ``None``).
    """
    caches, single = tape
    g = np.asarray(cotangent, dtype=np.float64)
    if single:
        g = g[None]
    if g.shape != caches[-1][2].shape:
        raise ConfigError(f"cotangent shape {g.shape} != logits shape {caches[-1][2].shape}")
    grads = [None] * (2 * len(params.layers))
    for i in range(len(params.layers) - 1, -1, -1):
        need_dx = need_input or i > 0
        g, dw, db = _layer_backward(params.layers[i], caches[i], g, need_dx, need_params)
        grads[2 * i], grads[2 * i + 1] = dw, db
    dx = None
    if need_input:
        dx = g[0] if single else g
    return dx, (grads if need_params else None)


# -- public operations --------------------------------------------------------

def forward(params: ModelParams, image) -> np.ndarray:
    logits, _ = forward_with_cache(params, image)
    return check_finite(logits, "logits")


def input_gradient(params: ModelParams, image, logit_cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, f(image)>`` with respect to the image."""
    _, tape = forward_with_cache(params, image)
    dx, _ = backward(params, tape, logit_cotangent, need_input=True)
    return dx


def param_gradient(params: ModelParams, image, logit_cotangent) -> list[np.ndarray]:
    """Gradient of ``<cotangent, f(image)>`` w.r.t. weights, ordered like ``arrays()``."""
    _, tape = forward_with_cache(params, image)
    _, grads = backward(params, tape, logit_cotangent, need_input=False, need_params=True)
    return grads


def init_scale(kernel: int, c_in: int, activation: str) -> float:
    """Half-width of the uniform weight init: variance ``gain / fan_in``, gain 2 before ReLU."""
    gain = 2.0 if activation == "relu" else 1.0
    return float(np.sqrt(3 * gain / (kernel * kernel * c_in)))


def init_params(spec: ArchSpec, seed: int, backbone=None) -> ModelParams:
    """He-uniform initialization (zero biases), optionally copying a pretrained backbone.

    Weights are drawn from ``U(-s, s)`` with ``s = init_scale(...)`` layer by
    layer in a fixed order, so for one seed the decoder is identical whether or
    not a backbone is supplied.  ``backbone`` is a sequence of :class:`Layer` (or anything with
    a ``layers`` attribute holding them).
    """
    rng = substream(seed, "init")
    layers = []
    for k, c_in, c_out, act in spec.layer_shapes():
        w = rng.uniform(-1, 1, size=(k, k, c_in, c_out)) * init_scale(k, c_in, act)
        b = np.zeros(c_out)
        layers.append(Layer(w, b, act))
    meta = {"init": "random"}
    if backbone is not None:
        src = list(getattr(backbone, "layers", backbone))
        if len(src) != spec.n_backbone:
            raise ConfigError(f"backbone has {len(src)} layers, spec expects {spec.n_backbone}")
        for i, layer in enumerate(src):
            if layer.weight.shape != layers[i].weight.shape or layer.bias.shape != layers[i].bias.shape:
                raise ConfigError(f"backbone layer {i} shape {layer.weight.shape} "
                                  f"!= {layers[i].weight.shape}")
            layers[i] = Layer(np.array(layer.weight, dtype=np.float64),
                              np.array(layer.bias, dtype=np.float64), layers[i].activation)
        meta = {"init": "pretrained-backbone",
                "backbone_provenance": getattr(backbone, "provenance", None)}
    return ModelParams(spec, tuple(layers), int(seed), meta)


# -- checkpoints ----------------------------------------------------------------

def _layers_to_json(layers) -> list[dict]:
    return [{"weight_shape": list(l.weight.shape), "weight": l.weight.ravel().tolist(),
             "bias": l.bias.tolist(), "activation": l.activation} for l in layers]


def _layers_from_json(records) -> tuple[Layer, ...]:
    return tuple(Layer(np.array(r["weight"], dtype=np.float64).reshape(r["weight_shape"]),
                       np.array(r["bias"], dtype=np.float64), r["activation"])
                 for r in records)


def _read_container(path, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("kind") != kind:
        raise ConfigError(f"{path} is not a {kind} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    return doc


def save_params(params: ModelParams, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": "model",
           "arch": params.spec.to_dict(), "seed": params.seed, "meta": params.meta,
           "layers": _layers_to_json(params.layers)}
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> ModelParams:
    doc = _read_container(path, "model")
    spec = ArchSpec(**doc["arch"])
    layers = _layers_from_json(doc["layers"])
    expected = spec.layer_shapes()
    if len(layers) != len(expected) or any(
            l.weight.shape != (k, k, ci, co) for l, (k, ci, co, _) in zip(layers, expected)):
        raise ConfigError(f"{path}: layer shapes do not match the declared architecture")
    return ModelParams(spec, layers, int(doc["seed"]), doc.get("meta", {}))
