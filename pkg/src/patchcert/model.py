"""Minimal plain CNN: definition, traced forward pass and reverse-mode gradients.

Inference is written so that every sample's result is computed with the same
sequence of elementwise float operations no matter which other samples share
the batch.  Occlusion certification compares predictions made in different
batches and relies on those being bit-identical, so the forward path avoids
BLAS (whose kernels can change with the batch size).  The backward path is
only used for training and attacks and uses ``einsum`` freely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, StateError

KINDS = ("conv", "relu", "maxpool", "globalavgpool", "dense")
SPATIAL_KINDS = ("conv", "maxpool")


@dataclass(frozen=True)
class LayerGeom:
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid layer geometry {self}")
        if self.padding >= self.kernel:
            raise ConfigError(f"padding must be smaller than kernel: {self}")

    def out_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass
class LayerSpec:
    kind: str
    geom: Optional[LayerGeom] = None
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if (self.geom is not None) != (self.kind in SPATIAL_KINDS):
            raise ConfigError(f"{self.kind} layer: geometry is required exactly for conv/maxpool")
        if (self.weight is not None) != (self.kind in ("conv", "dense")):
            raise ConfigError(f"{self.kind} layer: weights are required exactly for conv/dense")

    def params(self) -> dict:
        if self.weight is None:
            return {}
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class ModelSpec:
    """Ordered layer list plus input geometry.

    ``superficial_layer`` indexes the layer whose output is pruned by the
    SIN mask; by default it is the activation of the first convolution.
    """

    layers: list
    input_shape: tuple
    num_classes: int
    superficial_layer: int = 1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    # -- geometry ---------------------------------------------------------
    def shapes(self) -> list:
        """Output shape (without batch axis) of every layer."""
        if "shapes" in self._cache:
            return self._cache["shapes"]
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} (conv) needs a spatial input, got {shape}")
                o, c, kh, kw = layer.weight.shape
                g = layer.geom
                if c != shape[0] or kh != g.kernel or kw != g.kernel:
                    raise ConfigError(
                        f"layer {i} (conv): weight shape {layer.weight.shape} does not match "
                        f"{shape[0]} input channels and kernel {g.kernel}")
                if layer.bias.shape != (o,):
                    raise ConfigError(f"layer {i} (conv): bias shape {layer.bias.shape} != ({o},)")
                shape = (o, g.out_extent(shape[1]), g.out_extent(shape[2]))
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} (maxpool) needs a spatial input, got {shape}")
                g = layer.geom
                shape = (shape[0], g.out_extent(shape[1]), g.out_extent(shape[2]))
            elif layer.kind == "globalavgpool":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} (globalavgpool) needs a spatial input")
                shape = (shape[0],)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"layer {i} (dense) needs a flat input, got {shape}")
                o, n = layer.weight.shape
                if n != shape[0] or layer.bias.shape != (o,):
                    raise ConfigError(
                        f"layer {i} (dense): weight shape {layer.weight.shape} does not match "
                        f"{shape[0]} inputs")
                shape = (o,)
            if len(shape) == 3 and min(shape[1:]) < 1:
                raise ConfigError(f"layer {i} ({layer.kind}) produces an empty feature map")
            shapes.append(shape)
        self._cache["shapes"] = shapes
        return shapes

    def validate(self):
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (C, H, W)")
        if not self.layers:
            raise ConfigError("model has no layers")
        shapes = self.shapes()
        if shapes[-1] != (self.num_classes,):
            raise ConfigError(f"last layer outputs {shapes[-1]}, expected ({self.num_classes},)")
        self.check_superficial(self.superficial_layer)

    def check_superficial(self, index: int) -> int:
        shapes = self.shapes()
        if not 0 <= index < len(self.layers) or len(shapes[index]) != 3:
            raise ConfigError(f"superficial layer {index} does not address a spatial feature map")
        return index

    # -- parameters -------------------------------------------------------
    @property
    def dtype(self):
        for layer in self.layers:
            if layer.weight is not None:
                return layer.weight.dtype
        return np.dtype(np.float32)

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield i, name, arr

    def copy(self) -> "ModelSpec":
        layers = [LayerSpec(l.kind, l.geom,
                            None if l.weight is None else l.weight.copy(),
                            None if l.bias is None else l.bias.copy()) for l in self.layers]
        return ModelSpec(layers, self.input_shape, self.num_classes, self.superficial_layer)

    def astype(self, dtype) -> "ModelSpec":
        m = self.copy()
        for layer in m.layers:
            if layer.weight is not None:
                layer.weight = layer.weight.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
        return m

    def cached(self, key, factory: Callable):
        """Memoise geometry-only derived data (the model is treated as immutable)."""
        if key not in self._cache:
            self._cache[key] = factory()
        return self._cache[key]


def build_model(input_shape=(3, 16, 16), num_classes=4, channels=(8, 16), seed=0,
                dtype=np.float32, head="gap") -> ModelSpec:
    """Default desk architecture: conv3x3 -> relu -> maxpool2 -> conv3x3 -> relu -> gap -> dense.

    ``head="max"`` inserts a global max-pool before the average (which then
    sees a 1x1 map), making the classifier far more sensitive to local evidence.
    """
    rng = np.random.default_rng(seed)
    c_in = input_shape[0]
    c1, c2 = channels

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    layers = [
        LayerSpec("conv", LayerGeom(3, 1, 1), he((c1, c_in, 3, 3), c_in * 9), np.zeros(c1, dtype)),
        LayerSpec("relu"),
        LayerSpec("maxpool", LayerGeom(2, 2, 0)),
        LayerSpec("conv", LayerGeom(3, 1, 1), he((c2, c1, 3, 3), c1 * 9), np.zeros(c2, dtype)),
        LayerSpec("relu"),
    ]
    if head == "max":
        hs, ws = (input_shape[1] // 2, input_shape[2] // 2)
        if hs != ws:
            raise ConfigError("max head needs a square image")
        layers.append(LayerSpec("maxpool", LayerGeom(hs, hs, 0)))
    elif head != "gap":
        raise ConfigError(f"unknown head {head!r}")
    layers += [
        LayerSpec("globalavgpool"),
        LayerSpec("dense", None, he((num_classes, c2), c2), np.zeros(num_classes, dtype)),
    ]
    return ModelSpec(layers, input_shape, num_classes, superficial_layer=1)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Result of a forward pass over a batch.

    ``outputs[i]`` is the output of layer ``i`` (after any gate applied at
    that layer) when tracing was requested, otherwise only the logits are kept.
    """

    input: np.ndarray
    logits: np.ndarray
    outputs: Optional[list] = None
    gates: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        # np.argmax returns the lowest index among ties
        return np.argmax(self.logits, axis=1)

    @property
    def label(self) -> int:
        if self.logits.shape[0] != 1:
            raise StateError("label is only defined for a single-image trace")
        return int(self.labels[0])


def _strided(xp, i, j, stride, ho, wo):
    return xp[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def conv_forward(x, weight, bias, geom: LayerGeom):
    n, c, h, w = x.shape
    o = weight.shape[0]
    k, s, p = geom.kernel, geom.stride, geom.padding
    ho, wo = geom.out_extent(h), geom.out_extent(w)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    out = np.empty((n, o, ho, wo), dtype=x.dtype)
    out[...] = bias[None, :, None, None]
    tmp = np.empty_like(out)
    # fixed accumulation order (c, i, j) for every output element
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                sl = _strided(xp[:, ci], i, j, s, ho, wo)
                np.multiply(sl[:, None], weight[None, :, ci, i, j, None, None], out=tmp)
                out += tmp
    return out


def maxpool_forward(x, geom: LayerGeom):
    n, c, h, w = x.shape
    k, s, p = geom.kernel, geom.stride, geom.padding
    ho, wo = geom.out_extent(h), geom.out_extent(w)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
    out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int16)
    for i in range(k):
        for j in range(k):
            sl = _strided(xp, i, j, s, ho, wo)
            better = sl > out
            out = np.where(better, sl, out)
            arg[better] = i * k + j
    return out, arg


def gap_forward(x):
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    acc = np.zeros((n, c), dtype=x.dtype)
    for q in range(h * w):
        acc += flat[:, :, q]
    return acc / x.dtype.type(h * w)


def dense_forward(x, weight, bias):
    out = np.empty((x.shape[0], weight.shape[0]), dtype=x.dtype)
    out[...] = bias[None, :]
    for q in range(weight.shape[1]):
        out += x[:, q, None] * weight[None, :, q]
    return out


def _as_batch(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ConfigError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x.astype(model.dtype, copy=False)


def forward(model: ModelSpec, x, trace: bool = False,
            gate: Optional[Callable] = None, gate_layer: Optional[int] = None) -> ForwardTrace:
    """Run the model on ``x`` of shape (C,H,W) or (N,C,H,W).

    ``gate(output) -> multiplicative mask`` is applied to the output of
    ``gate_layer``; the mask is recorded so ``backward`` can route through it.
    """
    x = _as_batch(model, x)
    h = x
    outputs = [] if trace else None
    gates, aux = {}, {}
    for i, layer in enumerate(model.layers):
        if layer.kind == "conv":
            h = conv_forward(h, layer.weight, layer.bias, layer.geom)
        elif layer.kind == "relu":
            h = np.maximum(h, h.dtype.type(0))
        elif layer.kind == "maxpool":
            h, arg = maxpool_forward(h, layer.geom)
            if trace:
                aux[i] = arg
        elif layer.kind == "globalavgpool":
            h = gap_forward(h)
        else:
            h = dense_forward(h, layer.weight, layer.bias)
        if gate is not None and i == gate_layer:
            g = gate(h).astype(h.dtype, copy=False)
            h = h * g
            gates[i] = g
        if trace:
            outputs.append(h)
    return ForwardTrace(input=x, logits=h, outputs=outputs, gates=gates, aux=aux)


def predict(model: ModelSpec, x, chunk: int = 256) -> np.ndarray:
    x = _as_batch(model, x)
    return np.concatenate([forward(model, x[i:i + chunk]).labels
                           for i in range(0, len(x), chunk)]) if len(x) else np.zeros(0, int)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class Gradients:
    params: dict  # (layer_index, name) -> array
    input: np.ndarray

    def __getitem__(self, key):
        return self.params[key]


def conv_backward(x, weight, geom: LayerGeom, g):
    k, s, p = geom.kernel, geom.stride, geom.padding
    n, c, h, w = x.shape
    ho, wo = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    dw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    dcols = np.einsum("nohw,ocij->nchwij", g, weight, optimize=True)
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            _strided(dxp, i, j, s, ho, wo)[...] += dcols[..., i, j]
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return dw, db, dx


def maxpool_backward(x, geom: LayerGeom, arg, g):
    k, s, p = geom.kernel, geom.stride, geom.padding
    n, c, h, w = x.shape
    ho, wo = g.shape[2:]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            _strided(dxp, i, j, s, ho, wo)[...] += np.where(arg == i * k + j, g, 0)
    return dxp[:, :, p:p + h, p:p + w] if p else dxp


def backward(model: ModelSpec, trace: ForwardTrace, loss_grad) -> Gradients:
    """Reverse-mode gradients of ``sum(loss_grad * logits)``.

    ``loss_grad`` is dL/dlogits with shape (N, classes) or (classes,).
    """
    if trace is None or trace.outputs is None:
        raise StateError("backward needs a forward trace recorded with trace=True")
    g = np.asarray(loss_grad, dtype=trace.logits.dtype)
    if g.ndim == 1:
        g = g[None]
    if g.shape != trace.logits.shape:
        raise ConfigError(f"loss_grad shape {g.shape} != logits shape {trace.logits.shape}")
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x_in = trace.outputs[i - 1] if i > 0 else trace.input
        if i in trace.gates:
            g = g * trace.gates[i]
        if layer.kind == "conv":
            dw, db, g = conv_backward(x_in, layer.weight, layer.geom, g)
            grads[(i, "weight")], grads[(i, "bias")] = dw, db
        elif layer.kind == "relu":
            g = g * (x_in > 0)
        elif layer.kind == "maxpool":
            g = maxpool_backward(x_in, layer.geom, trace.aux[i], g)
        elif layer.kind == "globalavgpool":
            hw = x_in.shape[2] * x_in.shape[3]
            g = np.broadcast_to(g[:, :, None, None] / hw, x_in.shape).copy()
        else:
            grads[(i, "weight")] = g.T @ x_in
            grads[(i, "bias")] = g.sum(axis=0)
            g = g @ layer.weight
    return Gradients(params=grads, input=g)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n, logp
