"""Small feed-forward network engine with hand-written backward passes.

Everything runs in float64 numpy. A network is described by a ``NetSpec``
(an ordered list of layer descriptors) and its parameters live in a
``NetState``. Masks multiply the weight tensors of Linear/Conv2d layers
element-wise; biases are never masked.

Parameter tensors are keyed ``"<layer index>.weight"`` / ``"<layer index>.bias"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np


class InvalidSpecError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Linear, Conv2d, ReLU, Flatten]


def _weight_shape(layer) -> tuple[int, ...]:
    if isinstance(layer, Linear):
        return (layer.out_features, layer.in_features)
    return (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)


def _out_features(layer) -> int:
    return layer.out_features if isinstance(layer, Linear) else layer.out_ch


@dataclass(frozen=True)
class NetSpec:
    """Layer graph plus the input shape of a single example (no batch axis)."""

    layers: tuple
    input_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not any(isinstance(l, (Linear, Conv2d)) for l in self.layers):
            raise InvalidSpecError("network needs at least one Linear or Conv2d layer")
        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if layer.in_features <= 0 or layer.out_features <= 0:
                    raise InvalidSpecError(f"layer {idx}: zero fan-in or fan-out")
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise InvalidSpecError(
                        f"layer {idx}: Linear expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if min(layer.in_ch, layer.out_ch, layer.kernel, layer.stride) <= 0 or layer.pad < 0:
                    raise InvalidSpecError(f"layer {idx}: bad Conv2d parameters {layer}")
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise InvalidSpecError(
                        f"layer {idx}: Conv2d expects ({layer.in_ch}, H, W), got {shape}")
                h, w = _conv_out_hw(shape[1], shape[2], layer)
                if h <= 0 or w <= 0:
                    raise InvalidSpecError(f"layer {idx}: kernel larger than padded input")
                shape = (layer.out_ch, h, w)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif not isinstance(layer, ReLU):
                raise InvalidSpecError(f"layer {idx}: unknown layer type {type(layer).__name__}")
        if len(shape) != 1:
            raise InvalidSpecError(f"network output must be a vector of logits, got {shape}")

    @property
    def num_classes(self) -> int:
        return [l for l in self.layers if isinstance(l, (Linear, Conv2d))][-1].out_features

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, (Linear, Conv2d)):
                shapes[f"{idx}.weight"] = _weight_shape(layer)
                if layer.bias:
                    shapes[f"{idx}.bias"] = (_out_features(layer),)
        return shapes

    def mask_shapes(self) -> dict[str, tuple[int, ...]]:
        """Shapes of the maskable tensors (weights only), in layer order."""
        return {k: v for k, v in self.param_shapes().items() if k.endswith(".weight")}

    @property
    def n_maskable(self) -> int:
        return int(sum(np.prod(s) for s in self.mask_shapes().values()))


def _conv_out_hw(h: int, w: int, layer: Conv2d) -> tuple[int, int]:
    return ((h + 2 * layer.pad - layer.kernel) // layer.stride + 1,
            (w + 2 * layer.pad - layer.kernel) // layer.stride + 1)


def mlp(sizes: Sequence[int], bias: bool = True, input_shape: Sequence[int] | None = None) -> NetSpec:
    """Flatten followed by Linear/ReLU blocks, e.g. ``mlp([784, 300, 100, 10])``."""
    if len(sizes) < 2:
        raise InvalidSpecError("mlp needs at least input and output sizes")
    layers: list = [Flatten()]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, bias))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return NetSpec(layers, tuple(input_shape) if input_shape else (sizes[0],))


def conv4(input_shape: Sequence[int], num_classes: int, channels=(8, 16), hidden: int = 64,
          bias: bool = True) -> NetSpec:
    """Two stride-2 3x3 convolutions followed by two dense layers."""
    c, h, w = input_shape
    c1, c2 = channels
    conv_a = Conv2d(c, c1, 3, stride=2, pad=1, bias=bias)
    h, w = _conv_out_hw(h, w, conv_a)
    conv_b = Conv2d(c1, c2, 3, stride=2, pad=1, bias=bias)
    h, w = _conv_out_hw(h, w, conv_b)
    layers = [conv_a, ReLU(), conv_b, ReLU(), Flatten(),
              Linear(c2 * h * w, hidden, bias), ReLU(), Linear(hidden, num_classes, bias)]
    return NetSpec(layers, tuple(input_shape))


@dataclass
class NetState:
    weights: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.grads:
            self.grads = {k: np.zeros_like(v) for k, v in self.weights.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "NetState":
        return NetState({k: v.copy() for k, v in self.weights.items()},
                        {k: v.copy() for k, v in self.grads.items()})


def kaiming_normal_init(spec: NetSpec, seed: int) -> NetState:
    """Weights ~ N(0, 2/fan_in) with fan_in = in_features (or in_ch*k*k); biases zero."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x1417])))
    weights = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        if fan_in <= 0:
            raise InvalidSpecError(f"{name}: zero fan-in")
        weights[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return NetState(weights)


# --- convolution helpers -------------------------------------------------------

def _conv_forward(x, w, stride, pad):
    n, _, h, wd = x.shape
    oc, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out, xp


def _conv_backward(gout, xp, w, stride, pad, in_hw):
    k = w.shape[2]
    oh, ow = gout.shape[2:]
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", gout, patch)
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.einsum(
                "nohw,oc->nchw", gout, w[:, :, i, j])
    h, wd = in_hw
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return gw, gx


# --- forward / backward --------------------------------------------------------

def _effective_weight(state: NetState, mask: Mapping[str, np.ndarray] | None, name: str):
    w = state.weights[name]
    if mask is None:
        return w
    return w * mask[name]


def _check_batch(spec: NetSpec, batch: np.ndarray) -> None:
    if batch.ndim >= 2 and tuple(batch.shape[1:]) == spec.input_shape:
        return
    # a leading Flatten accepts any example shape with the right element count
    if (batch.ndim >= 2 and isinstance(spec.layers[0], Flatten)
            and int(np.prod(batch.shape[1:])) == int(np.prod(spec.input_shape))):
        return
    raise DimensionError(f"batch shape {batch.shape} does not match input shape {spec.input_shape}")


def forward(spec: NetSpec, state: NetState, mask: Mapping[str, np.ndarray] | None,
            batch: np.ndarray):
    """Returns ``(logits, cache)``; ``mask`` maps weight names to arrays (None = dense)."""
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(spec, batch)
    x = batch
    cache = []
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Linear):
            w = _effective_weight(state, mask, f"{idx}.weight")
            cache.append((x, w))
            x = x @ w.T
            if layer.bias:
                x = x + state.weights[f"{idx}.bias"]
        elif isinstance(layer, Conv2d):
            w = _effective_weight(state, mask, f"{idx}.weight")
            out, xp = _conv_forward(x, w, layer.stride, layer.pad)
            cache.append((xp, w, x.shape[2:]))
            x = out
            if layer.bias:
                x = x + state.weights[f"{idx}.bias"][None, :, None, None]
        elif isinstance(layer, ReLU):
            cache.append(x > 0)
            x = np.where(x > 0, x, 0.0)
        else:
            cache.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    return x, cache


def _backward(spec, state, mask, cache, gout):
    grad_w, grad_mask = {}, {}
    g = gout
    for idx in reversed(range(len(spec.layers))):
        layer = spec.layers[idx]
        entry = cache[idx]
        if isinstance(layer, (Linear, Conv2d)):
            name = f"{idx}.weight"
            if isinstance(layer, Linear):
                x, w_eff = entry
                g_eff = g.T @ x
                if layer.bias:
                    grad_w[f"{idx}.bias"] = g.sum(axis=0)
                g = g @ w_eff
            else:
                xp, w_eff, in_hw = entry
                if layer.bias:
                    grad_w[f"{idx}.bias"] = g.sum(axis=(0, 2, 3))
                g_eff, g = _conv_backward(g, xp, w_eff, layer.stride, layer.pad, in_hw)
            # d(w*m)/dw = m, d(w*m)/dm = w
            m = mask[name] if mask is not None else 1.0
            grad_w[name] = g_eff * m
            grad_mask[name] = g_eff * state.weights[name]
        elif isinstance(layer, ReLU):
            g = g * entry
        else:
            g = g.reshape(entry)
    return grad_w, grad_mask


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grads(spec: NetSpec, state: NetState, mask, batch, labels):
    """Mean softmax cross-entropy and its gradients w.r.t. weights and mask values.

    Both gradients come out of a single backward pass: ``grad_w`` holds the mask
    fixed, ``grad_mask`` holds the weights fixed. ``grad_mask`` only has entries
    for maskable (weight) tensors.
    """
    labels = np.asarray(labels)
    if labels.shape[0] == 0 or np.asarray(batch).shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != np.asarray(batch).shape[0]:
        raise DimensionError("batch and labels disagree in length")
    logits, cache = forward(spec, state, mask, batch)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    n = labels.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    gout = np.exp(logp)
    gout[np.arange(n), labels] -= 1.0
    gout /= n
    grad_w, grad_mask = _backward(spec, state, mask, cache, gout)
    return float(loss), grad_w, grad_mask


def predict(spec: NetSpec, state: NetState, mask, inputs: np.ndarray, chunk: int = 1024):
    out = []
    for start in range(0, len(inputs), chunk):
        logits, _ = forward(spec, state, mask, inputs[start:start + chunk])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)
