"""A small sequential CNN with pluggable activation storage.

The forward pass asks a ``store`` callback what to keep for each
fine-tuned conv layer: the dense input, its Tucker factors, or anything
else the backward pass knows how to consume. Frozen layers keep nothing.
"""
import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import layers as L
from .decomposition import TuckerFactors
from .layers import ConvSpec


@dataclass(frozen=True)
class Conv:
    name: str
    spec: ConvSpec


@dataclass(frozen=True)
class ReLU:
    name: str


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int


DEFAULT_MODEL = "conv:8:3,relu,conv:16:3,relu,gap,fc"


def parse_model(text, in_channels, num_classes):
    """Build a layer list from a comma-separated description.

    Tokens: ``conv:OUT:K[:STRIDE[:PAD]]`` (padding defaults to K//2),
    ``relu``, ``gap``, ``fc[:OUT]`` (OUT defaults to ``num_classes``).
    """
    out, channels, features, counts = [], in_channels, None, {}

    def name(kind):
        counts[kind] = counts.get(kind, 0) + 1
        return f"{kind}{counts[kind]}"

    for tok in (t.strip() for t in text.split(",") if t.strip()):
        kind, *args = tok.split(":")
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ValueError(f"bad model token {tok!r}") from None
        if kind == "conv" and 2 <= len(nums) <= 4:
            k = nums[1]
            stride = nums[2] if len(nums) > 2 else 1
            pad = nums[3] if len(nums) > 3 else k // 2
            out.append(Conv(name("conv"), ConvSpec(channels, nums[0], k, stride, pad)))
            channels = nums[0]
        elif kind == "relu" and not nums:
            out.append(ReLU(name("relu")))
        elif kind == "gap" and not nums:
            out.append(GlobalAvgPool(name("gap")))
            features = channels
        elif kind == "fc" and len(nums) <= 1:
            if features is None:
                raise ValueError("fc must follow gap")
            n_out = nums[0] if nums else num_classes
            out.append(Linear(name("fc"), features, n_out))
            features = n_out
        else:
            raise ValueError(f"bad model token {tok!r}")
    if not out or not isinstance(out[-1], Linear) or out[-1].out_features != num_classes:
        raise ValueError("model must end with an fc layer producing num_classes outputs")
    return out


def conv_layers(model):
    return [l for l in model if isinstance(l, Conv)]


def fine_tuned(model, count):
    """Names of the last ``count`` conv layers plus every fc layer."""
    convs = conv_layers(model)
    if not 0 <= count <= len(convs):
        raise ValueError(f"fine-tuned layer count {count} outside 0..{len(convs)}")
    names = {c.name for c in convs[len(convs) - count:]}
    names.update(l.name for l in model if isinstance(l, Linear))
    return names


def init_params(model, seed, dtype=np.float32):
    """He-normal weights and zero biases from a seeded stream."""
    params = {}
    for i, layer in enumerate(model):
        rng = np.random.default_rng([seed, i])
        if isinstance(layer, Conv):
            s = layer.spec
            fan_in = s.in_channels * s.kernel ** 2
            params[f"{layer.name}.weight"] = (
                rng.standard_normal(s.weight_shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            params[f"{layer.name}.bias"] = np.zeros(s.out_channels, dtype)
        elif isinstance(layer, Linear):
            params[f"{layer.name}.weight"] = (
                rng.standard_normal((layer.out_features, layer.in_features))
                * np.sqrt(1.0 / layer.in_features)).astype(dtype)
            params[f"{layer.name}.bias"] = np.zeros(layer.out_features, dtype)
    return params


def params_hash(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


@dataclass
class Tape:
    """What the forward pass kept for the backward pass."""

    entries: list
    input_shapes: dict
    stored: dict
    relu_mask_elements: int = 0


def forward(model, params, x, trainable, store: Optional[Callable] = None):
    """Run the model; returns (logits, tape).

    ``store(name, x)`` decides what is kept for a trainable conv layer; by
    default the dense input. Backward only travels down to the first
    trainable layer, so nothing before it is kept.
    """
    store = store or (lambda name, a: a)
    first = next((i for i, l in enumerate(model) if l.name in trainable), len(model))
    entries, shapes, stored = [], {}, {}
    masks = 0
    for i, layer in enumerate(model):
        shapes[layer.name] = x.shape
        keep = None
        if isinstance(layer, Conv):
            if layer.name in trainable:
                keep = store(layer.name, x)
                stored[layer.name] = keep
            x = L.conv_forward(x, params[f"{layer.name}.weight"], layer.spec,
                               params[f"{layer.name}.bias"])
        elif isinstance(layer, ReLU):
            x, mask = L.relu_forward(x)
            if i > first:
                keep = mask
                masks += mask.size
        elif isinstance(layer, GlobalAvgPool):
            x = x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
        elif isinstance(layer, Linear):
            if layer.name in trainable:
                keep = x
            x = L.fc_forward(x, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        entries.append((layer, keep))
    return x, Tape(entries, shapes, stored, masks)


def backward(model, params, tape, grad_logits, trainable, return_grad_outs=False):
    """Gradients of the trainable parameters.

    Conv weight gradients come from whatever the tape stored: a dense array
    or :class:`TuckerFactors`. With ``return_grad_outs`` the output gradient
    seen by every trainable conv layer is returned as well.
    """
    first = next((i for i, l in enumerate(model) if l.name in trainable), len(model))
    grads, grad_outs = {}, {}
    g = grad_logits
    for i in range(len(tape.entries) - 1, first - 1, -1):
        layer, keep = tape.entries[i]
        need_input = i > first
        if isinstance(layer, Linear):
            w = params[f"{layer.name}.weight"]
            if layer.name in trainable:
                dw, dx, db = L.fc_backward(keep, w, g)
                grads[f"{layer.name}.weight"], grads[f"{layer.name}.bias"] = dw, db
            else:
                dx = (np.asarray(g, np.float64) @ np.asarray(w, np.float64)).astype(g.dtype)
            g = dx
        elif isinstance(layer, GlobalAvgPool):
            b, c, h, w = tape.input_shapes[layer.name]
            g = np.broadcast_to((g / (h * w))[:, :, None, None], (b, c, h, w)).astype(g.dtype)
        elif isinstance(layer, ReLU):
            g = L.relu_backward(keep, g)
        elif isinstance(layer, Conv):
            w = params[f"{layer.name}.weight"]
            if layer.name in trainable:
                if return_grad_outs:
                    grad_outs[layer.name] = g
                if isinstance(keep, TuckerFactors):
                    dw = L.conv_backward_weight_lowrank(keep, g, layer.spec)
                else:
                    dw = L.conv_backward_weight(keep, g, layer.spec)
                grads[f"{layer.name}.weight"] = dw.astype(w.dtype)
                grads[f"{layer.name}.bias"] = L.conv_backward_bias(g)
            if need_input:
                g = L.conv_backward_input(w, g, layer.spec, tape.input_shapes[layer.name])
    if return_grad_outs:
        return grads, grad_outs
    return grads


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy; returns (loss, grad_logits, n_correct)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    correct = int((z.argmax(axis=1) == labels).sum())
    return float(loss), (grad / n).astype(logits.dtype), correct
