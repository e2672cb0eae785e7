"""Network layers: plain conv/pool/fc/activations, dropout in standard and
split mode, and orientation-pooling convolution (rotate / flip-rotate).

Layers hold parameters and accumulated gradients but no per-call activation
state: `forward(x, cache)` writes whatever the matching backward needs into
the caller-owned `cache` dict, and `backward(grad_out, cache)` reads it back
and adds parameter gradients into `layer.grads`. The training walker owns
one cache per layer per branch, which is what lets split-dropout branches
share every layer object while keeping their activations separate.

Dropout layers are orchestrated by the training module (the split requires
forking the activation stream); calling their forward directly is an error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel_transforms as kt
from .errors import ConfigError, ConsistencyError, DimensionError, InputError
from .tensor_core import (ConvParams, conv2d_backward, conv2d_forward,
                          fc_backward, fc_forward, maxpool2d_backward,
                          maxpool2d_forward, prelu_backward, prelu_forward,
                          relu_backward, relu_forward)


# ---------------------------------------------------------------------------
# Masks and dropout
# ---------------------------------------------------------------------------

@dataclass
class Mask:
    """Binary keep-mask over the units of one layer, shared across a batch."""

    bits: np.ndarray
    p: float

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if not np.all((bits == 0) | (bits == 1)):
            raise InputError("mask bits must be 0 or 1")
        self.bits = bits

    def complement(self) -> "Mask":
        return Mask(bits=1 - self.bits, p=self.p)

    def __len__(self):
        return self.bits.shape[0]


def tie_break(responses: np.ndarray) -> int:
    """Winning variant index at one position: lowest index among maxima."""
    if np.asarray(responses).size == 0:
        raise InputError("tie_break needs at least one response")
    return int(np.argmax(responses))


class Layer:
    kind = "base"

    def __init__(self):
        self.grads: dict = {}

    def forward(self, x, cache: dict):
        raise NotImplementedError

    def backward(self, grad_out, cache: dict):
        raise NotImplementedError

    def params(self) -> dict:
        """Name -> live parameter array (mutated in place by the optimizer)."""
        return {}

    def zero_grads(self):
        self.grads = {name: np.zeros_like(arr) for name, arr in self.params().items()}

    def _accumulate(self, name: str, g: np.ndarray):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def param_count(self) -> int:
        return sum(arr.size for arr in self.params().values())


class DropoutLayer(Layer):
    """Dropout in standard or split mode.

    Standard mode multiplies activations by a Bernoulli(p) keep-mask drawn
    once per batch. Split mode instead partitions the activation into the
    masked part and its complement and forwards both through the same
    downstream weights; that forking lives in the training module. Split
    mode demands p = 0.5 because the two-branch loss identity only holds
    when a mask and its complement are equally likely.
    """

    kind = "dropout"

    def __init__(self, p: float = 0.5, mode: str = "standard", rng=None):
        super().__init__()
        if not 0.0 < p < 1.0:
            raise ConfigError(f"dropout p must lie in (0,1), got {p}")
        if mode not in ("standard", "split"):
            raise ConfigError(f"dropout mode must be 'standard' or 'split', got {mode!r}")
        if mode == "split" and p != 0.5:
            raise ConfigError(
                f"split mode requires p=0.5 (complement-symmetric masks), got p={p}")
        self.p = p
        self.mode = mode
        self.rng_stream = rng if rng is not None else np.random.default_rng(0)

    def draw_mask(self, d: int) -> Mask:
        bits = (self.rng_stream.random(d) < self.p).astype(np.float32)
        return Mask(bits=bits, p=self.p)

    def forward(self, x, cache):
        raise ConsistencyError(
            "dropout layers are driven by the training walker, not called directly")

    backward = forward


def dropout_forward_standard(y: np.ndarray, layer: DropoutLayer, training: bool,
                             mask: Mask = None):
    """Standard dropout: multiply by the keep-mask during training, pass
    through at inference (weight scaling happens in to_inference).

    Returns (output, mask); mask is None outside training.
    """
    if not training:
        return y, None
    if mask is None:
        mask = layer.draw_mask(y.shape[1])
    if len(mask) != y.shape[1]:
        raise DimensionError(
            f"mask length {len(mask)} does not match unit count {y.shape[1]}")
    return y * mask.bits.astype(y.dtype, copy=False), mask


def sdropout_forward(y: np.ndarray, layer: DropoutLayer, mask: Mask = None):
    """Split the activation into its masked part and the complement part.

    Returns (y1, y2, mask) with y1 = m * y and y2 = (1 - m) * y, so
    y1 + y2 == y holds bitwise. Both halves are forwarded through the same
    downstream weights by the training walker.
    """
    if layer.mode != "split":
        raise ConfigError("sdropout_forward requires a layer in split mode")
    if mask is None:
        mask = layer.draw_mask(y.shape[1])
    if len(mask) != y.shape[1]:
        raise DimensionError(
            f"mask length {len(mask)} does not match unit count {y.shape[1]}")
    bits = mask.bits.astype(y.dtype, copy=False)
    return y * bits, y * (1 - bits), mask


def sdropout_backward(grad_y1: np.ndarray, grad_y2: np.ndarray, mask: Mask):
    """Merge branch gradients: m * grad_y1 + (1 - m) * grad_y2."""
    if grad_y1.shape != grad_y2.shape:
        raise DimensionError(
            f"branch gradient shapes differ: {grad_y1.shape} vs {grad_y2.shape}")
    if len(mask) != grad_y1.shape[1]:
        raise DimensionError(
            f"mask length {len(mask)} does not match unit count {grad_y1.shape[1]}")
    bits = mask.bits.astype(grad_y1.dtype, copy=False)
    return grad_y1 * bits + grad_y2 * (1 - bits)


# ---------------------------------------------------------------------------
# Standard layers
# ---------------------------------------------------------------------------

class ConvLayer(Layer):
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, pad: int = 0, dtype=np.float32):
        super().__init__()
        self.weights = np.zeros((out_channels, in_channels, kernel, kernel), dtype)
        self.bias = np.zeros(out_channels, dtype)
        self.stride = stride
        self.pad = pad
        ConvParams(self.weights, self.bias, stride, pad)  # validates

    def conv_params(self) -> ConvParams:
        return ConvParams(self.weights, self.bias, self.stride, self.pad)

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, cache):
        cache["x"] = x
        return conv2d_forward(x, self.conv_params())

    def backward(self, grad_out, cache):
        if "x" not in cache:
            raise ConsistencyError("conv backward called without a matching forward")
        gx, gw, gb = conv2d_backward(grad_out, cache["x"], self.conv_params())
        self._accumulate("weights", gw)
        self._accumulate("bias", gb)
        return gx


class _OrientedConv(Layer):
    """Convolution where some output filters pool over an orientation bank.

    Each pooled filter is convolved with every variant of its bank (8
    rotations, or original + one flip) and the responses are reduced by an
    elementwise max; ties prefer the lowest variant index, i.e. the
    untransformed kernel. The variants share the single stored kernel, so
    the layer trains exactly as many values as a plain convolution.
    Per-position winner indices are recorded in the call cache and the
    backward routes gradients only through the winning variant, pulling
    kernel gradients back through the inverse transform.

    Which filters rotate (and which flip) is drawn once at construction and
    never changes afterwards.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 rotate_fraction=0.0, flip_fraction=0.0, rng=None,
                 dtype=np.float32):
        super().__init__()
        if not 0.0 <= rotate_fraction <= 1.0:
            raise ConfigError(f"rotate_fraction must lie in [0,1], got {rotate_fraction}")
        if not 0.0 <= flip_fraction <= 1.0:
            raise ConfigError(f"flip_fraction must lie in [0,1], got {flip_fraction}")
        if rotate_fraction + flip_fraction > 1.0 + 1e-12:
            raise ConfigError(
                f"rotate_fraction + flip_fraction must not exceed 1, got "
                f"{rotate_fraction} + {flip_fraction}")
        if kernel % 2 == 0:
            raise DimensionError(f"orientation pooling needs an odd kernel, got {kernel}")
        self.weights = np.zeros((out_channels, in_channels, kernel, kernel), dtype)
        self.bias = np.zeros(out_channels, dtype)
        self.stride = stride
        self.pad = pad
        self.rotate_fraction = rotate_fraction
        self.flip_fraction = flip_fraction

        n_rot = int(round(rotate_fraction * out_channels))
        n_flip = int(round(flip_fraction * out_channels))
        if n_rot + n_flip > out_channels:
            raise ConfigError(
                f"selection sizes {n_rot}+{n_flip} exceed {out_channels} filters")
        rng = rng if rng is not None else np.random.default_rng(0)
        rotate = rng.choice(out_channels, size=n_rot, replace=False)
        remaining = np.setdiff1d(np.arange(out_channels), rotate)
        flip_order = rng.choice(remaining, size=n_flip, replace=False)
        # flip axes alternate in selection order: even draw -> left-right,
        # odd draw -> up-down
        axes = {int(f): ("left_right" if i % 2 == 0 else "up_down")
                for i, f in enumerate(flip_order)}
        self.set_selection(sorted(int(i) for i in rotate), axes)

    # -- selection layout -------------------------------------------------
    def set_selection(self, rotate_indices, flip_axes: dict):
        """Install the fixed filter selection (also used by checkpoint load)."""
        out_channels = self.weights.shape[0]
        self.rotate_set = np.array(sorted(int(i) for i in rotate_indices), dtype=int)
        self.flip_axes = {int(k): v for k, v in flip_axes.items()}
        self.flip_set = np.array(sorted(self.flip_axes), dtype=int)
        if np.intersect1d(self.rotate_set, self.flip_set).size:
            raise ConfigError("rotate and flip selections must be disjoint")
        for f, ax in self.flip_axes.items():
            if ax not in kt.FLIP_AXES:
                raise ConfigError(f"bad flip axis {ax!r} for filter {f}")
        sizes = np.ones(out_channels, dtype=int)
        sizes[self.rotate_set] = 8
        sizes[self.flip_set] = 2
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        self._total = int(sizes.sum())
        self._rot_rows = starts[self.rotate_set][:, None] + np.arange(8)
        self._flip_rows = starts[self.flip_set][:, None] + np.arange(2)
        plain = np.setdiff1d(np.arange(out_channels),
                             np.concatenate((self.rotate_set, self.flip_set)))
        self._plain_set = plain
        self._plain_rows = starts[plain]
        lr = np.array([f for f in self.flip_set if self.flip_axes[int(f)] == "left_right"],
                      dtype=int)
        ud = np.array([f for f in self.flip_set if self.flip_axes[int(f)] == "up_down"],
                      dtype=int)
        self._lr_pos = np.searchsorted(self.flip_set, lr)
        self._ud_pos = np.searchsorted(self.flip_set, ud)

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def conv_params(self) -> ConvParams:
        return ConvParams(self.weights, self.bias, self.stride, self.pad)

    def banks(self):
        """OrientationBank per pooled filter, rebuilt from current weights."""
        out = []
        for f in self.rotate_set:
            out.append(kt.build_orientation_bank(self.weights[f], "rotate8", int(f)))
        for f in self.flip_set:
            mode = "flip_lr" if self.flip_axes[int(f)] == "left_right" else "flip_ud"
            out.append(kt.build_orientation_bank(self.weights[f], mode, int(f)))
        return out

    # -- variant transforms ----------------------------------------------
    def _rotate(self, block, step):
        if block.shape[-1] == 3:
            return kt.rotate_kernel_45_ring(block, step)
        return kt.rotate_kernel_bilinear(block, 45.0 * step)

    def _rotate_back(self, block, step):
        if block.shape[-1] == 3:
            return kt.rotate_kernel_45_ring(block, (8 - step) % 8)
        return kt.rotate_kernel_bilinear_adjoint(block, 45.0 * step)

    def _expanded_weights(self):
        """Variant kernels of every filter, grouped per filter in index
        order: 8 rotations, or [original, flip], or the plain kernel."""
        o, c, k, _ = self.weights.shape
        exp = np.empty((self._total, c, k, k), dtype=self.weights.dtype)
        if self._plain_rows.size:
            exp[self._plain_rows] = self.weights[self._plain_set]
        if self.rotate_set.size:
            wr = self.weights[self.rotate_set]
            for s in range(8):
                exp[self._rot_rows[:, s]] = self._rotate(wr, s)
        if self.flip_set.size:
            wf = self.weights[self.flip_set]
            exp[self._flip_rows[:, 0]] = wf
            if self._lr_pos.size:
                exp[self._flip_rows[self._lr_pos, 1]] = kt.flip_kernel(
                    wf[self._lr_pos], "left_right")
            if self._ud_pos.size:
                exp[self._flip_rows[self._ud_pos, 1]] = kt.flip_kernel(
                    wf[self._ud_pos], "up_down")
        return exp

    def _expanded_bias(self):
        b = np.empty(self._total, dtype=self.bias.dtype)
        b[self._plain_rows] = self.bias[self._plain_set]
        b[self._rot_rows] = self.bias[self.rotate_set][:, None]
        b[self._flip_rows] = self.bias[self.flip_set][:, None]
        return b

    # -- forward / backward ----------------------------------------------
    def forward(self, x, cache):
        exp = self._expanded_weights()
        y_exp = conv2d_forward(x, ConvParams(exp, self._expanded_bias(),
                                             self.stride, self.pad))
        n, _, h, w = y_exp.shape
        o = self.weights.shape[0]
        out = np.empty((n, o, h, w), dtype=y_exp.dtype)
        if self._plain_rows.size:
            out[:, self._plain_set] = y_exp[:, self._plain_rows]
        rot_win = flip_win = None
        if self.rotate_set.size:
            v = y_exp[:, self._rot_rows.ravel()].reshape(n, -1, 8, h, w)
            rot_win = v.argmax(axis=2).astype(np.int8)
            out[:, self.rotate_set] = np.take_along_axis(
                v, rot_win[:, :, None].astype(np.intp), axis=2)[:, :, 0]
        if self.flip_set.size:
            v = y_exp[:, self._flip_rows.ravel()].reshape(n, -1, 2, h, w)
            flip_win = v.argmax(axis=2).astype(np.int8)
            out[:, self.flip_set] = np.take_along_axis(
                v, flip_win[:, :, None].astype(np.intp), axis=2)[:, :, 0]
        cache["x"] = x
        cache["exp_weights"] = exp
        cache["rot_win"] = rot_win
        cache["flip_win"] = flip_win
        cache["out_shape"] = out.shape
        return out

    def backward(self, grad_out, cache):
        if "exp_weights" not in cache:
            raise ConsistencyError(
                "orientation-pool backward called without a matching forward")
        if grad_out.shape != cache["out_shape"]:
            raise ConsistencyError(
                f"grad_out shape {grad_out.shape} does not match cached forward "
                f"output {cache['out_shape']}; stale cache?")
        x = cache["x"]
        exp = cache["exp_weights"]
        n, _, h, w = grad_out.shape
        g_exp = np.zeros((n, self._total, h, w), dtype=grad_out.dtype)
        if self._plain_rows.size:
            g_exp[:, self._plain_rows] = grad_out[:, self._plain_set]
        if self.rotate_set.size:
            block = np.zeros((n, self.rotate_set.size, 8, h, w), dtype=grad_out.dtype)
            np.put_along_axis(block, cache["rot_win"][:, :, None].astype(np.intp),
                              grad_out[:, self.rotate_set][:, :, None], axis=2)
            g_exp[:, self._rot_rows.ravel()] = block.reshape(n, -1, h, w)
        if self.flip_set.size:
            block = np.zeros((n, self.flip_set.size, 2, h, w), dtype=grad_out.dtype)
            np.put_along_axis(block, cache["flip_win"][:, :, None].astype(np.intp),
                              grad_out[:, self.flip_set][:, :, None], axis=2)
            g_exp[:, self._flip_rows.ravel()] = block.reshape(n, -1, h, w)

        gx, gw_exp, gb_exp = conv2d_backward(
            g_exp, x, ConvParams(exp, self._expanded_bias(), self.stride, self.pad))

        gw = np.zeros_like(self.weights)
        gb = np.zeros_like(self.bias)
        if self._plain_rows.size:
            gw[self._plain_set] = gw_exp[self._plain_rows]
            gb[self._plain_set] = gb_exp[self._plain_rows]
        if self.rotate_set.size:
            acc = np.zeros_like(gw[self.rotate_set], dtype=gw_exp.dtype)
            for s in range(8):
                acc += self._rotate_back(gw_exp[self._rot_rows[:, s]], s)
            gw[self.rotate_set] = acc
            gb[self.rotate_set] = gb_exp[self._rot_rows].sum(axis=1)
        if self.flip_set.size:
            acc = gw_exp[self._flip_rows[:, 0]].copy()
            if self._lr_pos.size:
                acc[self._lr_pos] += kt.flip_kernel(
                    gw_exp[self._flip_rows[self._lr_pos, 1]], "left_right")
            if self._ud_pos.size:
                acc[self._ud_pos] += kt.flip_kernel(
                    gw_exp[self._flip_rows[self._ud_pos, 1]], "up_down")
            gw[self.flip_set] = acc
            gb[self.flip_set] = gb_exp[self._flip_rows].sum(axis=1)
        self._accumulate("weights", gw)
        self._accumulate("bias", gb)
        return gx


class RpcConvLayer(_OrientedConv):
    """Rotate-pooling convolution: a fraction r of the output filters max
    over their 8 weight-shared rotations; the rest convolve normally."""

    kind = "rpc_conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 rotate_fraction=0.5, rng=None, dtype=np.float32):
        super().__init__(in_channels, out_channels, kernel, stride, pad,
                         rotate_fraction=rotate_fraction, flip_fraction=0.0,
                         rng=rng, dtype=dtype)

    @property
    def selected_indices(self):
        return self.rotate_set


class FrpcConvLayer(_OrientedConv):
    """Flip-rotate-pooling convolution: disjoint filter subsets pool over 8
    rotations or over {original, flipped}; flip axes alternate LR/UD."""

    kind = "frpc_conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0,
                 rotate_fraction=0.25, flip_fraction=0.25, rng=None,
                 dtype=np.float32):
        super().__init__(in_channels, out_channels, kernel, stride, pad,
                         rotate_fraction=rotate_fraction,
                         flip_fraction=flip_fraction, rng=rng, dtype=dtype)


class MaxPoolLayer(Layer):
    kind = "maxpool"

    def __init__(self, window: int, stride: int):
        super().__init__()
        self.window = window
        self.stride = stride

    def forward(self, x, cache):
        y, argmax = maxpool2d_forward(x, self.window, self.stride)
        cache["argmax"] = argmax
        cache["input_shape"] = x.shape
        return y

    def backward(self, grad_out, cache):
        if "argmax" not in cache:
            raise ConsistencyError("maxpool backward called without a matching forward")
        return maxpool2d_backward(grad_out, cache["argmax"], cache["input_shape"])


class ReluLayer(Layer):
    kind = "relu"

    def forward(self, x, cache):
        cache["x"] = x
        return relu_forward(x)

    def backward(self, grad_out, cache):
        return relu_backward(grad_out, cache["x"])


class PReluLayer(Layer):
    kind = "prelu"

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.slope = np.full(channels, 0.25, dtype)

    def params(self):
        return {"slope": self.slope}

    def forward(self, x, cache):
        cache["x"] = x
        return prelu_forward(x, self.slope)

    def backward(self, grad_out, cache):
        gx, gs = prelu_backward(grad_out, cache["x"], self.slope)
        self._accumulate("slope", gs)
        return gx


class FlattenLayer(Layer):
    kind = "flatten"

    def forward(self, x, cache):
        cache["input_shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out, cache):
        return grad_out.reshape(cache["input_shape"])


class FcLayer(Layer):
    kind = "fc"

    def __init__(self, in_features: int, out_features: int, dtype=np.float32):
        super().__init__()
        self.weights = np.zeros((out_features, in_features), dtype)
        self.bias = np.zeros(out_features, dtype)

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, cache):
        cache["x"] = x
        return fc_forward(x, self.weights, self.bias)

    def backward(self, grad_out, cache):
        if "x" not in cache:
            raise ConsistencyError("fc backward called without a matching forward")
        gx, gw, gb = fc_backward(grad_out, cache["x"], self.weights)
        self._accumulate("weights", gw)
        self._accumulate("bias", gb)
        return gx


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class NetworkSpec:
    """Ordered layer descriptors plus the input shape they apply to.

    Each descriptor is a dict with a 'kind' key (conv, rpc_conv, frpc_conv,
    maxpool, relu, prelu, flatten, fc, dropout) and that kind's
    hyperparameters; sizes that follow from the previous layer (input
    channels, fc input width) are inferred at build time.
    """

    input_shape: tuple  # (C, H, W)
    layers: list = None

    def __post_init__(self):
        if self.layers is None:
            self.layers = []
        if len(self.input_shape) != 3:
            raise ConfigError(
                f"input_shape must be (channels, height, width), got {self.input_shape}")


class Network:
    """Materialized layer stack; built by training.init_weights."""

    def __init__(self, layers: list, spec: NetworkSpec, seed: int):
        self.layers = layers
        self.spec = spec
        self.seed = seed
        self.inference = False
        self.data_rng = None  # shuffle stream, attached by init_weights

    def split_layers(self):
        return [i for i, l in enumerate(self.layers)
                if isinstance(l, DropoutLayer) and l.mode == "split"]

    def dropout_layers(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, DropoutLayer)]

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                yield i, name, arr

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def forward_inference(self, x: np.ndarray) -> np.ndarray:
        """Plain forward chain; requires dropout to have been folded away."""
        for layer in self.layers:
            if isinstance(layer, DropoutLayer):
                raise ConsistencyError(
                    "network still contains dropout layers; convert with "
                    "to_inference before evaluating")
            x = layer.forward(x, {})
        return x
