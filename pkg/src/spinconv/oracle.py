"""Brute-force reference implementations, used only by tests and the
gradcheck command.

Everything here favors obviousness over speed: explicit sliding-window
loops, per-coordinate central differences, exhaustive mask enumeration.
None of it shares layout tricks with the main path; comparisons call only
the public forward/backward entry points of the modules under test.
"""
from __future__ import annotations

import copy
import itertools
import math

import numpy as np

from .errors import ConfigError, ConsistencyError, InputError
from .layers import (ConvLayer, DropoutLayer, FcLayer, MaxPoolLayer, Network,
                     NetworkSpec, PReluLayer, RpcConvLayer, FrpcConvLayer)
from .tensor_core import ConvParams, relu_backward, relu_forward
from .training import backward_training, forward_training

EPSILON_DEFAULT = 1e-3
GRAD_CHECK_KINDS = ("conv", "fc", "relu", "prelu", "maxpool", "sdropout",
                    "rpc", "frpc")


def relative_error(a, b):
    """|a - b| / max(|a|, |b|, 1e-8), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


# ---------------------------------------------------------------------------
# Reference forward passes
# ---------------------------------------------------------------------------

def naive_conv(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Direct sliding-window convolution, quadruple loop, double precision."""
    n, c, h, w = x.shape
    o, _, k, _ = params.weights.shape
    stride, pad = params.stride, params.pad
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    wts = np.asarray(params.weights, dtype=np.float64)
    bias = np.asarray(params.bias, dtype=np.float64)
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise InputError(f"no output positions for input {h}x{w}, kernel {k}, "
                         f"stride {stride}, pad {pad}")
    y = np.empty((n, o, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for f in range(o):
            for i in range(h_out):
                for j in range(w_out):
                    win = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    y[b, f, i, j] = np.sum(win * wts[f]) + bias[f]
    return y


def naive_maxpool(x: np.ndarray, window: int, stride: int):
    """Exhaustive window scan; first maximum in row-major order wins."""
    n, c, h, w = x.shape
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1
    y = np.empty((n, c, h_out, w_out), dtype=x.dtype)
    arg = np.empty((n, c, h_out, w_out), dtype=int)
    for b in range(n):
        for ch in range(c):
            for i in range(h_out):
                for j in range(w_out):
                    best, best_idx = None, -1
                    for di in range(window):
                        for dj in range(window):
                            r, co = i * stride + di, j * stride + dj
                            v = x[b, ch, r, co]
                            if best is None or v > best:
                                best, best_idx = v, r * w + co
                    y[b, ch, i, j] = best
                    arg[b, ch, i, j] = best_idx
    return y, arg


def oriented_conv_reference(x: np.ndarray, layer) -> np.ndarray:
    """Max over separately convolved bank variants, filter by filter.

    Starts from the plain naive convolution and overwrites each pooled
    filter's map with the explicit max of its variants' responses.
    """
    y = naive_conv(x, layer.conv_params())
    for bank in layer.banks():
        f = bank.source_filter_index
        resps = [naive_conv(x, ConvParams(v[None], layer.bias[f:f + 1],
                                          layer.stride, layer.pad))[:, 0]
                 for v in bank.variants]
        y[:, f] = np.max(np.stack(resps, axis=0), axis=0)
    return y


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference(fn, params: np.ndarray, epsilon: float = EPSILON_DEFAULT):
    """Central-difference gradient of a scalar function over every
    coordinate of `params` (perturbed in place and restored)."""
    flat = params.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = fn()
        flat[i] = orig - epsilon
        f_minus = fn()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad.reshape(params.shape)


class _WinnerFlip(Exception):
    """A finite-difference probe changed an argmax decision; the random
    case must be redrawn."""


def _probe_coords(fn, arr, analytic, rng, n_coords, epsilon, guard=None):
    """Max relative error between sampled central differences and the
    analytic gradient. `guard()` returns a token of the discrete decisions
    inside fn; if a probe changes it, the case is rejected."""
    flat = arr.reshape(-1)
    ana = np.asarray(analytic, dtype=np.float64).reshape(-1)
    idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    base_token = guard() if guard is not None else None
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = fn()
        if guard is not None and guard() != base_token:
            flat[i] = orig
            raise _WinnerFlip
        flat[i] = orig - epsilon
        f_minus = fn()
        if guard is not None and guard() != base_token:
            flat[i] = orig
            raise _WinnerFlip
        flat[i] = orig
        est = (f_plus - f_minus) / (2.0 * epsilon)
        worst = max(worst, float(relative_error(est, ana[i])))
    return worst, len(idx)


def _projection(rng, shape):
    """Random grad_out with entries bounded away from zero."""
    return (rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape))


def _away_from_zero(x, margin):
    return x + np.sign(x) * margin


# ---------------------------------------------------------------------------
# Per-layer gradient checks
# ---------------------------------------------------------------------------

def _check_conv(seed, epsilon):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (2, 3, 6, 7))
    layer = ConvLayer(3, 4, 3, stride=2, pad=1, dtype=np.float64)
    layer.weights[...] = rng.normal(0.0, 0.5, layer.weights.shape)
    layer.bias[...] = rng.normal(0.0, 0.5, layer.bias.shape)
    cache = {}
    y = layer.forward(x, cache)
    proj = _projection(rng, y.shape)
    layer.grads = {}
    gx = layer.backward(proj, cache)

    def fn():
        return float(np.sum(layer.forward(x, {}) * proj))

    worst, n = 0.0, 0
    for arr, ana, quota in ((x, gx, 50), (layer.weights, layer.grads["weights"], 50),
                            (layer.bias, layer.grads["bias"], 4)):
        w, c = _probe_coords(fn, arr, ana, rng, quota, epsilon)
        worst, n = max(worst, w), n + c
    return worst, n


def _check_fc(seed, epsilon):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (5, 9))
    layer = FcLayer(9, 7, dtype=np.float64)
    layer.weights[...] = rng.normal(0.0, 0.5, layer.weights.shape)
    layer.bias[...] = rng.normal(0.0, 0.5, layer.bias.shape)
    cache = {}
    y = layer.forward(x, cache)
    proj = _projection(rng, y.shape)
    layer.grads = {}
    gx = layer.backward(proj, cache)

    def fn():
        return float(np.sum(layer.forward(x, {}) * proj))

    worst, n = 0.0, 0
    for arr, ana, quota in ((x, gx, 45), (layer.weights, layer.grads["weights"], 55),
                            (layer.bias, layer.grads["bias"], 7)):
        w, c = _probe_coords(fn, arr, ana, rng, quota, epsilon)
        worst, n = max(worst, w), n + c
    return worst, n


def _check_relu(seed, epsilon):
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng.normal(0.0, 1.0, (3, 4, 5, 5)), 0.05)
    proj = _projection(rng, x.shape)
    gx = relu_backward(proj, x)

    def fn():
        return float(np.sum(relu_forward(x) * proj))

    return _probe_coords(fn, x, gx, rng, 110, epsilon)


def _check_prelu(seed, epsilon):
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng.normal(0.0, 1.0, (3, 6, 4, 4)), 0.05)
    layer = PReluLayer(6, dtype=np.float64)
    layer.slope[...] = rng.uniform(0.1, 0.4, 6)
    cache = {}
    y = layer.forward(x, cache)
    proj = _projection(rng, y.shape)
    layer.grads = {}
    gx = layer.backward(proj, cache)

    def fn():
        return float(np.sum(layer.forward(x, {}) * proj))

    worst, n = 0.0, 0
    for arr, ana, quota in ((x, gx, 100), (layer.slope, layer.grads["slope"], 6)):
        w, c = _probe_coords(fn, arr, ana, rng, quota, epsilon)
        worst, n = max(worst, w), n + c
    return worst, n


def _check_maxpool(seed, epsilon):
    rng = np.random.default_rng(seed)
    # distinct values with gaps far beyond epsilon, so winners cannot flip
    x = 0.01 * rng.permutation(2 * 3 * 6 * 6).astype(np.float64).reshape(2, 3, 6, 6)
    x -= x.mean()
    layer = MaxPoolLayer(3, 2)
    cache = {}
    y = layer.forward(x, cache)
    proj = _projection(rng, y.shape)
    gx = layer.backward(proj, cache)

    def fn():
        return float(np.sum(layer.forward(x, {}) * proj))

    def guard():
        c = {}
        layer.forward(x, c)
        return c["argmax"].tobytes()

    return _probe_coords(fn, x, gx, rng, 108, epsilon, guard=guard)


def _check_sdropout(seed, epsilon):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.5, (4, 6))
    labels = rng.integers(0, 3, 4)
    fc1 = FcLayer(6, 8, dtype=np.float64)
    fc1.weights[...] = rng.normal(0.0, 0.5, fc1.weights.shape)
    fc1.bias[...] = rng.normal(0.0, 0.3, 8)
    drop = DropoutLayer(p=0.5, mode="split", rng=np.random.default_rng(seed + 1))
    fc2 = FcLayer(8, 3, dtype=np.float64)
    fc2.weights[...] = rng.normal(0.0, 0.5, fc2.weights.shape)
    fc2.bias[...] = rng.normal(0.0, 0.3, 3)
    spec = NetworkSpec(input_shape=(6, 1, 1), layers=[])
    net = Network([fc1, drop, fc2], spec, seed)
    bits = (rng.random(8) < 0.5).astype(np.float32)
    pinned = {1: bits}

    def fn():
        return forward_training(net, x, labels, pinned_masks=pinned)[0]

    net.zero_grads()
    _, branches = forward_training(net, x, labels, pinned_masks=pinned)
    grads = backward_training(branches)

    worst, n = 0.0, 0
    targets = ((x, branches.input_grad, 24),
               (fc1.weights, grads[(0, "weights")], 48),
               (fc1.bias, grads[(0, "bias")], 8),
               (fc2.weights, grads[(2, "weights")], 24),
               (fc2.bias, grads[(2, "bias")], 3))
    for arr, ana, quota in targets:
        w, c = _probe_coords(fn, arr, ana, rng, quota, epsilon)
        worst, n = max(worst, w), n + c
    return worst, n


def _oriented_case(seed, epsilon, flip):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (2, 2, 5, 5))
    cls = FrpcConvLayer if flip else RpcConvLayer
    kwargs = dict(rotate_fraction=0.25, flip_fraction=0.25) if flip \
        else dict(rotate_fraction=0.5)
    layer = cls(2, 4, 3, stride=1, pad=1, rng=np.random.default_rng(seed + 7),
                dtype=np.float64, **kwargs)
    layer.weights[...] = rng.normal(0.0, 0.7, layer.weights.shape)
    layer.bias[...] = rng.normal(0.0, 0.3, layer.bias.shape)
    cache = {}
    y = layer.forward(x, cache)
    proj = _projection(rng, y.shape)
    layer.grads = {}
    gx = layer.backward(proj, cache)

    def fn():
        return float(np.sum(layer.forward(x, {}) * proj))

    def guard():
        c = {}
        layer.forward(x, c)
        parts = []
        for key in ("rot_win", "flip_win"):
            parts.append(c[key].tobytes() if c[key] is not None else b"")
        return tuple(parts)

    worst, n = 0.0, 0
    for arr, ana, quota in ((x, gx, 50), (layer.weights, layer.grads["weights"], 48),
                            (layer.bias, layer.grads["bias"], 4)):
        w, c = _probe_coords(fn, arr, ana, rng, quota, epsilon, guard=guard)
        worst, n = max(worst, w), n + c
    return worst, n


def _check_rpc(seed, epsilon):
    return _oriented_case(seed, epsilon, flip=False)


def _check_frpc(seed, epsilon):
    return _oriented_case(seed, epsilon, flip=True)


_CHECKS = {"conv": _check_conv, "fc": _check_fc, "relu": _check_relu,
           "prelu": _check_prelu, "maxpool": _check_maxpool,
           "sdropout": _check_sdropout, "rpc": _check_rpc, "frpc": _check_frpc}


def gradient_suite(seed: int = 0, kinds=None, epsilon: float = EPSILON_DEFAULT):
    """Finite-difference check per layer kind.

    Returns a list of {'layer', 'max_rel', 'coords'} dicts. Cases whose
    argmax decisions flip under probing are redrawn with a fresh seed
    (deterministically) rather than silently tolerated.
    """
    kinds = list(kinds) if kinds else list(GRAD_CHECK_KINDS)
    unknown = [k for k in kinds if k not in _CHECKS]
    if unknown:
        raise InputError(f"unknown layer kind(s) {unknown}; valid: "
                         f"{sorted(_CHECKS)}")
    results = []
    for kind in kinds:
        for attempt in range(25):
            try:
                max_rel, coords = _CHECKS[kind](seed + 997 * attempt, epsilon)
                break
            except _WinnerFlip:
                continue
        else:
            raise ConsistencyError(
                f"no probe-stable random case found for {kind!r} after 25 draws")
        results.append({"layer": kind, "max_rel": max_rel, "coords": coords})
    return results


# ---------------------------------------------------------------------------
# Exhaustive mask enumeration
# ---------------------------------------------------------------------------

def split_loss_reference(net: Network, batch, labels, bits) -> float:
    """(f(m) + f(1-m)) / 2 with f evaluated by two independent
    standard-dropout forward passes under pinned masks."""
    std = _mode_copy(net, "standard")
    idx = std.dropout_layers()[0]
    bits = np.asarray(bits, dtype=np.float32)
    f_m = forward_training(std, batch, labels, pinned_masks={idx: bits})[0]
    f_c = forward_training(std, batch, labels, pinned_masks={idx: 1 - bits})[0]
    return (f_m + f_c) / 2.0


def _mode_copy(net: Network, mode: str) -> Network:
    out = copy.deepcopy(net)
    for i in out.dropout_layers():
        out.layers[i].mode = mode
    return out


def enumerate_mask_losses(tiny_net: Network, batch, labels):
    """Exhaustively average the training loss over every possible mask.

    Returns (L_dropout, L_sdropout): the expected loss under standard
    dropout and under the split variant, each computed by the real
    training forward pass with the mask pinned to every one of the 2^d
    values. At p = 0.5 the two must agree to double-precision accuracy.
    """
    drop_idx = tiny_net.dropout_layers()
    if len(drop_idx) != 1:
        raise InputError(f"enumeration needs exactly one dropout layer, "
                         f"found {len(drop_idx)}")
    idx = drop_idx[0]
    if tiny_net.layers[idx].p != 0.5:
        raise ConfigError("mask enumeration is meaningful only at p = 0.5")

    std = _mode_copy(tiny_net, "standard")
    split = _mode_copy(tiny_net, "split")
    probe = forward_training(split, batch, labels)[1]
    d = len(probe.masks[idx])
    if d > 12:
        raise InputError(f"{d} split units would need 2^{d} forward passes; "
                         "limit is 12")

    std_losses, split_losses = [], []
    for combo in itertools.product((1.0, 0.0), repeat=d):
        bits = np.asarray(combo, dtype=np.float32)
        std_losses.append(forward_training(std, batch, labels,
                                           pinned_masks={idx: bits})[0])
        split_losses.append(forward_training(split, batch, labels,
                                             pinned_masks={idx: bits})[0])
    scale = 1.0 / len(std_losses)
    return math.fsum(std_losses) * scale, math.fsum(split_losses) * scale
