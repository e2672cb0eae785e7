"""Training: branch enumeration for split dropout, SGD with momentum,
weight initialization, and the test-time conversion.

A network with n split-mode dropout layers defines 2^n subnetworks per
step: at every split layer the live activation forks into the masked part
and its complement, and both continue through the same downstream layers.
The step loss is the arithmetic mean of the per-branch cross-entropy
losses, so every parameter receives gradient every step. One mask is drawn
per dropout layer per batch and shared by all branches that reach it.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConsistencyError, InputError, NumericalAbort
from .layers import (ConvLayer, DropoutLayer, FcLayer, FlattenLayer,
                     FrpcConvLayer, Mask, MaxPoolLayer, Network, NetworkSpec,
                     PReluLayer, ReluLayer, RpcConvLayer,
                     dropout_forward_standard, sdropout_backward,
                     sdropout_forward)
from .tensor_core import conv_output_size, softmax, softmax_cross_entropy

WEIGHT_INIT_STD = 0.01
BIAS_INIT = 1.0


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD-with-momentum state; one velocity tensor per parameter tensor."""

    learning_rate: float = 0.2
    momentum: float = 0.9
    batch_size: int = 128
    velocities: dict = field(default_factory=dict)


def sgd_momentum_step(net: Network, state: OptimizerState):
    """v <- momentum*v - lr*g; theta <- theta + v, for every parameter."""
    for i, name, arr in net.named_params():
        g = net.layers[i].grads.get(name)
        if g is None:
            raise ConsistencyError(f"no gradient for layer {i} param {name!r}; "
                                   "run backward_training first")
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in layer {i} param {name!r}")
        key = (i, name)
        v = state.velocities.get(key)
        if v is None:
            v = np.zeros_like(arr)
        v = state.momentum * v - state.learning_rate * g.astype(arr.dtype, copy=False)
        state.velocities[key] = v
        arr += v
    return net


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _build_layer(desc: dict, shape, rng_select, rng_mask_seeds, dtype):
    """Construct one layer from its descriptor given the incoming shape.

    Returns (layer, output_shape). Shapes are (C, H, W) before flatten and
    (d,) after.
    """
    kind = desc.get("kind")
    d = dict(desc)
    d.pop("kind", None)

    def need(key, default=None):
        if key in d:
            return d.pop(key)
        if default is not None:
            return default
        raise ConfigError(f"layer {kind!r} is missing required field {key!r}")

    if kind in ("conv", "rpc_conv", "frpc_conv"):
        if len(shape) != 3:
            raise ConfigError(f"{kind} layer needs image input, got shape {shape}")
        c, h, w = shape
        out_ch = int(need("out_channels"))
        k = int(need("kernel"))
        stride = int(need("stride", 1))
        pad = int(need("pad", 0))
        if kind == "conv":
            layer = ConvLayer(c, out_ch, k, stride, pad, dtype=dtype)
        elif kind == "rpc_conv":
            layer = RpcConvLayer(c, out_ch, k, stride, pad,
                                 rotate_fraction=float(need("rotate_fraction", 0.5)),
                                 rng=rng_select, dtype=dtype)
        else:
            layer = FrpcConvLayer(c, out_ch, k, stride, pad,
                                  rotate_fraction=float(need("rotate_fraction", 0.25)),
                                  flip_fraction=float(need("flip_fraction", 0.25)),
                                  rng=rng_select, dtype=dtype)
        out = (out_ch, conv_output_size(h, k, stride, pad),
               conv_output_size(w, k, stride, pad))
    elif kind == "maxpool":
        c, h, w = shape
        win = int(need("window"))
        stride = int(need("stride", win))
        layer = MaxPoolLayer(win, stride)
        out = (c, (h - win) // stride + 1, (w - win) // stride + 1)
    elif kind == "relu":
        layer, out = ReluLayer(), shape
    elif kind == "prelu":
        layer, out = PReluLayer(shape[0], dtype=dtype), shape
    elif kind == "flatten":
        layer, out = FlattenLayer(), (int(np.prod(shape)),)
    elif kind == "fc":
        if len(shape) != 1:
            raise ConfigError(f"fc layer needs flat input, got shape {shape}")
        out_f = int(need("out_features"))
        layer, out = FcLayer(shape[0], out_f, dtype=dtype), (out_f,)
    elif kind == "dropout":
        layer = DropoutLayer(p=float(need("p", 0.5)),
                             mode=str(need("mode", "standard")),
                             rng=np.random.default_rng(rng_mask_seeds.pop(0)))
        out = shape
    else:
        raise ConfigError(f"unknown layer kind {kind!r}")
    if d:
        raise ConfigError(f"unknown fields for layer {kind!r}: {sorted(d)}")
    return layer, out


def init_weights(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    """Materialize a network: Gaussian(0, 0.01) weights, biases 1, PReLU
    slopes 0.25, with all random draws (init, filter selection, dropout
    masks, batch shuffling) on independent child streams of the seed."""
    ss = np.random.SeedSequence(seed)
    init_ss, select_ss, mask_ss, shuffle_ss = ss.spawn(4)
    rng_init = np.random.default_rng(init_ss)
    rng_select = np.random.default_rng(select_ss)
    n_dropout = sum(1 for l in spec.layers if l.get("kind") == "dropout")
    mask_seeds = list(mask_ss.spawn(max(n_dropout, 1)))

    layers = []
    shape = tuple(spec.input_shape)
    for desc in spec.layers:
        layer, shape = _build_layer(desc, shape, rng_select, mask_seeds, dtype)
        layers.append(layer)

    for layer in layers:
        for name, arr in layer.params().items():
            if name == "weights":
                arr[...] = rng_init.normal(0.0, WEIGHT_INIT_STD, arr.shape)
            elif name == "bias":
                arr[...] = BIAS_INIT
            elif name == "slope":
                arr[...] = 0.25

    net = Network(layers, spec, seed)
    net.data_rng = np.random.default_rng(shuffle_ss)
    return net


# ---------------------------------------------------------------------------
# Branched forward / backward
# ---------------------------------------------------------------------------

@dataclass
class BranchSet:
    """The 2^n activation streams of one training forward pass.

    Each branch is tagged with its mask-sign path: +1 where it took the
    masked side of a split layer, -1 where it took the complement.
    """

    branches: list            # leaf records, in deterministic DFS order
    root: dict                # segment tree used by backward_training
    net: Network
    n_split: int
    loss: float
    masks: dict               # layer index -> Mask used this step
    input_grad: np.ndarray = None  # set by backward_training

    def __len__(self):
        return len(self.branches)


def _mask_for(net, masks, idx, width, pinned):
    if idx in masks:
        return masks[idx]
    layer = net.layers[idx]
    if pinned is not None and idx in pinned:
        m = pinned[idx]
        if not isinstance(m, Mask):
            m = Mask(bits=np.asarray(m, dtype=np.float32), p=layer.p)
        masks[idx] = m
    else:
        masks[idx] = layer.draw_mask(width)
    return masks[idx]


def _walk(net, idx, act, labels, masks, pinned, path, leaves):
    caches = []
    i = idx
    while i < len(net.layers):
        layer = net.layers[i]
        if isinstance(layer, DropoutLayer):
            mask = _mask_for(net, masks, i, act.shape[1], pinned)
            if layer.mode == "split":
                y1, y2, _ = sdropout_forward(act, layer, mask)
                node = {"kind": "split", "layer": i, "mask": mask, "caches": caches}
                node["kept"] = _walk(net, i + 1, y1, labels, masks, pinned,
                                     path + (+1,), leaves)
                node["complement"] = _walk(net, i + 1, y2, labels, masks, pinned,
                                           path + (-1,), leaves)
                return node
            act, _ = dropout_forward_standard(act, layer, True, mask)
            caches.append((i, {"mask": mask}))
        else:
            cache = {}
            act = layer.forward(act, cache)
            caches.append((i, cache))
        i += 1
    loss, grad = softmax_cross_entropy(act, labels)
    leaf = {"kind": "leaf", "path": path, "logits": act, "loss": loss,
            "ce_grad": grad, "caches": caches}
    leaves.append(leaf)
    return leaf


def forward_training(net: Network, batch: np.ndarray, labels: np.ndarray,
                     pinned_masks: dict = None):
    """Run the branched training forward pass.

    Returns (loss, BranchSet) where loss is the mean of the per-branch
    cross-entropy losses (2^n branches for n split layers). pinned_masks
    maps dropout layer indices to fixed masks, used by the oracle checks;
    unpinned layers draw from their own streams.
    """
    if net.inference:
        raise ConsistencyError("network was converted for inference; cannot train")
    masks, leaves = {}, []
    root = _walk(net, 0, batch, labels, masks, pinned_masks, (), leaves)
    n_split = len(net.split_layers())
    if len(leaves) != 2 ** n_split:
        raise ConsistencyError(
            f"branch bookkeeping error: {len(leaves)} leaves for {n_split} split layers")
    loss = math.fsum(l["loss"] for l in leaves) / len(leaves)
    return loss, BranchSet(branches=leaves, root=root, net=net,
                           n_split=n_split, loss=loss, masks=masks)


def _backprop(node, net, scale):
    if node["kind"] == "leaf":
        g = node["ce_grad"] * scale
    else:
        g1 = _backprop(node["kept"], net, scale)
        g2 = _backprop(node["complement"], net, scale)
        g = sdropout_backward(g1, g2, node["mask"])
    for i, cache in reversed(node["caches"]):
        layer = net.layers[i]
        if isinstance(layer, DropoutLayer):
            g = g * cache["mask"].bits.astype(g.dtype, copy=False)
        else:
            g = layer.backward(g, cache)
    return g


def backward_training(branch_set: BranchSet):
    """Backpropagate every branch and accumulate parameter gradients.

    Branch gradients are averaged (each leaf weighted 1/2^n, matching the
    loss), so layer.grads afterwards holds the exact gradient of the
    returned loss. Returns {(layer_index, name): gradient} for inspection.
    """
    net = branch_set.net
    branch_set.input_grad = _backprop(branch_set.root, net,
                                      1.0 / len(branch_set.branches))
    return {(i, name): net.layers[i].grads[name]
            for i, name, _ in net.named_params()}


def mean_branch_probabilities(branch_set: BranchSet) -> np.ndarray:
    """Softmax probabilities averaged over all branches of the step."""
    acc = None
    for leaf in branch_set.branches:
        p = np.asarray(softmax(leaf["logits"]), dtype=np.float64)
        acc = p if acc is None else acc + p
    return acc / len(branch_set.branches)


# ---------------------------------------------------------------------------
# Test-time conversion
# ---------------------------------------------------------------------------

def to_inference(net: Network) -> Network:
    """Fold dropout away: remove the layers and scale the next weighted
    layer by the keep probability p.

    ReLU/PReLU/pooling between the dropout and the weighted layer commute
    with positive scaling, so carrying p past them is exact. Returns a new
    network; the trained one is untouched. Converting twice is refused.
    """
    if net.inference:
        raise ConsistencyError("network is already an inference representation")
    new = copy.deepcopy(net)
    kept, pending_scale = [], None
    for layer in new.layers:
        if isinstance(layer, DropoutLayer):
            pending_scale = layer.p if pending_scale is None else pending_scale * layer.p
            continue
        if pending_scale is not None and "weights" in layer.params():
            layer.weights *= pending_scale
            pending_scale = None
        kept.append(layer)
    if pending_scale is not None:
        raise ConfigError("dropout layer has no following weighted layer to scale")
    new.layers = kept
    new.inference = True
    return new


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------

def train_epoch(net: Network, images: np.ndarray, labels: np.ndarray,
                state: OptimizerState):
    """One pass over the data in shuffled mini-batches.

    Returns {'loss': ..., 'top1': ...} running averages. Top-1 uses the
    branch-averaged probabilities, which reduces to the plain prediction
    when no split layers are present.
    """
    n = images.shape[0]
    if n == 0:
        raise InputError("empty dataset")
    perm = net.data_rng.permutation(n)
    loss_sum, correct = 0.0, 0
    for start in range(0, n, state.batch_size):
        idx = perm[start:start + state.batch_size]
        x, y = images[idx], labels[idx]
        net.zero_grads()
        loss, branches = forward_training(net, x, y)
        if not np.isfinite(loss):
            raise NumericalAbort(f"non-finite training loss {loss!r}")
        backward_training(branches)
        sgd_momentum_step(net, state)
        loss_sum += loss * len(idx)
        preds = mean_branch_probabilities(branches).argmax(axis=1)
        correct += int((preds == y).sum())
    return {"loss": loss_sum / n, "top1": correct / n}


@dataclass
class LrSchedule:
    """Learning-rate schedule: 'fixed', or 'plateau' which multiplies the
    rate by `factor` after `patience` epochs without improvement of the
    monitored loss (validation loss when a validation split is given,
    training loss otherwise)."""

    kind: str = "plateau"
    factor: float = 0.1
    patience: int = 2

    def __post_init__(self):
        if self.kind not in ("fixed", "plateau"):
            raise ConfigError(f"schedule kind must be 'fixed' or 'plateau', got {self.kind!r}")


def _eval_metrics(inf_net: Network, images, labels, batch_size):
    loss_sum, correct, n = 0.0, 0, images.shape[0]
    for start in range(0, n, batch_size):
        x = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        logits = inf_net.forward_inference(x)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return {"loss": loss_sum / n, "top1": correct / n}


def fit(net: Network, images, labels, state: OptimizerState, epochs: int,
        schedule: LrSchedule = None, val_images=None, val_labels=None):
    """Train for a number of epochs with an optional plateau schedule.

    Returns per-epoch metric rows as dicts with keys epoch, split, loss,
    top1 (split is 'train' or 'val'). Validation metrics come from a
    throwaway inference copy of the current weights.
    """
    schedule = schedule or LrSchedule(kind="fixed")
    rows, best, stall = [], float("inf"), 0
    for epoch in range(1, epochs + 1):
        metrics = train_epoch(net, images, labels, state)
        rows.append({"epoch": epoch, "split": "train",
                     "loss": metrics["loss"], "top1": metrics["top1"]})
        monitored = metrics["loss"]
        if val_images is not None:
            vm = _eval_metrics(to_inference(net), val_images, val_labels,
                               state.batch_size)
            rows.append({"epoch": epoch, "split": "val",
                         "loss": vm["loss"], "top1": vm["top1"]})
            monitored = vm["loss"]
        if schedule.kind == "plateau":
            if monitored < best - 1e-6:
                best, stall = monitored, 0
            else:
                stall += 1
                if stall >= schedule.patience:
                    state.learning_rate *= schedule.factor
                    stall = 0
    return rows
