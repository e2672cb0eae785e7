"""Checkpoint container: every parameter tensor, the layer selection sets,
the seed, and the mode flags.

Binary layout: 8-byte magic "SPINCONV", little-endian u32 format version
(currently 1), little-endian u32 header length, UTF-8 JSON header, then the
tensors as raw little-endian float32 in header order.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError, FormatError
from .layers import NetworkSpec, _OrientedConv
from .training import init_weights

MAGIC = b"SPINCONV"
FORMAT_VERSION = 1


def _selections(net):
    out = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, _OrientedConv):
            out[str(i)] = {
                "rotate": [int(f) for f in layer.rotate_set],
                "flip_axes": {str(f): ax for f, ax in sorted(layer.flip_axes.items())},
            }
    return out


def save_checkpoint(net, path, mean_image: np.ndarray = None, extra: dict = None):
    """Write the network (and optionally the training-split mean image).

    Only the training representation is stored; converted inference
    networks have their dropout folded into the weights and cannot be
    rebuilt from the layer list.
    """
    if net.inference:
        raise ConfigError("checkpoints store the training representation; "
                          "save before converting with to_inference")
    tensors = [{"layer": i, "name": name, "shape": list(arr.shape)}
               for i, name, arr in net.named_params()]
    payload = [arr for _, _, arr in net.named_params()]
    if mean_image is not None:
        tensors.append({"layer": -1, "name": "mean_image",
                        "shape": list(mean_image.shape)})
        payload.append(mean_image)
    header = {
        "format_version": FORMAT_VERSION,
        "seed": net.seed,
        "inference": bool(net.inference),
        "input_shape": list(net.spec.input_shape),
        "layers": net.spec.layers,
        "selections": _selections(net),
        "tensors": tensors,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for arr in payload:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, count, path):
    data = f.read(count)
    if len(data) != count:
        raise OSError(f"truncated checkpoint {path}: wanted {count} more bytes, "
                      f"got {len(data)}")
    return data


def load_checkpoint(path):
    """Rebuild the network from a checkpoint.

    Returns (net, meta) where meta carries the mean image (or None) and the
    raw header. The network is reconstructed through the normal build path
    from the stored spec and seed, then the stored selections and tensors
    overwrite the freshly drawn state.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, path)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} in {path}")
        version, header_len = struct.unpack("<II", _read_exact(f, 8, path))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} in {path}")
        try:
            header = json.loads(_read_exact(f, header_len, path).decode("utf-8"))
        except ValueError as e:
            raise FormatError(f"unreadable checkpoint header in {path}: {e}") from e

        spec = NetworkSpec(input_shape=tuple(header["input_shape"]),
                           layers=header["layers"])
        net = init_weights(spec, int(header["seed"]))
        for idx, sel in header.get("selections", {}).items():
            layer = net.layers[int(idx)]
            layer.set_selection(sel["rotate"],
                                {int(k): v for k, v in sel["flip_axes"].items()})
        net.inference = bool(header.get("inference", False))

        mean_image = None
        params = {(i, name): arr for i, name, arr in net.named_params()}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 4 * count, path)
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            if entry["name"] == "mean_image":
                mean_image = arr.astype(np.float32)
                continue
            key = (entry["layer"], entry["name"])
            if key not in params:
                raise FormatError(f"checkpoint tensor {key} has no home in the "
                                  f"rebuilt network ({path})")
            target = params[key]
            if target.shape != shape:
                raise FormatError(
                    f"checkpoint tensor {key} has shape {shape}, network "
                    f"expects {target.shape} ({path})")
            target[...] = arr
    meta = {"mean_image": mean_image, "header": header}
    return net, meta
