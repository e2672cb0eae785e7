"""Rotated and flipped kernel variants for orientation-pooling convolution.

The 45-degree rotation of a 3x3 kernel is an exact permutation: the 8 cells
surrounding the center form a ring and rotation is a cyclic shift of that
ring. Two ring steps compose to the exact 90-degree quarter turn, so the 8
variants form a cyclic group of order 8 and every group law holds bitwise.
Kernels larger than 3x3 fall back to bilinear resampling.

All transforms act on the trailing two (spatial) axes and apply identically
to every leading axis (channels, filters), so both [C,k,k] kernels and whole
[O,C,k,k] weight tensors can be passed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError

# Flat row-major indices of the 8 ring cells of a 3x3 grid, clockwise from
# the top-left corner: (0,0),(0,1),(0,2),(1,2),(2,2),(2,1),(2,0),(1,0).
RING_FLAT = np.array([0, 1, 2, 5, 8, 7, 6, 3])

FLIP_AXES = ("left_right", "up_down")


def _check_square(kernel: np.ndarray, op: str) -> int:
    if kernel.ndim < 2:
        raise DimensionError(f"{op}: kernel needs spatial axes, got shape {kernel.shape}")
    kh, kw = kernel.shape[-2], kernel.shape[-1]
    if kh != kw:
        raise DimensionError(f"{op}: spatial dims must be square, got {kh}x{kw}")
    return kh


def rotate_kernel_90(kernel: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Exact clockwise rotation by 90-degree multiples (index permutation)."""
    _check_square(kernel, "rotate_kernel_90")
    if quarter_turns not in (0, 1, 2, 3):
        raise InputError(f"quarter_turns must be in {{0,1,2,3}}, got {quarter_turns}")
    if quarter_turns == 0:
        return kernel.copy()
    return np.rot90(kernel, k=-quarter_turns, axes=(-2, -1)).copy()


def rotate_kernel_45_ring(kernel: np.ndarray, steps: int) -> np.ndarray:
    """Cyclic clockwise shift of the 8 ring cells of a 3x3 kernel.

    The center cell never moves; one step is 45 degrees, so steps=2 equals
    one exact quarter turn.
    """
    k = _check_square(kernel, "rotate_kernel_45_ring")
    if k != 3:
        raise DimensionError(f"ring rotation is defined for 3x3 kernels only, got {k}x{k}")
    if not 0 <= steps < 8:
        raise InputError(f"steps must be in [0, 8), got {steps}")
    flat = kernel.reshape(-1, 9)
    out = flat.copy()
    out[:, RING_FLAT] = flat[:, np.roll(RING_FLAT, steps)]
    return out.reshape(kernel.shape)


# ---------------------------------------------------------------------------
# Bilinear rotation for k > 3
# ---------------------------------------------------------------------------

def bilinear_rotation_map(k: int, degrees: float):
    """Sparse map of a clockwise rotation on a k x k grid.

    Returns (dest_idx, src_idx, weights): flat index arrays and tap weights
    such that out.flat[dest] += w * in.flat[src] realizes the rotation
    (inverse mapping about the grid center, up to 4 taps per destination
    cell; source coordinates outside the grid contribute nothing).
    """
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ctr = (k - 1) / 2.0
    rows, cols = np.mgrid[0:k, 0:k]
    u_d = cols.ravel() - ctr
    v_d = rows.ravel() - ctr
    u_s = u_d * cos_t + v_d * sin_t
    v_s = -u_d * sin_t + v_d * cos_t
    col_s = u_s + ctr
    row_s = v_s + ctr

    r0 = np.floor(row_s).astype(int)
    c0 = np.floor(col_s).astype(int)
    fr = row_s - r0
    fc = col_s - c0

    dest, src, wts = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < k) & (cc >= 0) & (cc < k) & (w > 0)
        dest.append(np.nonzero(ok)[0])
        src.append(rr[ok] * k + cc[ok])
        wts.append(w[ok])
    return np.concatenate(dest), np.concatenate(src), np.concatenate(wts)


def _apply_map(kernel: np.ndarray, dest, src, wts, transpose: bool) -> np.ndarray:
    k = kernel.shape[-1]
    flat = kernel.reshape(-1, k * k)
    out = np.zeros_like(flat, dtype=np.result_type(kernel, np.float64))
    if transpose:
        np.add.at(out, (slice(None), src), flat[:, dest] * wts)
    else:
        np.add.at(out, (slice(None), dest), flat[:, src] * wts)
    return out.reshape(kernel.shape).astype(kernel.dtype, copy=False)


def rotate_kernel_bilinear(kernel: np.ndarray, degrees: float) -> np.ndarray:
    """Clockwise rotation about the kernel center by bilinear resampling.

    Exact at lattice points, so multiples of 90 degrees agree with the
    index-permutation rotation to float precision. Cells whose source falls
    outside the kernel read 0.
    """
    k = _check_square(kernel, "rotate_kernel_bilinear")
    if k % 2 == 0:
        raise DimensionError(f"bilinear rotation needs an odd kernel size, got {k}")
    dest, src, wts = bilinear_rotation_map(k, degrees)
    return _apply_map(kernel, dest, src, wts, transpose=False)


def rotate_kernel_bilinear_adjoint(grad: np.ndarray, degrees: float) -> np.ndarray:
    """Transpose of the bilinear rotation map (routes variant gradients back
    to the source kernel)."""
    k = _check_square(grad, "rotate_kernel_bilinear_adjoint")
    if k % 2 == 0:
        raise DimensionError(f"bilinear rotation needs an odd kernel size, got {k}")
    dest, src, wts = bilinear_rotation_map(k, degrees)
    return _apply_map(grad, dest, src, wts, transpose=True)


def flip_kernel(kernel: np.ndarray, axis: str) -> np.ndarray:
    """Mirror the kernel spatially; axis is 'left_right' or 'up_down'."""
    _check_square(kernel, "flip_kernel")
    if axis == "left_right":
        return np.flip(kernel, axis=-1).copy()
    if axis == "up_down":
        return np.flip(kernel, axis=-2).copy()
    raise InputError(f"unknown flip axis {axis!r}, expected one of {FLIP_AXES}")


# ---------------------------------------------------------------------------
# Orientation banks
# ---------------------------------------------------------------------------

BANK_MODES = ("rotate8", "flip_lr", "flip_ud")


@dataclass
class OrientationBank:
    """Transformed variants of one kernel; index 0 is always untransformed.

    The variants are derived arrays, not independent parameters: rebuild the
    bank after every weight update so it reflects the shared source kernel.
    """

    variants: list = field(default_factory=list)
    mode: str = "rotate8"
    source_filter_index: int = -1

    def __len__(self):
        return len(self.variants)

    def pullback(self, variant_index: int, grad_variant: np.ndarray) -> np.ndarray:
        """Route a gradient w.r.t. variant `variant_index` back onto the
        source kernel (inverse permutation, or bilinear transpose)."""
        if self.mode == "rotate8":
            k = grad_variant.shape[-1]
            if k == 3:
                return rotate_kernel_45_ring(grad_variant, (8 - variant_index) % 8)
            return rotate_kernel_bilinear_adjoint(grad_variant, 45.0 * variant_index)
        if variant_index == 0:
            return grad_variant.copy()
        axis = "left_right" if self.mode == "flip_lr" else "up_down"
        return flip_kernel(grad_variant, axis)


def build_orientation_bank(kernel: np.ndarray, mode: str,
                           source_filter_index: int = -1) -> OrientationBank:
    """All transformed variants of a kernel under the given mode.

    rotate8: 8 rotations in 45-degree steps (ring permutation for 3x3,
    bilinear otherwise). flip_lr / flip_ud: the kernel and its mirror.
    """
    if mode not in BANK_MODES:
        raise InputError(f"unknown bank mode {mode!r}, expected one of {BANK_MODES}")
    k = _check_square(kernel, "build_orientation_bank")
    if mode == "rotate8":
        if k % 2 == 0:
            raise DimensionError(f"rotate8 needs an odd kernel size, got {k}")
        if k == 3:
            variants = [rotate_kernel_45_ring(kernel, s) for s in range(8)]
        else:
            variants = [rotate_kernel_bilinear(kernel, 45.0 * s) for s in range(8)]
    else:
        axis = "left_right" if mode == "flip_lr" else "up_down"
        variants = [kernel.copy(), flip_kernel(kernel, axis)]
    return OrientationBank(variants=variants, mode=mode,
                           source_filter_index=source_filter_index)
