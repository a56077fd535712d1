"""2D operators over SPS tensors, with dense reference implementations.

Every sparse operator updates only the active rows; the passive rows and the
index map pass through untouched (feature halving is the one exception, since
it changes the feature size of every row). Each operator has a dense twin
(``dense_*``) acting on a plain ``[F, H, W]`` array, used as the equivalence
oracle and as the dense pipeline route.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import SpsTensor

ACTIVATIONS = ("none", "relu")


@dataclass
class LinearTransform:
    """Affine map ``rows @ W.T + b`` with an optional relu."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ContractError("linear transform needs [F_out, F_in] weights and [F_out] bias")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ContractError("linear transform entries must be finite")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def f_in(self) -> int:
        return self.weights.shape[1]

    @property
    def f_out(self) -> int:
        return self.weights.shape[0]

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape[-1] != self.f_in:
            raise ContractError(f"expected {self.f_in} input features, got {rows.shape[-1]}")
        out = rows @ self.weights.T + self.bias
        if self.activation == "relu":
            out = np.maximum(out, 0.0)
        return out


TransformChain = LinearTransform | Sequence[LinearTransform]


def apply_chain(transform: TransformChain, rows: np.ndarray) -> np.ndarray:
    if isinstance(transform, LinearTransform):
        return transform.apply(rows)
    for t in transform:
        rows = t.apply(rows)
    return rows


def _chain_ends(transform: TransformChain) -> tuple[int, int]:
    if isinstance(transform, LinearTransform):
        return transform.f_in, transform.f_out
    ts = list(transform)
    if not ts:
        raise ContractError("empty transform chain")
    return ts[0].f_in, ts[-1].f_out


@dataclass
class ConvKernel:
    """``K x K`` convolution weights with a dilation; K must be odd."""

    weights: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ContractError("conv weights must be [F_out, F_in, K, K]")
        if self.weights.shape[2] % 2 != 1:
            raise ContractError("kernel size must be odd")
        if self.bias.shape != (self.weights.shape[0],):
            raise ContractError("conv bias must be [F_out]")
        if self.dilation < 1:
            raise ContractError("dilation must be >= 1")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ContractError("conv kernel entries must be finite")

    @property
    def f_in(self) -> int:
        return self.weights.shape[1]

    @property
    def f_out(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[2]


@dataclass
class OffsetField:
    """Per-active-cell fractional sampling offsets, ``K*K`` (dy, dx) per cell.

    Offsets displace the kernel's regular (dilated) tap grid, so an all-zero
    field reproduces the plain convolution.
    """

    offsets: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.ndim != 3 or self.offsets.shape[2] != 2:
            raise ContractError("offsets must be [N_active, K*K, 2]")
        if not np.all(np.isfinite(self.offsets)):
            raise ContractError("offsets must be finite")


def _tap_offsets(k: int, dilation: int) -> np.ndarray:
    r = k // 2
    grid = np.arange(-r, r + 1) * dilation
    dy, dx = np.meshgrid(grid, grid, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)  # [K*K, 2], row-major taps


def _gather_taps(s: SpsTensor, coords: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Integer-tap gather: ``[N, T, F]`` neighbor rows, zero outside the grid."""
    ny = coords[:, 0:1] + taps[None, :, 0]
    nx = coords[:, 1:2] + taps[None, :, 1]
    inside = (ny >= 0) & (ny < s.h) & (nx >= 0) & (nx < s.w)
    rows = s.rows()
    flat = np.where(inside, s.index_map.astype(np.int64)[ny.clip(0, s.h - 1), nx.clip(0, s.w - 1)], 0)
    gathered = rows[flat]
    gathered[~inside] = 0.0
    return gathered


def _contract(gathered: np.ndarray, k: ConvKernel) -> np.ndarray:
    w = k.weights.reshape(k.f_out, k.f_in, k.k * k.k)
    return np.einsum("nti,oit->no", gathered, w, optimize=True) + k.bias


def pointwise(s: SpsTensor, t: LinearTransform) -> SpsTensor:
    """Apply a linear layer to the active rows only."""
    if t.f_in != s.f:
        raise ContractError(f"transform expects F={t.f_in}, tensor has F={s.f}")
    if t.f_out != s.f and s.n_passive > 0:
        raise ContractError("feature-size-changing pointwise is only legal on fully-active tensors")
    return SpsTensor(active=t.apply(s.active), passive=s.passive, index_map=s.index_map)


def halve_features(s: SpsTensor, t: LinearTransform) -> SpsTensor:
    """Project every row (active and passive) from F to F/2 with one shared map."""
    if s.f % 2 != 0:
        raise ContractError(f"feature size {s.f} is odd, cannot halve")
    if t.f_in != s.f or t.f_out != s.f // 2:
        raise ContractError(f"halving transform must map {s.f} -> {s.f // 2}")
    return SpsTensor(active=t.apply(s.active), passive=t.apply(s.passive), index_map=s.index_map)


def conv2d_sparse(s: SpsTensor, k: ConvKernel) -> SpsTensor:
    """Dilated 2D convolution evaluated at the active cells via the index map."""
    if k.f_in != s.f:
        raise ContractError(f"kernel expects F_in={k.f_in}, tensor has F={s.f}")
    if k.f_out != s.f:
        raise ContractError("conv output feature size must equal input (residual-compatible)")
    if s.n_active == 0:
        return s
    coords = s.active_coords()
    gathered = _gather_taps(s, coords, _tap_offsets(k.k, k.dilation))
    return SpsTensor(active=_contract(gathered, k), passive=s.passive, index_map=s.index_map)


def deform_conv_sparse(s: SpsTensor, k: ConvKernel, off: OffsetField) -> SpsTensor:
    """Deformable convolution: taps displaced per cell, bilinear through the map.

    A tap landing exactly on integer coordinates hits that single cell with
    weight one; samples outside the grid read the zero vector.
    """
    if k.f_in != s.f or k.f_out != s.f:
        raise ContractError("kernel feature sizes must equal tensor F")
    if off.offsets.shape[:2] != (s.n_active, k.k * k.k):
        raise ContractError(
            f"offset field shape {off.offsets.shape[:2]} != (N_active={s.n_active}, taps={k.k * k.k})"
        )
    if s.n_active == 0:
        return s
    coords = s.active_coords()
    base = _tap_offsets(k.k, k.dilation)
    py = coords[:, 0:1] + base[None, :, 0] + off.offsets[:, :, 0]
    px = coords[:, 1:2] + base[None, :, 1] + off.offsets[:, :, 1]
    gathered = _bilinear_taps(s, py, px)
    return SpsTensor(active=_contract(gathered, k), passive=s.passive, index_map=s.index_map)


def _bilinear_taps(s: SpsTensor, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Sample the index-map-resolved field at real positions, ``[N, T, F]``."""
    rows = s.rows()
    idx = s.index_map.astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    wy = py - y0
    wx = px - x0
    out = np.zeros(py.shape + (s.f,))
    for cy, weight_y in ((y0, 1.0 - wy), (y0 + 1, wy)):
        for cx, weight_x in ((x0, 1.0 - wx), (x0 + 1, wx)):
            weight = weight_y * weight_x
            inside = (cy >= 0) & (cy < s.h) & (cx >= 0) & (cx < s.w)
            use = inside & (weight != 0.0)
            if not np.any(use):
                continue
            vals = rows[idx[cy.clip(0, s.h - 1), cx.clip(0, s.w - 1)]]
            vals[~use] = 0.0
            out += weight[..., None] * vals
    return out


def sfm(s: SpsTensor, k1: ConvKernel, k3: ConvKernel, k5: ConvKernel) -> SpsTensor:
    """Fuse three parallel 3x3 convolutions at dilations 1, 3 and 5 by addition."""
    for expected, k in ((1, k1), (3, k3), (5, k5)):
        if k.k != 3:
            raise ContractError("fusion branches must use 3x3 kernels")
        if k.dilation != expected:
            raise ContractError(f"branch dilation {k.dilation}, expected {expected}")
        if k.f_in != s.f or k.f_out != s.f:
            raise ContractError("branch feature sizes must equal tensor F")
    if s.n_active == 0:
        return s
    coords = s.active_coords()
    acc = np.zeros((s.n_active, s.f))
    for k in (k1, k3, k5):
        gathered = _gather_taps(s, coords, _tap_offsets(3, k.dilation))
        acc += _contract(gathered, k)
    return SpsTensor(active=acc, passive=s.passive, index_map=s.index_map)


def fuse_external(s: SpsTensor, ext: np.ndarray, transform: TransformChain) -> SpsTensor:
    """Residual fusion: concat each active row with its external vector, map, add."""
    ext = np.asarray(ext, dtype=np.float64)
    if ext.ndim != 2 or ext.shape[0] != s.n_active:
        raise ContractError(f"external rows {ext.shape} do not match N_active={s.n_active}")
    f_in, f_out = _chain_ends(transform)
    if f_in != s.f + ext.shape[1] or f_out != s.f:
        raise ContractError(f"fusion transform must map {s.f}+{ext.shape[1]} -> {s.f}")
    if s.n_active == 0:
        return s
    update = apply_chain(transform, np.concatenate([s.active, ext], axis=1))
    return SpsTensor(active=s.active + update, passive=s.passive, index_map=s.index_map)


def relu_active(s: SpsTensor) -> SpsTensor:
    """Elementwise relu on active rows (MAC-free; used between conv layers)."""
    if s.n_active == 0:
        return s
    return SpsTensor(active=np.maximum(s.active, 0.0), passive=s.passive, index_map=s.index_map)


# --- dense reference implementations -------------------------------------
#
# These act on plain [F, H, W] arrays and never touch an index map, which
# keeps them independent of the sparse code paths above.


def dense_pointwise(x: np.ndarray, t: LinearTransform) -> np.ndarray:
    out = np.einsum("oi,ihw->ohw", t.weights, x, optimize=True) + t.bias[:, None, None]
    if t.activation == "relu":
        out = np.maximum(out, 0.0)
    return out


def dense_chain(x: np.ndarray, transform: TransformChain) -> np.ndarray:
    if isinstance(transform, LinearTransform):
        return dense_pointwise(x, transform)
    for t in transform:
        x = dense_pointwise(x, t)
    return x


def dense_conv2d(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    f, h, w = x.shape
    r = (k.k // 2) * k.dilation
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    out = np.zeros((k.f_out, h, w))
    for ky in range(k.k):
        for kx in range(k.k):
            oy, ox = ky * k.dilation, kx * k.dilation
            window = padded[:, oy:oy + h, ox:ox + w]
            out += np.einsum("oi,ihw->ohw", k.weights[:, :, ky, kx], window, optimize=True)
    return out + k.bias[:, None, None]


def dense_bilinear(x: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Sample ``[F, H, W]`` at real positions (zero outside); output ``[..., F]``."""
    f, h, w = x.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    wy = py - y0
    wx = px - x0
    out = np.zeros(py.shape + (f,))
    flat = x.reshape(f, -1).T  # [H*W, F]
    for cy, weight_y in ((y0, 1.0 - wy), (y0 + 1, wy)):
        for cx, weight_x in ((x0, 1.0 - wx), (x0 + 1, wx)):
            weight = weight_y * weight_x
            inside = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            use = inside & (weight != 0.0)
            if not np.any(use):
                continue
            vals = flat[cy.clip(0, h - 1) * w + cx.clip(0, w - 1)]
            vals[~use] = 0.0
            out += weight[..., None] * vals
    return out


def dense_deform_conv(x: np.ndarray, k: ConvKernel, offsets: np.ndarray) -> np.ndarray:
    """Deformable conv over every cell; ``offsets`` is ``[H, W, K*K, 2]``."""
    f, h, w = x.shape
    base = _tap_offsets(k.k, k.dilation)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    py = ys[:, :, None] + base[None, None, :, 0] + offsets[:, :, :, 0]
    px = xs[:, :, None] + base[None, None, :, 1] + offsets[:, :, :, 1]
    gathered = dense_bilinear(x, py, px)  # [H, W, T, F]
    wgt = k.weights.reshape(k.f_out, k.f_in, k.k * k.k)
    out = np.einsum("hwti,oit->ohw", gathered, wgt, optimize=True)
    return out + k.bias[:, None, None]


def dense_sfm(x: np.ndarray, k1: ConvKernel, k3: ConvKernel, k5: ConvKernel) -> np.ndarray:
    return dense_conv2d(x, k1) + dense_conv2d(x, k3) + dense_conv2d(x, k5)


def dense_fuse(x: np.ndarray, ext: np.ndarray, transform: TransformChain) -> np.ndarray:
    """Dense twin of :func:`fuse_external`; ``ext`` is ``[F_e, H, W]``."""
    stacked = np.concatenate([x, ext], axis=0)
    return x + dense_chain(stacked, transform)


def dense_subdivide(x: np.ndarray, child_maps: Sequence) -> np.ndarray:
    """Dense twin of tensor subdivision: 2x upsample with per-child maps."""
    if len(child_maps) != 4:
        raise ContractError("need exactly 4 child transforms")
    f, h, w = x.shape
    flat = x.reshape(f, -1).T  # [H*W, F]
    out = np.zeros((f, 2 * h, 2 * w))
    for c, m in enumerate(child_maps):
        i, j = divmod(c, 2)
        out[:, i::2, j::2] = np.asarray(m(flat)).T.reshape(f, h, w)
    return out
