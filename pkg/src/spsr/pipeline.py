"""Multi-stage mask refinement: dense stage 0, sparse refinement stages 1-3.

Stage 0 predicts a coarse 14x14 mask per RoI from densely processed features.
Each later stage picks the image-wide best-scoring cells, subdivides them,
halves the feature size, runs the fusion-convolution block at the active
cells only, and overwrites the upsampled mask there. Three stages take the
mask from 14x14 to 112x112. A dense route (every cell active, plain array
ops) mirrors the sparse route exactly and serves as oracle and baseline.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ops
from .cost import CostLedger, macs_bilinear, macs_conv
from .errors import ContractError
from .geometry import mask_nms
from .metrics import PanopticSegment, mask_iou
from .tensor import SpsTensor, reselect, subdivide

BASE_GRID = 14
ORACLE_LOGIT = 12.0  # oracle masks are binary; +/- this logit keeps sigmoid saturated


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def seeded_rng(*parts) -> np.random.Generator:
    """Generator derived stably from any mix of ints and strings."""
    h = hashlib.blake2s(repr(parts).encode())
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


# --- geometry of the refinement grids --------------------------------------


@dataclass(frozen=True)
class RoiBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ContractError(f"RoI box must have positive extent: {self}")

    @property
    def w(self) -> float:
        return self.x1 - self.x0

    @property
    def h(self) -> float:
        return self.y1 - self.y0


@dataclass(frozen=True)
class StageConfig:
    """Grid and feature dimensions of one refinement stage."""

    s: int
    h: int
    w: int
    f: int
    top_n_active: int | None = 10000

    @classmethod
    def build(cls, s: int, f0: int, top_n_active: int = 10000) -> "StageConfig":
        if not 0 <= s <= 3:
            raise ContractError("stage index must lie in 0..3")
        side = BASE_GRID * 2**s
        return cls(s=s, h=side, w=side, f=f0 // 2**s, top_n_active=top_n_active)


def assign_level(box: RoiBox) -> int:
    """Feature-pyramid level for a box, by sqrt-area relative to a 56px object."""
    scale = np.sqrt(box.w * box.h) / 56.0
    k0 = 2 + min(int(np.floor(np.log2(scale))), 3)
    return max(k0, 2)


def stage_level(k0: int, s: int) -> int:
    """Level sampled at stage s: one finer per stage, floored at level 2."""
    if not 0 <= s <= 3:
        raise ContractError("stage index must lie in 0..3")
    return max(k0 - s, 2)


def select_active(scores: Sequence[np.ndarray], top_n: int | None) -> list[np.ndarray]:
    """Image-wide top-n cells over all RoI score grids.

    Ties break by (RoI index, row-major cell) ascending. ``top_n=None`` keeps
    every cell. Returns one ``(n_i, 2)`` array of (y, x) per RoI, row-major.
    """
    grids = [np.asarray(s, dtype=np.float64) for s in scores]
    sizes = [g.size for g in grids]
    total = int(sum(sizes))
    if top_n is None or top_n >= total:
        return [np.stack(np.unravel_index(np.arange(g.size), g.shape), axis=1) for g in grids]
    if top_n <= 0:
        return [np.zeros((0, 2), dtype=np.int64) for _ in grids]
    flat = np.concatenate([g.ravel() for g in grids])
    roi_ids = np.repeat(np.arange(len(grids)), sizes)
    cell_ids = np.concatenate([np.arange(n) for n in sizes])
    chosen = np.lexsort((cell_ids, roi_ids, -flat))[:top_n]
    out = []
    for i, g in enumerate(grids):
        cells = np.sort(cell_ids[chosen[roi_ids[chosen] == i]])
        out.append(np.stack(np.unravel_index(cells, g.shape), axis=1))
    return out


def make_targets(gt_mask: np.ndarray, grid_hw: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell targets: mask value at the cell center, and whether the cell's
    pixel footprint mixes foreground with background."""
    gt = np.asarray(gt_mask, dtype=bool)
    rows, cols = gt.shape
    h, w = grid_hw
    if rows < h or cols < w:
        raise ContractError(f"mask {gt.shape} coarser than grid {grid_hw}")
    cy = np.floor((np.arange(h) + 0.5) * rows / h).astype(np.int64)
    cx = np.floor((np.arange(w) + 0.5) * cols / w).astype(np.int64)
    seg = gt[cy[:, None], cx[None, :]]

    by = np.floor(np.arange(h + 1) * rows / h).astype(np.int64)
    bx = np.floor(np.arange(w + 1) * cols / w).astype(np.int64)
    sat = np.zeros((rows + 1, cols + 1), dtype=np.int64)
    sat[1:, 1:] = gt.cumsum(axis=0).cumsum(axis=1)
    count = (sat[by[1:, None], bx[None, 1:]] - sat[by[:-1, None], bx[None, 1:]]
             - sat[by[1:, None], bx[None, :-1]] + sat[by[:-1, None], bx[None, :-1]])
    area = (by[1:, None] - by[:-1, None]) * (bx[None, 1:] - bx[None, :-1])
    refine = (count > 0) & (count < area)
    return seg, refine


def upsample2_nn(grid: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(grid, 2, axis=0), 2, axis=1)


def assemble_grid(prev: np.ndarray, cells: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsample of ``prev`` with sparse overwrites."""
    out = upsample2_nn(np.asarray(prev, dtype=np.float64))
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if len(cells):
        if cells.min() < 0 or cells[:, 0].max() >= out.shape[0] or cells[:, 1].max() >= out.shape[1]:
            raise ContractError("active cell outside the upsampled grid")
        out[cells[:, 0], cells[:, 1]] = np.asarray(values, dtype=np.float64).ravel()
    return out


def assemble_mask(prev_probs: np.ndarray, cells: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Mask variant of :func:`assemble_grid`: new logits enter through a sigmoid."""
    return assemble_grid(prev_probs, cells, sigmoid(np.asarray(logits, dtype=np.float64)))


def paste_mask(roi_probs: np.ndarray, box: RoiBox, image_hw: tuple) -> np.ndarray:
    """Resample an RoI probability grid into image space and threshold at 0.5."""
    probs = np.asarray(roi_probs, dtype=np.float64)
    ih, iw = image_hw
    out = np.zeros((ih, iw), dtype=bool)
    x_lo = max(0, int(np.ceil(box.x0 - 0.5)))
    x_hi = min(iw, int(np.ceil(box.x1 - 0.5)))
    y_lo = max(0, int(np.ceil(box.y0 - 0.5)))
    y_hi = min(ih, int(np.ceil(box.y1 - 0.5)))
    if x_lo >= x_hi or y_lo >= y_hi:
        return out
    px = np.arange(x_lo, x_hi)
    py = np.arange(y_lo, y_hi)
    u = (px + 0.5 - box.x0) / box.w * probs.shape[1] - 0.5
    v = (py + 0.5 - box.y0) / box.h * probs.shape[0] - 0.5
    sampled = _bilinear_clamped(probs, v, u)
    out[y_lo:y_hi, x_lo:x_hi] = sampled >= 0.5
    return out


def _bilinear_clamped(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Separable bilinear sampling with edge clamping; ``[len(ys), len(xs)]``."""
    h, w = grid.shape
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    top = grid[np.ix_(y0, x0)] * (1 - wx)[None, :] + grid[np.ix_(y0, x1)] * wx[None, :]
    bot = grid[np.ix_(y1, x0)] * (1 - wx)[None, :] + grid[np.ix_(y1, x1)] * wx[None, :]
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def seg_score(cls_score: float, probs: np.ndarray) -> float:
    """Classification score times the mean probability over predicted foreground."""
    if not 0.0 <= cls_score <= 1.0:
        raise ContractError("classification score must lie in [0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    fg = probs >= 0.5
    if not np.any(fg):
        return 0.0
    return float(cls_score * probs[fg].mean())


# --- panoptic post-processing ----------------------------------------------


@dataclass
class PanopticDet:
    mask: np.ndarray
    class_id: int
    cls_score: float
    mask_score: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class PanopticParams:
    cls_floor: float = 0.3
    mask_nms_thresh: float = 0.75
    pixel_floor: float = 0.35
    resemblance_floor: float = 0.6
    min_pixels: int = 150
    stuff_classes: frozenset = frozenset()


def panoptic_postprocess(dets: Sequence[PanopticDet],
                         params: PanopticParams = PanopticParams()) -> list[PanopticSegment]:
    """Turn overlapping scored masks into disjoint panoptic segments.

    In order: drop low classification scores, mask-NMS, per-pixel argmax of
    the combined score (with a floor, else the pixel stays unlabeled), drop
    segments that no longer resemble their original mask, drop tiny segments,
    and merge stuff segments of the same class.
    """
    dets = [d for d in dets if d.cls_score >= params.cls_floor]
    if not dets:
        return []
    kept = mask_nms([d.mask for d in dets], [d.cls_score for d in dets],
                    params.mask_nms_thresh)
    dets = [dets[i] for i in sorted(kept)]

    combined = np.asarray([d.cls_score * d.mask_score for d in dets])
    order = np.lexsort((np.arange(len(dets)), -combined))
    shape = dets[0].mask.shape
    taken = np.zeros(shape, dtype=bool)
    regions: list[np.ndarray] = [None] * len(dets)
    for i in order:
        if combined[i] < params.pixel_floor:
            regions[i] = np.zeros(shape, dtype=bool)
            continue
        region = dets[i].mask & ~taken
        taken |= region
        regions[i] = region

    segments = []
    for det, region in zip(dets, regions):
        if mask_iou(region, det.mask) < params.resemblance_floor:
            continue
        if int(region.sum()) < params.min_pixels:
            continue
        segments.append(PanopticSegment(class_id=det.class_id, mask=region))

    merged: list[PanopticSegment] = []
    stuff_by_class: dict = {}
    for seg in segments:
        if seg.class_id in params.stuff_classes:
            if seg.class_id in stuff_by_class:
                prev = stuff_by_class[seg.class_id]
                prev.mask = prev.mask | seg.mask
                continue
            stuff_by_class[seg.class_id] = seg
        merged.append(seg)
    return merged


# --- run configuration and weights ------------------------------------------


@dataclass
class RunConfig:
    stages: int = 3
    top_n_active: int | None = 10000  # None: every cell stays active
    seed: int = 0
    mode: str = "oracle"
    f0: int = 256
    f_query: int = 256
    f_neck: int = 256
    threads: int = 1
    image_hw: tuple | None = None

    def __post_init__(self):
        if not 1 <= self.stages <= 3:
            raise ContractError("stages must lie in 1..3")
        if self.f0 % (2**self.stages) != 0:
            raise ContractError(f"f0={self.f0} not divisible by 2^{self.stages}")
        if self.mode not in ("oracle", "weights"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.threads < 1:
            raise ContractError("threads must be >= 1")

    def stage_configs(self) -> list[StageConfig]:
        return [StageConfig.build(s, self.f0, self.top_n_active)
                for s in range(self.stages + 1)]

    @property
    def final_side(self) -> int:
        return BASE_GRID * 2**self.stages


@dataclass
class RoiInput:
    box: RoiBox
    cls_score: float = 1.0
    class_id: int = 0
    ref_mask: np.ndarray | None = None
    query: np.ndarray | None = None

    def __post_init__(self):
        if self.ref_mask is not None:
            self.ref_mask = np.asarray(self.ref_mask, dtype=bool)
        if self.query is not None:
            self.query = np.asarray(self.query, dtype=np.float64)


@dataclass
class NeckFeatures:
    """Image-level feature grids per pyramid level (stride ``2**level``)."""

    levels: dict
    image_hw: tuple

    @classmethod
    def synthesize(cls, seed: int, image_hw: tuple, f_neck: int,
                   level_range: tuple = (2, 5)) -> "NeckFeatures":
        ih, iw = image_hw
        levels = {}
        for level in range(level_range[0], level_range[1] + 1):
            stride = 2**level
            gh, gw = max(1, -(-ih // stride)), max(1, -(-iw // stride))
            rng = seeded_rng(seed, "neck", level)
            levels[level] = rng.standard_normal((f_neck, gh, gw))
        return cls(levels=levels, image_hw=image_hw)

    def sample(self, level: int, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Bilinear sample at image coordinates; ``(n, F)``, zero outside."""
        if level not in self.levels:
            raise ContractError(f"no neck features for level {level}")
        stride = float(2**level)
        return ops.dense_bilinear(self.levels[level], ys / stride - 0.5, xs / stride - 0.5)


def _mlp(arrays: Mapping, prefix: str, dims: Sequence[int], seed: int,
         hidden_relu: bool = True) -> list[ops.LinearTransform]:
    layers = []
    for i, (f_in, f_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = _array(arrays, f"{prefix}.l{i}.weight", (f_out, f_in), seed)
        b = _array(arrays, f"{prefix}.l{i}.bias", (f_out,), seed)
        act = "relu" if hidden_relu and i < len(dims) - 2 else "none"
        layers.append(ops.LinearTransform(weights=w, bias=b, activation=act))
    return layers


def _conv(arrays: Mapping, name: str, f: int, dilation: int, seed: int) -> ops.ConvKernel:
    w = _array(arrays, f"{name}.weight", (f, f, 3, 3), seed)
    b = _array(arrays, f"{name}.bias", (f,), seed)
    return ops.ConvKernel(weights=w, bias=b, dilation=dilation)


def _array(arrays: Mapping, name: str, shape: tuple, seed: int) -> np.ndarray:
    if name in arrays:
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != tuple(shape):
            raise ContractError(f"array {name} has shape {arr.shape}, expected {shape}")
        return arr
    return seeded_rng(seed, "init", name).normal(0.0, 0.01, size=shape)


class PipelineWeights:
    """All transforms of the refinement head, loaded or seeded by name."""

    def __init__(self, arrays: Mapping | None, config: RunConfig):
        arrays = dict(arrays or {})
        seed = config.seed
        f0, fq, fe = config.f0, config.f_query, config.f_neck
        self.ingest = _mlp(arrays, "stage0.ingest", [fe, f0], seed)[0]
        self.stage0_fuse = _mlp(arrays, "stage0.fuse", [f0 + fq, f0, f0], seed)
        self.stage0_fcn = [_conv(arrays, f"stage0.fcn.c{i}", f0, 1, seed) for i in range(4)]
        self.seg_head = {0: _mlp(arrays, "stage0.seg", [f0, f0, 1], seed)}
        self.refine_head = {0: _mlp(arrays, "stage0.refine", [f0, f0, 1], seed)}
        self.subdiv: dict = {}
        self.fuse: dict = {}
        self.halve: dict = {}
        self.sfm: dict = {}
        for s in range(1, config.stages + 1):
            f_in = f0 // 2 ** (s - 1)
            f_out = f_in // 2
            self.subdiv[s] = [_mlp(arrays, f"stage{s}.subdiv.m{c}", [f_in, f_in, f_in], seed)
                              for c in range(4)]
            self.fuse[s] = _mlp(arrays, f"stage{s}.fuse", [f_in + fe, f_in, f_in], seed)
            self.halve[s] = _mlp(arrays, f"stage{s}.halve", [f_in, f_out], seed)[0]
            self.sfm[s] = tuple(_conv(arrays, f"stage{s}.sfm.d{d}", f_out, d, seed)
                                for d in (1, 3, 5))
            self.seg_head[s] = _mlp(arrays, f"stage{s}.seg", [f_out, f_out, 1], seed)
            self.refine_head[s] = _mlp(arrays, f"stage{s}.refine", [f_out, f_out, 1], seed)


# --- the refinement engine ---------------------------------------------------


@dataclass
class RoiResult:
    probs: np.ndarray
    score: float
    class_id: int


@dataclass
class RefinementResult:
    per_roi: list
    stage_masks: list  # stage -> list of per-RoI probability grids
    stage_fractions: dict  # stage (1..S) -> selected cells / parent cells
    stage_active: dict  # stage -> (active child cells, total cells)
    ledger: CostLedger


def _cell_centers(box: RoiBox, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-space centers of all grid cells, row-major; returns (ys, xs)."""
    cy = box.y0 + (np.arange(h) + 0.5) * box.h / h
    cx = box.x0 + (np.arange(w) + 0.5) * box.w / w
    ys, xs = np.meshgrid(cy, cx, indexing="ij")
    return ys.ravel(), xs.ravel()


def _stage0_entries(ledger: CostLedger, cells: int, total: int, cfg: RunConfig):
    f0, fq, fe = cfg.f0, cfg.f_query, cfg.f_neck
    ledger.add("neck_sample", 0, macs_bilinear(cells, fe), cells, total)
    ledger.add("ingest", 0, macs_conv(cells, 1, fe, f0), cells, total)
    ledger.add("query_fuse", 0,
               macs_conv(cells, 1, f0 + fq, f0) + macs_conv(cells, 1, f0, f0), cells, total)
    ledger.add("fcn", 0, 4 * macs_conv(cells, 3, f0, f0), cells, total)
    ledger.add("seg_head", 0,
               macs_conv(cells, 1, f0, f0) + macs_conv(cells, 1, f0, 1), cells, total)
    ledger.add("refine_head", 0,
               macs_conv(cells, 1, f0, f0) + macs_conv(cells, 1, f0, 1), cells, total)


def _stage_entries(ledger: CostLedger, s: int, parents: int, children: int,
                   halve_rows: int, total: int, cfg: RunConfig):
    f_in = cfg.f0 // 2 ** (s - 1)
    f_out = f_in // 2
    fe = cfg.f_neck
    ledger.add("subdivide", s, 8 * macs_conv(parents, 1, f_in, f_in), children, total)
    ledger.add("neck_sample", s, macs_bilinear(children, fe), children, total)
    ledger.add("neck_fuse", s,
               macs_conv(children, 1, f_in + fe, f_in) + macs_conv(children, 1, f_in, f_in),
               children, total)
    ledger.add("halve", s, macs_conv(halve_rows, 1, f_in, f_out), children, total)
    ledger.add("sfm", s, 3 * macs_conv(children, 3, f_out, f_out), children, total)
    for head in ("seg_head", "refine_head"):
        ledger.add(head, s,
                   macs_conv(children, 1, f_out, f_out) + macs_conv(children, 1, f_out, 1),
                   children, total)


def analytic_dense_ledger(config: RunConfig, n_rois: int) -> CostLedger:
    """Ledger of a dense run (every cell active) with these shapes."""
    ledger = CostLedger()
    cells0 = n_rois * BASE_GRID * BASE_GRID
    _stage0_entries(ledger, cells0, cells0, config)
    for s in range(1, config.stages + 1):
        parents = n_rois * (BASE_GRID * 2 ** (s - 1)) ** 2
        children = 4 * parents
        _stage_entries(ledger, s, parents, children, children, children, config)
    return ledger


class _Engine:
    def __init__(self, rois: Sequence[RoiInput], config: RunConfig,
                 weights: Mapping | None, neck: NeckFeatures | None):
        if not rois:
            raise ContractError("need at least one RoI")
        self.rois = list(rois)
        self.config = config
        if config.mode == "oracle":
            side = config.final_side
            for i, r in enumerate(self.rois):
                if r.ref_mask is None:
                    raise ContractError(f"oracle mode needs a reference mask for RoI {i}")
                if r.ref_mask.shape[0] < side or r.ref_mask.shape[1] < side:
                    raise ContractError(
                        f"reference mask {r.ref_mask.shape} coarser than final {side}x{side} grid")
        self.weights = PipelineWeights(weights, config)
        if neck is None:
            image_hw = config.image_hw or self._default_image_hw()
            neck = NeckFeatures.synthesize(config.seed, image_hw, config.f_neck)
        self.neck = neck
        self.k0 = [assign_level(r.box) for r in self.rois]
        self.queries = [
            r.query if r.query is not None
            else seeded_rng(config.seed, "query", i).standard_normal(config.f_query)
            for i, r in enumerate(self.rois)
        ]

    def _default_image_hw(self) -> tuple:
        h = max(int(np.ceil(r.box.y1)) for r in self.rois)
        w = max(int(np.ceil(r.box.x1)) for r in self.rois)
        return max(h, 1), max(w, 1)

    def _map(self, fn, items):
        if self.config.threads == 1:
            return [fn(*args) for args in items]
        with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
            return list(pool.map(lambda args: fn(*args), items))

    def _oracle_values(self, roi: int, grid_hw: tuple):
        seg, refine = make_targets(self.rois[roi].ref_mask, grid_hw)
        logits = np.where(seg, ORACLE_LOGIT, -ORACLE_LOGIT)
        return logits, refine.astype(np.float64)

    # -- sparse route ------------------------------------------------------

    def run_sparse(self) -> RefinementResult:
        cfg = self.config
        ledger = CostLedger()
        n = len(self.rois)
        grid0 = (BASE_GRID, BASE_GRID)

        def stage0(i: int):
            roi = self.rois[i]
            ys, xs = _cell_centers(roi.box, *grid0)
            raw = self.neck.sample(stage_level(self.k0[i], 0), ys, xs)
            x = self.weights.ingest.apply(raw)
            index = np.arange(grid0[0] * grid0[1]).reshape(grid0)
            t = SpsTensor(active=x, passive=np.zeros((0, cfg.f0)), index_map=index)
            ext = np.broadcast_to(self.queries[i], (t.n_active, cfg.f_query))
            t = ops.fuse_external(t, ext, self.weights.stage0_fuse)
            for kernel in self.weights.stage0_fcn:
                t = ops.relu_active(ops.conv2d_sparse(t, kernel))
            seg = ops.apply_chain(self.weights.seg_head[0], t.active).reshape(grid0)
            refine = ops.apply_chain(self.weights.refine_head[0], t.active).reshape(grid0)
            if cfg.mode == "oracle":
                seg, refine = self._oracle_values(i, grid0)
            return t, sigmoid(seg), np.asarray(refine, dtype=np.float64)

        results = self._map(stage0, [(i,) for i in range(n)])
        tensors = [r[0] for r in results]
        masks = [r[1] for r in results]
        refine_grids = [r[2] for r in results]
        cells0 = n * grid0[0] * grid0[1]
        _stage0_entries(ledger, cells0, cells0, cfg)

        stage_masks = [list(masks)]
        fractions: dict = {}
        stage_active: dict = {}

        for s in range(1, cfg.stages + 1):
            parent_total = sum(g.size for g in refine_grids)
            selected = select_active(refine_grids, cfg.top_n_active)
            n_selected = int(sum(len(c) for c in selected))
            fractions[s] = n_selected / parent_total
            grid_hw = (BASE_GRID * 2**s,) * 2
            total_cells = n * grid_hw[0] * grid_hw[1]
            stage_active[s] = (4 * n_selected, total_cells)

            def one(i: int, s=s, grid_hw=grid_hw):
                t = reselect(tensors[i], selected[i])
                parents = t.n_active
                t = subdivide(t, [lambda rows, m=m: ops.apply_chain(m, rows)
                                  for m in self.weights.subdiv[s]])
                coords = t.active_coords()
                if t.n_active:
                    ys = self.rois[i].box.y0 + (coords[:, 0] + 0.5) * self.rois[i].box.h / grid_hw[0]
                    xs = self.rois[i].box.x0 + (coords[:, 1] + 0.5) * self.rois[i].box.w / grid_hw[1]
                    ext = self.neck.sample(stage_level(self.k0[i], s), ys, xs)
                    t = ops.fuse_external(t, ext, self.weights.fuse[s])
                t = ops.halve_features(t, self.weights.halve[s])
                t = ops.sfm(t, *self.weights.sfm[s])
                seg = ops.apply_chain(self.weights.seg_head[s], t.active).ravel()
                refine = ops.apply_chain(self.weights.refine_head[s], t.active).ravel()
                if cfg.mode == "oracle":
                    seg_grid, refine_grid = self._oracle_values(i, grid_hw)
                    seg = seg_grid[coords[:, 0], coords[:, 1]]
                    refine = refine_grid[coords[:, 0], coords[:, 1]]
                mask = assemble_mask(masks[i], coords, seg)
                rgrid = assemble_grid(refine_grids[i], coords, refine)
                rows = t.n_active + t.n_passive
                return t, mask, rgrid, parents, rows

            results = self._map(one, [(i,) for i in range(n)])
            tensors = [r[0] for r in results]
            masks = [r[1] for r in results]
            refine_grids = [r[2] for r in results]
            parents_sum = sum(r[3] for r in results)
            rows_sum = sum(r[4] for r in results)
            _stage_entries(ledger, s, parents_sum, 4 * parents_sum, rows_sum,
                           total_cells, cfg)
            stage_masks.append(list(masks))

        per_roi = [RoiResult(probs=masks[i], score=seg_score(self.rois[i].cls_score, masks[i]),
                             class_id=self.rois[i].class_id) for i in range(n)]
        return RefinementResult(per_roi=per_roi, stage_masks=stage_masks,
                                stage_fractions=fractions, stage_active=stage_active,
                                ledger=ledger)

    # -- dense route ---------------------------------------------------------

    def run_dense(self) -> RefinementResult:
        cfg = self.config
        ledger = CostLedger()
        n = len(self.rois)
        grid0 = (BASE_GRID, BASE_GRID)

        def stage0(i: int):
            roi = self.rois[i]
            ys, xs = _cell_centers(roi.box, *grid0)
            raw = self.neck.sample(stage_level(self.k0[i], 0), ys, xs)
            x = raw.reshape(grid0 + (cfg.f_neck,)).transpose(2, 0, 1)
            x = ops.dense_pointwise(x, self.weights.ingest)
            ext = np.broadcast_to(self.queries[i][:, None, None], (cfg.f_query,) + grid0)
            x = ops.dense_fuse(x, ext, self.weights.stage0_fuse)
            for kernel in self.weights.stage0_fcn:
                x = np.maximum(ops.dense_conv2d(x, kernel), 0.0)
            seg = ops.dense_chain(x, self.weights.seg_head[0])[0]
            refine = ops.dense_chain(x, self.weights.refine_head[0])[0]
            if cfg.mode == "oracle":
                seg, refine = self._oracle_values(i, grid0)
            return x, sigmoid(seg), np.asarray(refine, dtype=np.float64)

        results = self._map(stage0, [(i,) for i in range(n)])
        feats = [r[0] for r in results]
        masks = [r[1] for r in results]
        refine_grids = [r[2] for r in results]
        cells0 = n * grid0[0] * grid0[1]
        _stage0_entries(ledger, cells0, cells0, cfg)

        stage_masks = [list(masks)]
        fractions: dict = {}
        stage_active: dict = {}

        for s in range(1, cfg.stages + 1):
            grid_hw = (BASE_GRID * 2**s,) * 2
            total_cells = n * grid_hw[0] * grid_hw[1]
            fractions[s] = 1.0
            stage_active[s] = (total_cells, total_cells)

            def one(i: int, s=s, grid_hw=grid_hw):
                x = ops.dense_subdivide(feats[i], [lambda rows, m=m: ops.apply_chain(m, rows)
                                                   for m in self.weights.subdiv[s]])
                ys, xs = _cell_centers(self.rois[i].box, *grid_hw)
                ext = self.neck.sample(stage_level(self.k0[i], s), ys, xs)
                ext = ext.reshape(grid_hw + (cfg.f_neck,)).transpose(2, 0, 1)
                x = ops.dense_fuse(x, ext, self.weights.fuse[s])
                x = ops.dense_pointwise(x, self.weights.halve[s])
                x = ops.dense_sfm(x, *self.weights.sfm[s])
                seg = ops.dense_chain(x, self.weights.seg_head[s])[0]
                refine = ops.dense_chain(x, self.weights.refine_head[s])[0]
                if cfg.mode == "oracle":
                    seg, refine = self._oracle_values(i, grid_hw)
                return x, sigmoid(seg), np.asarray(refine, dtype=np.float64)

            results = self._map(one, [(i,) for i in range(n)])
            feats = [r[0] for r in results]
            masks = [r[1] for r in results]
            refine_grids = [r[2] for r in results]
            parents = total_cells // 4
            _stage_entries(ledger, s, parents, total_cells, total_cells, total_cells, cfg)
            stage_masks.append(list(masks))

        per_roi = [RoiResult(probs=masks[i], score=seg_score(self.rois[i].cls_score, masks[i]),
                             class_id=self.rois[i].class_id) for i in range(n)]
        return RefinementResult(per_roi=per_roi, stage_masks=stage_masks,
                                stage_fractions=fractions, stage_active=stage_active,
                                ledger=ledger)


def run_refinement(rois: Sequence[RoiInput], config: RunConfig,
                   weights: Mapping | None = None, neck: NeckFeatures | None = None,
                   sparse: bool = True) -> RefinementResult:
    """Run the staged refinement over one image's RoIs.

    ``sparse=False`` runs the dense baseline route (every cell active, plain
    array operators) with identical weights and shapes.
    """
    engine = _Engine(rois, config, weights, neck)
    return engine.run_sparse() if sparse else engine.run_dense()
