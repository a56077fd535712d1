"""Dense and structure-preserving sparse (SPS) feature tensors.

An SPS tensor splits a 2D feature grid into an ``N_A x F`` matrix of active
features (one row per active cell), an ``N_P x F`` matrix of passive features
(rows may be referenced by several cells), and a dense ``[H, W]`` index map.
Indices below ``N_A`` point into the active matrix, the rest into the passive
matrix, so any 2D neighborhood can still be resolved while only active rows
are ever recomputed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError

INDEX_DTYPE = np.uint32

# Out-of-grid neighbors always read as the zero vector; there is exactly one
# padding policy, applied by every gather in this package.
PADDING_POLICY = "zero-vector"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CellCoord:
    """Grid cell address. ``stage`` records which refinement grid it lives on."""

    y: int
    x: int
    stage: int = 0

    def key(self) -> tuple[int, int]:
        return (self.y, self.x)


@dataclass
class DenseTensor:
    """Plain ``[F, H, W]`` feature map; the dense reference representation."""

    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3:
            raise ContractError(f"dense features must be [F, H, W], got shape {f.shape}")
        if min(f.shape) < 1:
            raise ContractError(f"dense dims must be >= 1, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ContractError("dense features must be finite")
        self.features = _readonly(f)

    @property
    def f(self) -> int:
        return self.features.shape[0]

    @property
    def h(self) -> int:
        return self.features.shape[1]

    @property
    def w(self) -> int:
        return self.features.shape[2]


@dataclass
class SpsTensor:
    """Active matrix, passive matrix and index map over an ``H x W`` grid.

    Invariants (checked on construction):
      * index values lie in ``[0, N_A + N_P)``;
      * every active index appears exactly once in the map;
      * every passive index appears at least once (duplicates allowed).
    """

    active: np.ndarray
    passive: np.ndarray
    index_map: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        act = np.asarray(self.active, dtype=np.float64)
        pas = np.asarray(self.passive, dtype=np.float64)
        idx = np.asarray(self.index_map, dtype=INDEX_DTYPE)
        if act.ndim != 2 or pas.ndim != 2:
            raise ContractError("active/passive must be 2D matrices")
        if act.shape[0] > 0 and pas.shape[0] > 0 and act.shape[1] != pas.shape[1]:
            raise ContractError("active and passive feature sizes differ")
        if idx.ndim != 2:
            raise ContractError("index map must be 2D")
        self.active = _readonly(act)
        self.passive = _readonly(pas)
        self.index_map = _readonly(idx)
        if self.validate:
            self._check_index_map()

    def _check_index_map(self):
        n_a, n_p = self.n_active, self.n_passive
        counts = np.bincount(self.index_map.ravel().astype(np.int64), minlength=n_a + n_p)
        if counts.size > n_a + n_p:
            raise ContractError("index map references out-of-range feature index")
        if n_a and not np.all(counts[:n_a] == 1):
            raise ContractError("each active index must appear exactly once in the index map")
        if n_p and not np.all(counts[n_a:] >= 1):
            raise ContractError("each passive index must appear at least once in the index map")

    @property
    def f(self) -> int:
        return self.active.shape[1] if self.n_active else self.passive.shape[1]

    @property
    def h(self) -> int:
        return self.index_map.shape[0]

    @property
    def w(self) -> int:
        return self.index_map.shape[1]

    @property
    def n_active(self) -> int:
        return self.active.shape[0]

    @property
    def n_passive(self) -> int:
        return self.passive.shape[0]

    def rows(self) -> np.ndarray:
        """All feature rows, active first; row ``i`` backs index-map value ``i``."""
        if self.n_active == 0:
            return self.passive
        if self.n_passive == 0:
            return self.active
        return np.concatenate([self.active, self.passive], axis=0)

    def active_coords(self) -> np.ndarray:
        """``(N_A, 2)`` array of (y, x), ordered by active row index."""
        ys, xs = np.nonzero(self.index_map < self.n_active)
        order = np.argsort(self.index_map[ys, xs], kind="stable")
        return np.stack([ys[order], xs[order]], axis=1)

    def is_active_cell(self, y: int, x: int) -> bool:
        return bool(self.index_map[y, x] < self.n_active)


def _normalize_cells(cells: Iterable, h: int, w: int) -> np.ndarray:
    """Return unique (y, x) pairs in row-major order, bounds-checked."""
    pairs = []
    for c in cells:
        y, x = (c.y, c.x) if isinstance(c, CellCoord) else (int(c[0]), int(c[1]))
        if not (0 <= y < h and 0 <= x < w):
            raise ContractError(f"cell ({y}, {x}) outside {h}x{w} grid")
        pairs.append((y, x))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.unique(np.asarray(pairs, dtype=np.int64), axis=0)
    return arr  # np.unique sorts lexicographically == row-major


def from_dense(d: DenseTensor, active_cells: Iterable) -> SpsTensor:
    """Split a dense tensor into active rows (given cells) and passive rows.

    Active rows follow row-major order of the active cells; every non-active
    cell contributes its own passive row (no deduplication at construction).
    """
    cells = _normalize_cells(active_cells, d.h, d.w)
    active_mask = np.zeros((d.h, d.w), dtype=bool)
    if len(cells):
        active_mask[cells[:, 0], cells[:, 1]] = True

    index_map = np.empty((d.h, d.w), dtype=np.int64)
    n_a = len(cells)
    if n_a:
        index_map[cells[:, 0], cells[:, 1]] = np.arange(n_a)
    pys, pxs = np.nonzero(~active_mask)
    index_map[pys, pxs] = n_a + np.arange(len(pys))

    feats = d.features
    active = feats[:, cells[:, 0], cells[:, 1]].T if n_a else np.zeros((0, d.f))
    passive = feats[:, pys, pxs].T if len(pys) else np.zeros((0, d.f))
    return SpsTensor(active=active, passive=passive, index_map=index_map)


def to_dense(s: SpsTensor) -> DenseTensor:
    """Materialize the full ``[F, H, W]`` map by resolving the index map."""
    rows = s.rows()
    dense = rows[s.index_map.astype(np.int64)]  # [H, W, F]
    return DenseTensor(features=dense.transpose(2, 0, 1))


def gather_neighborhood(s: SpsTensor, c: CellCoord | tuple, offsets: Sequence[tuple]) -> np.ndarray:
    """Collect the feature rows at ``(y+dy, x+dx)`` for one active cell.

    Out-of-grid offsets yield the zero vector (padding policy).
    """
    y, x = (c.y, c.x) if isinstance(c, CellCoord) else (int(c[0]), int(c[1]))
    if not (0 <= y < s.h and 0 <= x < s.w):
        raise ContractError(f"cell ({y}, {x}) outside grid")
    if not s.is_active_cell(y, x):
        raise ContractError(f"cell ({y}, {x}) is not active")
    rows = s.rows()
    out = np.zeros((len(offsets), s.f))
    for i, (dy, dx) in enumerate(offsets):
        ny, nx = y + int(dy), x + int(dx)
        if 0 <= ny < s.h and 0 <= nx < s.w:
            out[i] = rows[int(s.index_map[ny, nx])]
    return out


def subdivide(s: SpsTensor, child_maps: Sequence[Callable[[np.ndarray], np.ndarray]]) -> SpsTensor:
    """Double the grid; each active cell becomes 4 active children.

    Child ``(i, j)`` of active row ``a`` gets row ``4a + 2i + j``, computed by
    ``child_maps[2i + j]`` from the parent row. Passive rows are untouched:
    all 4 children of a passive cell reference the parent's (renumbered) row.
    """
    if len(child_maps) != 4:
        raise ContractError(f"need exactly 4 child transforms, got {len(child_maps)}")
    n_a, n_p = s.n_active, s.n_passive
    if n_a:
        children = [np.asarray(m(s.active), dtype=np.float64) for m in child_maps]
        for ch in children:
            if ch.shape != s.active.shape:
                raise ContractError("child transform must map F -> F row-wise")
        # interleave so that row 4a + c is child c of parent a
        new_active = np.stack(children, axis=1).reshape(4 * n_a, s.f)
    else:
        new_active = np.zeros((0, s.f))

    idx = s.index_map.astype(np.int64)
    child_index = np.empty((2 * s.h, 2 * s.w), dtype=np.int64)
    active_part = idx < n_a
    for i in (0, 1):
        for j in (0, 1):
            block = np.where(active_part, 4 * idx + 2 * i + j, 3 * n_a + idx)
            child_index[i::2, j::2] = block
    return SpsTensor(active=new_active, passive=s.passive, index_map=child_index)


def reselect(s: SpsTensor, active_cells: Iterable) -> SpsTensor:
    """Re-split an SPS tensor around a new active set (index-map maintenance).

    Each newly active cell receives its own row (copied from whatever row the
    cell referenced, active or passive); surviving rows that are still
    referenced by non-active cells stay passive, keeping their relative order.
    Rows no longer referenced anywhere are dropped.
    """
    cells = _normalize_cells(active_cells, s.h, s.w)
    n_new = len(cells)
    rows = s.rows()
    idx = s.index_map.astype(np.int64)

    active_mask = np.zeros((s.h, s.w), dtype=bool)
    if n_new:
        active_mask[cells[:, 0], cells[:, 1]] = True

    new_active = rows[idx[cells[:, 0], cells[:, 1]]] if n_new else np.zeros((0, s.f))

    survivors = np.unique(idx[~active_mask])  # sorted == old row order preserved
    remap = np.full(s.n_active + s.n_passive, -1, dtype=np.int64)
    remap[survivors] = n_new + np.arange(len(survivors))
    new_passive = rows[survivors] if len(survivors) else np.zeros((0, s.f))

    new_index = np.where(active_mask, 0, remap[idx])
    if n_new:
        new_index[cells[:, 0], cells[:, 1]] = np.arange(n_new)
    return SpsTensor(active=new_active, passive=new_passive, index_map=new_index)
