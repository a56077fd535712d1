"""Evaluation metrics: average precision, boundary IoU, panoptic quality.

Masks travel as run-length encodings (column-major counts, alternating
background/foreground and starting with background) and are decoded to bool
arrays for pixel work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .geometry import box_area, iou as box_iou

AP_IOU_THRESHOLDS = tuple(float(t) for t in np.round(np.arange(0.5, 1.0, 0.05), 2))
SMALL_AREA = 32**2
LARGE_AREA = 96**2
BOUNDARY_FRACTION = 0.02


# --- RLE codec -------------------------------------------------------------


@dataclass(frozen=True)
class Rle:
    """Column-major run-length counts; first run counts background pixels."""

    height: int
    width: int
    counts: tuple

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ContractError("mask dims must be positive")
        if any(c < 0 for c in self.counts):
            raise ContractError("run lengths must be non-negative")
        if sum(self.counts) != self.height * self.width:
            raise ContractError(
                f"run lengths sum to {sum(self.counts)}, expected {self.height * self.width}"
            )

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))


def rle_encode(mask: np.ndarray) -> Rle:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.size == 0:
        raise ContractError("mask must be a non-empty 2D array")
    flat = mask.T.ravel()  # column-major
    changes = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return Rle(height=mask.shape[0], width=mask.shape[1], counts=tuple(int(c) for c in counts))


def rle_decode(rle: Rle) -> np.ndarray:
    flat = np.zeros(rle.height * rle.width, dtype=bool)
    pos = 0
    for i, count in enumerate(rle.counts):
        if i % 2 == 1:
            flat[pos:pos + count] = True
        pos += count
    return flat.reshape(rle.width, rle.height).T


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask canvases differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def rle_iou(a: Rle, b: Rle) -> float:
    """Mask IoU computed on the runs directly, without decoding."""
    if (a.height, a.width) != (b.height, b.width):
        raise ContractError("mask canvases differ")
    ca, cb = list(a.counts), list(b.counts)
    inter = 0
    ia = ib = 0
    ra = ca[0] if ca else 0
    rb = cb[0] if cb else 0
    va = vb = False  # run values; runs start with background
    while ia < len(ca) and ib < len(cb):
        step = min(ra, rb)
        if va and vb:
            inter += step
        ra -= step
        rb -= step
        while ra == 0 and ia + 1 < len(ca):
            ia += 1
            va = not va
            ra = ca[ia]
        while rb == 0 and ib + 1 < len(cb):
            ib += 1
            vb = not vb
            rb = cb[ib]
        if ra == 0 or rb == 0:
            break
    union = a.area + b.area - inter
    return inter / union if union else 0.0


# --- average precision -----------------------------------------------------


@dataclass
class EvalEntry:
    """One prediction or ground truth with a box and/or mask geometry."""

    image_id: int
    class_id: int
    score: float = 1.0
    box: np.ndarray | None = None
    mask: Rle | None = None

    def area(self) -> float:
        if self.mask is not None:
            return float(self.mask.area)
        if self.box is None:
            raise ContractError("entry carries neither box nor mask")
        return float(box_area(np.asarray(self.box, dtype=np.float64)))


def geometry_iou_fn(kind: str) -> Callable[[EvalEntry, EvalEntry], float]:
    if kind == "box":
        return lambda p, g: box_iou(p.box, g.box)
    if kind == "mask":
        return lambda p, g: mask_iou(rle_decode(p.mask), rle_decode(g.mask))
    if kind == "boundary":
        return lambda p, g: boundary_iou(rle_decode(p.mask), rle_decode(g.mask))
    raise ContractError(f"unknown geometry kind {kind!r}")


def match_predictions(preds: Sequence[EvalEntry], gts: Sequence[EvalEntry],
                      iou_thresh: float, iou_fn: Callable,
                      ignore_gts: Sequence[EvalEntry] = (),
                      ignore_pred: Callable[[EvalEntry], bool] | None = None):
    """Greedy score-order matching. Returns (order, flags) with one flag of
    ``tp``/``fp``/``ig`` per prediction, in descending-score order.

    Each prediction claims the unmatched same-image gt with the highest IoU
    and is a TP iff that IoU strictly surpasses the threshold; the claimed gt
    then leaves the pool. Failed predictions are excluded from ranking
    (``ig``) when they overlap an ignore-listed gt above the threshold, or
    when ``ignore_pred`` says so (area-bucket exclusion).
    """
    order = np.lexsort((np.arange(len(preds)), -np.asarray([p.score for p in preds])))
    by_image: dict = {}
    for gi, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(gi)
    ignore_by_image: dict = {}
    for g in ignore_gts:
        ignore_by_image.setdefault(g.image_id, []).append(g)
    matched = np.zeros(len(gts), dtype=bool)

    flags = []
    for pi in order:
        p = preds[pi]
        best_gt, best_iou = -1, 0.0
        for gi in by_image.get(p.image_id, []):
            if matched[gi]:
                continue
            v = iou_fn(p, gts[gi])
            if v > best_iou:
                best_gt, best_iou = gi, v
        if best_gt >= 0 and best_iou > iou_thresh:
            matched[best_gt] = True
            flags.append("tp")
            continue
        if any(iou_fn(p, g) > iou_thresh for g in ignore_by_image.get(p.image_id, [])):
            flags.append("ig")
        elif ignore_pred is not None and ignore_pred(p):
            flags.append("ig")
        else:
            flags.append("fp")
    return order, flags


@dataclass
class PrCurve:
    """Rank-by-rank (recall, precision) points plus the monotone envelope.

    ``envelope[k]`` is the highest precision at any recall >= ``recall[k]``;
    it is non-increasing by construction and carries the whole AP area.
    """

    recall: np.ndarray
    precision: np.ndarray
    envelope: np.ndarray

    def area(self) -> float:
        """Exact area under the envelope, zero beyond the last recall point.

        The envelope is constant between consecutive achieved recalls (on a
        recall-increasing step precision always rises into the step, so the
        piecewise-linear curve never exceeds its right endpoint's suffix max),
        which makes the step sum exact.
        """
        total = 0.0
        r_prev = 0.0
        for r, m in zip(self.recall, self.envelope):
            total += (r - r_prev) * m
            r_prev = r
        return float(total)


def pr_curve(tp_flags: Sequence[bool], n_gt: int) -> PrCurve:
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1, dtype=np.float64)
    precision = tp / ranks
    return PrCurve(recall=tp / n_gt, precision=precision,
                   envelope=np.maximum.accumulate(precision[::-1])[::-1])


def ap_single(preds: Sequence[EvalEntry], gts: Sequence[EvalEntry],
              iou_thresh: float, iou_fn: Callable,
              ignore_gts: Sequence[EvalEntry] = (),
              ignore_pred: Callable[[EvalEntry], bool] | None = None) -> float:
    """Area under the monotone precision-recall envelope for one class.

    The envelope extends flat from the first rank back to recall zero and is
    taken as zero beyond the highest achieved recall; the area is exact (the
    envelope is piecewise constant between achieved recall values).
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ContractError("iou threshold must lie in (0, 1]")
    if not gts:
        return 0.0
    _, flags = match_predictions(preds, gts, iou_thresh, iou_fn, ignore_gts, ignore_pred)
    tp_flags = [f == "tp" for f in flags if f != "ig"]
    if not tp_flags:
        return 0.0
    return pr_curve(tp_flags, len(gts)).area()


def _in_bucket(area: float, bucket: str) -> bool:
    if bucket == "small":
        return area < SMALL_AREA
    if bucket == "medium":
        return SMALL_AREA <= area <= LARGE_AREA
    if bucket == "large":
        return area > LARGE_AREA
    raise ContractError(f"unknown bucket {bucket!r}")


def ap_suite(preds: Sequence[EvalEntry], gts: Sequence[EvalEntry], kind: str = "box") -> dict:
    """COCO-style AP report: 10-threshold mean plus AP50/75 and size buckets.

    Per-class APs are averaged over the classes present in the ground truth;
    a bucket with no ground truth anywhere reports -1.
    """
    iou_fn = geometry_iou_fn(kind)
    classes = sorted({g.class_id for g in gts})
    preds_by_class = {c: [p for p in preds if p.class_id == c] for c in classes}
    gts_by_class = {c: [g for g in gts if g.class_id == c] for c in classes}

    def class_mean(values):
        return float(np.mean(values)) if values else -1.0

    per_threshold = {t: [] for t in AP_IOU_THRESHOLDS}
    all_threshold_means = []
    for c in classes:
        aps = [ap_single(preds_by_class[c], gts_by_class[c], t, iou_fn)
               for t in AP_IOU_THRESHOLDS]
        for t, v in zip(AP_IOU_THRESHOLDS, aps):
            per_threshold[t].append(v)
        all_threshold_means.append(float(np.mean(aps)))

    report = {
        "AP": class_mean(all_threshold_means),
        "AP50": class_mean(per_threshold[0.5]),
        "AP75": class_mean(per_threshold[0.75]),
    }

    for bucket, key in (("small", "AP_S"), ("medium", "AP_M"), ("large", "AP_L")):
        bucket_means = []
        for c in classes:
            real = [g for g in gts_by_class[c] if _in_bucket(g.area(), bucket)]
            if not real:
                continue
            ignore = [g for g in gts_by_class[c] if not _in_bucket(g.area(), bucket)]
            pred_out = lambda p: not _in_bucket(p.area(), bucket)  # noqa: E731
            aps = [ap_single(preds_by_class[c], real, t, iou_fn, ignore, pred_out)
                   for t in AP_IOU_THRESHOLDS]
            bucket_means.append(float(np.mean(aps)))
        report[key] = class_mean(bucket_means)
    return report


# --- boundary IoU ----------------------------------------------------------


def boundary_band(mask: np.ndarray, d: int) -> np.ndarray:
    """Mask pixels within Chebyshev distance d of background (or the border)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=np.ones((2 * d + 1, 2 * d + 1), dtype=bool),
                                    border_value=0)
    return mask & ~eroded


def boundary_iou(a: np.ndarray, b: np.ndarray, d_frac: float = BOUNDARY_FRACTION) -> float:
    """Mask IoU restricted to the union of both masks' contour bands.

    The band width is ``round(d_frac * diagonal)`` pixels (at least one).
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask canvases differ: {a.shape} vs {b.shape}")
    d = max(1, int(round(d_frac * float(np.hypot(*a.shape)))))
    band = boundary_band(a, d) | boundary_band(b, d)
    return mask_iou(a & band, b & band)


# --- panoptic quality ------------------------------------------------------


@dataclass
class PanopticSegment:
    """A labeled, non-overlapping region of one image."""

    class_id: int
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class PqClassStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def denom(self) -> float:
        return self.tp + 0.5 * self.fp + 0.5 * self.fn

    @property
    def pq(self) -> float:
        return self.iou_sum / self.denom if self.denom else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        return self.tp / self.denom if self.denom else 0.0


@dataclass
class PqReport:
    per_class: dict
    pq: float
    sq: float
    rq: float
    pq_thing: float
    pq_stuff: float

    def to_dict(self) -> dict:
        return {
            "PQ": self.pq,
            "SQ": self.sq,
            "RQ": self.rq,
            "PQ_thing": self.pq_thing,
            "PQ_stuff": self.pq_stuff,
            "per_class": {
                str(c): {"PQ": s.pq, "SQ": s.sq, "RQ": s.rq,
                         "TP": s.tp, "FP": s.fp, "FN": s.fn}
                for c, s in sorted(self.per_class.items())
            },
        }


def _check_disjoint(segments: Sequence[PanopticSegment], what: str):
    if not segments:
        return
    total = np.zeros(segments[0].mask.shape, dtype=np.int64)
    for s in segments:
        if s.mask.shape != total.shape:
            raise ContractError(f"{what} segment canvases differ")
        total += s.mask
    if np.any(total > 1):
        raise ContractError(f"{what} segments overlap")


def pq(preds: Mapping[int, Sequence[PanopticSegment]],
       gts: Mapping[int, Sequence[PanopticSegment]],
       thing_classes: set, stuff_classes: set) -> PqReport:
    """Panoptic quality with IoU > 0.5 segment matching.

    Segments must be pixel-disjoint per image (matching is then unique).
    Report averages run over the classes present in the ground truth.
    """
    stats: dict[int, PqClassStats] = {}

    def stat(c: int) -> PqClassStats:
        return stats.setdefault(c, PqClassStats())

    gt_classes: set = set()
    for image_id in sorted(set(preds) | set(gts)):
        p_segs = list(preds.get(image_id, []))
        g_segs = list(gts.get(image_id, []))
        _check_disjoint(p_segs, "predicted")
        _check_disjoint(g_segs, "ground-truth")
        gt_classes.update(g.class_id for g in g_segs)

        matched_p: set = set()
        matched_g: set = set()
        for gi, g in enumerate(g_segs):
            for pi, p in enumerate(p_segs):
                if pi in matched_p or p.class_id != g.class_id:
                    continue
                v = mask_iou(p.mask, g.mask)
                if v > 0.5:
                    s = stat(g.class_id)
                    s.tp += 1
                    s.iou_sum += v
                    matched_p.add(pi)
                    matched_g.add(gi)
                    break  # disjointness makes the match unique
        for gi, g in enumerate(g_segs):
            if gi not in matched_g:
                stat(g.class_id).fn += 1
        for pi, p in enumerate(p_segs):
            if pi not in matched_p:
                stat(p.class_id).fp += 1

    def average(classes):
        present = [c for c in classes if c in stats]
        if not present:
            return 0.0, 0.0, 0.0
        return (
            float(np.mean([stats[c].pq for c in present])),
            float(np.mean([stats[c].sq for c in present])),
            float(np.mean([stats[c].rq for c in present])),
        )

    pq_all, sq_all, rq_all = average(sorted(gt_classes))
    pq_th, _, _ = average(sorted(gt_classes & set(thing_classes)))
    pq_st, _, _ = average(sorted(gt_classes & set(stuff_classes)))
    return PqReport(per_class=stats, pq=pq_all, sq=sq_all, rq=rq_all,
                    pq_thing=pq_th, pq_stuff=pq_st)
