"""File formats: binary weight bundles, SPS tensor dumps, JSON records.

All binary layouts are little-endian. JSON reports are dumped with sorted
keys and an indent of 2, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Mapping

import numpy as np

from .errors import SchemaError
from .metrics import EvalEntry, PanopticSegment, Rle, rle_decode, rle_encode
from .pipeline import RoiBox, RoiInput
from .tensor import SpsTensor

SPS_MAGIC = b"SPS1"
MASK_FORMAT = "sps-rle/1"
TENSOR_FORMAT = "sps-tensor/1"


def dump_json(path: str, obj):
    """Pretty-printed JSON with sorted keys, written atomically."""
    write_atomic(path, json.dumps(obj, sort_keys=True, indent=2).encode() + b"\n")


def write_atomic(path: str, data: bytes):
    """Write via a temp file and rename, so failures leave no partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"cannot read JSON from {path}: {e}") from e


# --- weight bundles ----------------------------------------------------------
#
# Layout per array: name length (u16), name bytes, rank (u8), dims (u32 each),
# then the f32 payload.


def save_weights(path: str, arrays: Mapping[str, np.ndarray]):
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    write_atomic(path, b"".join(chunks))


def load_weights(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise SchemaError(f"cannot read weights from {path}: {e}") from e
    arrays = {}
    pos = 0
    while pos < len(data):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
        except (struct.error, ValueError) as e:
            raise SchemaError(f"truncated weight bundle {path}: {e}") from e
        arrays[name] = arr.reshape(dims).astype(np.float64)
    return arrays


# --- SPS tensor dumps --------------------------------------------------------
#
# Header: magic "SPS1", then F, H, W, N_A, N_P as u32. Payload: active rows,
# passive rows (f32, row-major), then the index map (u32, row-major).


def save_sps(path: str, t: SpsTensor):
    header = SPS_MAGIC + struct.pack("<5I", t.f, t.h, t.w, t.n_active, t.n_passive)
    body = (np.ascontiguousarray(t.active, dtype="<f4").tobytes()
            + np.ascontiguousarray(t.passive, dtype="<f4").tobytes()
            + np.ascontiguousarray(t.index_map, dtype="<u4").tobytes())
    write_atomic(path, header + body)


def load_sps(path: str) -> SpsTensor:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise SchemaError(f"cannot read tensor from {path}: {e}") from e
    if data[:4] != SPS_MAGIC:
        raise SchemaError(f"{path} is not an SPS tensor dump (bad magic)")
    try:
        f, h, w, n_a, n_p = struct.unpack_from("<5I", data, 4)
        pos = 4 + 20
        active = np.frombuffer(data, dtype="<f4", count=n_a * f, offset=pos).reshape(n_a, f)
        pos += 4 * n_a * f
        passive = np.frombuffer(data, dtype="<f4", count=n_p * f, offset=pos).reshape(n_p, f)
        pos += 4 * n_p * f
        index = np.frombuffer(data, dtype="<u4", count=h * w, offset=pos).reshape(h, w)
    except ValueError as e:
        raise SchemaError(f"truncated SPS dump {path}: {e}") from e
    return SpsTensor(active=active, passive=passive, index_map=index)


def sps_to_dict(t: SpsTensor) -> dict:
    return {
        "format": TENSOR_FORMAT,
        "f": t.f, "h": t.h, "w": t.w,
        "active": np.asarray(t.active, dtype=np.float32).tolist(),
        "passive": np.asarray(t.passive, dtype=np.float32).tolist(),
        "index_map": t.index_map.tolist(),
    }


def sps_from_dict(d: dict) -> SpsTensor:
    try:
        if d.get("format") != TENSOR_FORMAT:
            raise SchemaError(f"unknown tensor format {d.get('format')!r}")
        f = int(d["f"])
        active = np.asarray(d["active"], dtype=np.float64).reshape(-1, f)
        passive = np.asarray(d["passive"], dtype=np.float64).reshape(-1, f)
        index = np.asarray(d["index_map"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed tensor record: {e}") from e
    return SpsTensor(active=active, passive=passive, index_map=index)


# --- JSON record schemas -----------------------------------------------------


def rle_to_dict(rle: Rle) -> dict:
    return {"height": rle.height, "width": rle.width, "counts": list(rle.counts)}


def rle_from_dict(d: dict) -> Rle:
    try:
        return Rle(height=int(d["height"]), width=int(d["width"]),
                   counts=tuple(int(c) for c in d["counts"]))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed RLE record: {e}") from e


def load_rois(path: str) -> list[RoiInput]:
    """RoI records: list of {box: [x0,y0,x1,y1], class: int, score: float}."""
    data = load_json(path)
    if not isinstance(data, list):
        raise SchemaError(f"{path}: RoI file must contain a list")
    rois = []
    for i, rec in enumerate(data):
        try:
            box = RoiBox(*[float(v) for v in rec["box"]])
            rois.append(RoiInput(box=box, cls_score=float(rec.get("score", 1.0)),
                                 class_id=int(rec.get("class", 0))))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{path}: bad RoI record {i}: {e}") from e
    return rois


def load_ref_masks(path: str) -> list[np.ndarray]:
    """Reference masks in RoI frame, aligned with the RoI file by index."""
    data = load_json(path)
    if not isinstance(data, dict) or data.get("format") != MASK_FORMAT:
        raise SchemaError(f"{path}: expected a {{format: {MASK_FORMAT!r}, masks: [...]}} object")
    try:
        return [rle_decode(rle_from_dict(m)) for m in data["masks"]]
    except (KeyError, TypeError) as e:
        raise SchemaError(f"{path}: malformed mask list: {e}") from e


def masks_to_dict(masks: list[np.ndarray], scores: list[float],
                  classes: list[int]) -> dict:
    out = []
    for mask, score, cls in zip(masks, scores, classes):
        rec = rle_to_dict(rle_encode(mask))
        rec["score"] = float(score)
        rec["class"] = int(cls)
        out.append(rec)
    return {"format": MASK_FORMAT, "masks": out}


def load_eval_entries(path: str, need_score: bool, need_mask: bool = False) -> list[EvalEntry]:
    """Detection/segmentation records with a box and/or mask geometry."""
    data = load_json(path)
    if not isinstance(data, list):
        raise SchemaError(f"{path}: evaluation file must contain a list")
    entries = []
    for i, rec in enumerate(data):
        try:
            if rec.get("iscrowd", False):
                raise SchemaError("crowd regions are not supported")
            box = np.asarray([float(v) for v in rec["box"]]) if "box" in rec else None
            mask = rle_from_dict(rec["rle"]) if "rle" in rec else None
            if box is None and mask is None:
                raise SchemaError("record carries neither box nor rle")
            if need_mask and mask is None:
                raise SchemaError("this task needs an rle mask per record")
            score = float(rec["score"]) if need_score else float(rec.get("score", 1.0))
            entries.append(EvalEntry(image_id=int(rec.get("image_id", 0)),
                                     class_id=int(rec["class"]), score=score,
                                     box=box, mask=mask))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{path}: bad record {i}: {e}") from e
    return entries


def load_panoptic(path: str):
    """Panoptic file: list of {image_id, segments: [{class, is_thing, rle}]}.

    Returns (segments by image, thing classes, stuff classes).
    """
    data = load_json(path)
    if not isinstance(data, list):
        raise SchemaError(f"{path}: panoptic file must contain a list")
    by_image: dict = {}
    things, stuffs = set(), set()
    for i, rec in enumerate(data):
        try:
            image_id = int(rec["image_id"])
            segs = []
            for seg in rec["segments"]:
                cls = int(seg["class"])
                (things if seg.get("is_thing", True) else stuffs).add(cls)
                segs.append(PanopticSegment(class_id=cls,
                                            mask=rle_decode(rle_from_dict(seg["rle"]))))
            by_image[image_id] = segs
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{path}: bad panoptic record {i}: {e}") from e
    return by_image, things, stuffs
