"""Command-line interface: refine, eval, bench and convert subcommands.

Option values resolve as CLI flag > ``SPSR_*`` environment variable >
built-in default. All file outputs are deterministic for fixed inputs and
seed; wall-clock timings go to stdout only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import io
from .cost import compare
from .errors import ContractError, SchemaError
from .metrics import ap_suite, pq
from .pipeline import (NeckFeatures, RoiInput, RunConfig, analytic_dense_ledger,
                       run_refinement)
from .synthetic import SyntheticShapeSpec, gen_synthetic, reference_mask


def _env(name: str, default, cast):
    raw = os.environ.get(f"SPSR_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError as e:
        raise SchemaError(f"bad SPSR_{name}={raw!r}: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spsr",
        description="Sparse fine-grained mask refinement and segmentation metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=_env("SEED", 0, int))
    common.add_argument("--stages", type=int, default=_env("STAGES", 3, int),
                        help="refinement stages after the coarse one (1-3)")
    common.add_argument("--top-n", type=int, default=_env("TOP_N", 10000, int),
                        help="image-wide active-cell budget per stage")
    common.add_argument("--f0", type=int, default=_env("F0", 256, int),
                        help="feature size of the coarse stage")
    common.add_argument("--f-neck", type=int, default=_env("F_NECK", 256, int),
                        help="channel count of the image-level feature grids")
    common.add_argument("--f-query", type=int, default=_env("F_QUERY", 256, int),
                        help="length of the per-RoI query vectors")
    common.add_argument("--threads", type=int, default=_env("THREADS", 1, int))

    p = sub.add_parser("refine", parents=[common],
                       help="refine RoI masks; writes masks.json and ledger.json",
                       epilog="RoI schema: [{box: [x0,y0,x1,y1], class: int, score: float}]; "
                              "masks use the sps-rle/1 format (column-major counts, "
                              "background first). All RoIs share one image's budget.")
    p.add_argument("--mode", choices=("oracle", "weights"),
                   default=_env("MODE", "oracle", str))
    p.add_argument("--rois", required=True,
                   help="JSON list of {box: [x0,y0,x1,y1], class, score}")
    p.add_argument("--ref-masks", default=None,
                   help="RoI-frame reference masks (sps-rle/1), oracle mode")
    p.add_argument("--weights", default=None, help="binary weight bundle")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), default=None)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth",
                       epilog="det/seg/boundary records: [{image_id, class, score, box "
                              "and/or rle}]; panoptic records: [{image_id, segments: "
                              "[{class, is_thing, rle}]}]. RLE is sps-rle/1.")
    p.add_argument("--task", choices=("det", "seg", "boundary", "panoptic"), required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--out", default=None, help="write the report JSON here as well")

    p = sub.add_parser("bench", parents=[common],
                       help="compare sparse vs dense pipelines on synthetic masks")
    p.add_argument("--count", type=int, default=50, help="corpus size")
    p.add_argument("--shape", choices=("disk", "ellipse", "blob"), default="blob")
    p.add_argument("--canvas", type=int, default=448, help="square canvas side")
    p.add_argument("--force-dense-active", action="store_true",
                   help="run the sparse route with every cell active")
    p.add_argument("--out", default=None, help="write the report JSON here")

    p = sub.add_parser("convert", help="convert SPS tensor dumps binary <-> JSON",
                       epilog="Binary layout (little-endian): magic SPS1; F, H, W, N_A, "
                              "N_P as u32; active then passive rows as f32; row-major "
                              "u32 index map. JSON uses the sps-tensor/1 schema.")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True,
                   help="direction chosen by extension: .json writes JSON, else binary")
    return parser


def _run_config(args, mode: str, image_hw=None) -> RunConfig:
    return RunConfig(stages=args.stages, top_n_active=args.top_n, seed=args.seed,
                     mode=mode, f0=args.f0, f_query=args.f_query, f_neck=args.f_neck,
                     threads=args.threads, image_hw=image_hw)


def cmd_refine(args) -> int:
    image_hw = (args.image_size[1], args.image_size[0]) if args.image_size else None
    config = _run_config(args, args.mode, image_hw)
    rois = io.load_rois(args.rois)
    if config.mode == "oracle":
        if not args.ref_masks:
            raise SchemaError("oracle mode needs --ref-masks")
        masks = io.load_ref_masks(args.ref_masks)
        if len(masks) != len(rois):
            raise SchemaError(f"{len(rois)} RoIs but {len(masks)} reference masks")
        for roi, mask in zip(rois, masks):
            roi.ref_mask = mask
    weights = io.load_weights(args.weights) if args.weights else None

    result = run_refinement(rois, config, weights=weights)

    out_masks = [r.probs >= 0.5 for r in result.per_roi]
    io.dump_json(os.path.join(args.out, "masks.json"),
                 io.masks_to_dict(out_masks, [r.score for r in result.per_roi],
                                  [r.class_id for r in result.per_roi]))
    report = compare(analytic_dense_ledger(config, len(rois)), result.ledger)
    for stage in report["stages"]:
        if stage["stage"] in result.stage_fractions:
            stage["active_fraction"] = result.stage_fractions[stage["stage"]]
    io.dump_json(os.path.join(args.out, "ledger.json"), report)
    print(f"refined {len(rois)} RoIs -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.task == "panoptic":
        preds, things_p, stuffs_p = io.load_panoptic(args.preds)
        gts, things_g, stuffs_g = io.load_panoptic(args.gts)
        things, stuffs = things_p | things_g, stuffs_p | stuffs_g
        if things & stuffs:
            raise SchemaError(f"classes declared both thing and stuff: {sorted(things & stuffs)}")
        report = pq(preds, gts, things, stuffs).to_dict()
    else:
        kind = {"det": "box", "seg": "mask", "boundary": "boundary"}[args.task]
        need_mask = kind != "box"
        preds = io.load_eval_entries(args.preds, need_score=True, need_mask=need_mask)
        gts = io.load_eval_entries(args.gts, need_score=False, need_mask=need_mask)
        report = ap_suite(preds, gts, kind)
    print(json.dumps(report, sort_keys=True, indent=2))
    if args.out:
        io.dump_json(args.out, report)
    return 0


def cmd_bench(args) -> int:
    config = _run_config(args, "oracle", (args.canvas, args.canvas))
    if args.force_dense_active:
        config.top_n_active = None
    side = config.final_side
    rois = []
    for i in range(args.count):
        spec = SyntheticShapeSpec(shape=args.shape, canvas_h=args.canvas,
                                  canvas_w=args.canvas, seed=args.seed + i)
        _, box, shape = gen_synthetic(spec)
        rois.append(RoiInput(box=box, ref_mask=reference_mask(shape, box, side)))
    neck = NeckFeatures.synthesize(config.seed, (args.canvas, args.canvas), config.f_neck)

    t0 = time.perf_counter()
    dense = run_refinement(rois, config, neck=neck, sparse=False)
    t1 = time.perf_counter()
    sparse = run_refinement(rois, config, neck=neck, sparse=True)
    t2 = time.perf_counter()

    report = compare(dense.ledger, sparse.ledger)
    for stage in report["stages"]:
        if stage["stage"] in sparse.stage_fractions:
            stage["active_fraction"] = sparse.stage_fractions[stage["stage"]]
    report["corpus"] = {"count": args.count, "shape": args.shape,
                        "canvas": args.canvas, "seed": args.seed,
                        "f0": config.f0, "stages": config.stages,
                        "top_n": config.top_n_active}
    print(f"reduction_fraction {report['reduction_fraction']:.4f}")
    print(f"wall_time dense={t1 - t0:.3f}s sparse={t2 - t1:.3f}s")
    for stage in report["stages"]:
        if "active_fraction" in stage:
            print(f"stage {stage['stage']} active_fraction {stage['active_fraction']:.4f}")
    if args.out:
        io.dump_json(args.out, report)
    return 0


def cmd_convert(args) -> int:
    to_json = args.output.endswith(".json")
    if args.input.endswith(".json"):
        tensor = io.sps_from_dict(io.load_json(args.input))
    else:
        tensor = io.load_sps(args.input)
    if to_json:
        io.dump_json(args.output, io.sps_to_dict(tensor))
    else:
        io.save_sps(args.output, tensor)
    print(f"converted {args.input} -> {args.output}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"refine": cmd_refine, "eval": cmd_eval,
                "bench": cmd_bench, "convert": cmd_convert}
    try:
        return handlers[args.command](args)
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ContractError as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
