"""Command-line entry point.

Every subcommand prints one JSON report on stdout::

    {"tool": "splitsa", "version": ..., "command": ..., "config": {...},
     "result": {...}, "duration_ms": ...}

Diagnostics go to stderr. Exit codes: 0 success, 1 I/O or unreadable input,
2 bad arguments or configuration, 3 internal invariant violation.

Relative output paths are resolved against ``$SPLITSA_OUT_DIR`` when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .abstraction import (
    MlpSpec, PRESETS, backbone_input_features, backbone_mlps, count_madds, count_params,
    default_backbone_config, init_weights, load_weights, run_backbone,
)
from .errors import ArgumentError, ConfigurationError, MeasurementError, ParseError
from .pointcloud import CameraModel, SemanticMask, foreground_indices, load_cloud, paint_points, save_cloud
from .quant import (
    DEFAULT_BINS, DEFAULT_EPSILON, block_contrast, calibrate, head_param_count, kl_matrix,
    load_tensor, parse_granularity, partition_channels, params_from_stats, quant_error, quantize,
    dequantize, role_layout, save_tensor,
)
from .sampling import BallQuerySpec, BiasSpec, ball_query, biased_fps, fps, split_sample
from .sched import (
    REFERENCE_PROFILE, LatencyProfile, StageDag, build_naive, build_split, critical_path, simulate,
)
from .svg import gantt_svg, heatmap_svg
from .synthetic import head_activations

OUT_DIR_ENV = "SPLITSA_OUT_DIR"


def _out_path(path) -> Path:
    p = Path(path)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _read_cloud(path, fmt):
    return load_cloud(Path(path).read_bytes(), fmt)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None


# -- subcommands -----------------------------------------------------------------------

def cmd_sample(args):
    p = _read_cloud(args.input, args.in_format)
    result = {"points": len(p), "foreground_points": int(len(foreground_indices(p)))}
    if args.split:
        normal, bias = split_sample(p, args.m, args.w0, args.start, args.start_bias)
        result["normal"] = normal.tolist()
        result["bias"] = bias.tolist()
        result["foreground_selected"] = {"normal": int((p.classes[normal] > 0).sum()),
                                         "bias": int((p.classes[bias] > 0).sum())}
        centroids = np.concatenate([normal, bias])
    else:
        if args.plain:
            idx = fps(p, args.m, args.start)
        else:
            idx = biased_fps(p, args.m, BiasSpec.from_painted(p, args.w0), args.start)
        result["indices"] = idx.tolist()
        result["foreground_selected"] = int((p.classes[idx] > 0).sum())
        centroids = idx
    if args.radius is not None:
        groups = ball_query(p, centroids, BallQuerySpec(args.radius, args.k))
        result["groups"] = groups.tolist()
    if args.out:
        payload = {k: result[k] for k in ("indices", "normal", "bias", "groups") if k in result}
        _out_path(args.out).write_text(json.dumps(payload))
    return result


def cmd_paint(args):
    cloud = _read_cloud(args.input, args.in_format).cloud
    m = _read_json(args.mask)
    try:
        mask = SemanticMask(int(m["width"]), int(m["height"]), m["labels"])
        cam = CameraModel.from_dict(_read_json(args.camera))
    except (KeyError, TypeError) as exc:
        raise ArgumentError(f"malformed mask or camera JSON: {exc}") from None
    painted = paint_points(cloud, mask, cam)
    if args.out:
        _out_path(args.out).write_bytes(save_cloud(painted, args.format))
    fg = foreground_indices(painted)
    return {"points": len(painted), "foreground_points": int(len(fg)),
            "num_classes": painted.num_classes, "classes": painted.classes.tolist()}


def cmd_backbone(args):
    p = _read_cloud(args.input, args.in_format)
    feats = backbone_input_features(p)
    cfg = default_backbone_config(feats.shape[1], w0=args.w0)
    if args.start_normal or args.start_bias:
        cfg = replace(cfg, start_normal=args.start_normal, start_bias=args.start_bias)
    weights = load_weights(args.weights) if args.weights else init_weights(backbone_mlps(cfg), args.seed)
    res = run_backbone(p, cfg, weights, feats)
    result = {"layers": res.shapes(), "fused_points": len(res.xyz),
              "fused_channels": int(res.features.shape[1])}
    if args.out:
        fused = np.concatenate([res.xyz, res.features], axis=1)
        _out_path(args.out).write_bytes(save_tensor(fused))
        result["tensor"] = {"path": str(args.out), "shape": list(fused.shape)}
    return result


def cmd_stats(args):
    if args.preset:
        specs, points = PRESETS[args.preset]
    else:
        spec = _read_json(args.spec)
        try:
            specs = [MlpSpec.from_dict(d) for d in spec["mlps"]]
            points = [int(d.get("points", 1)) for d in spec["mlps"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ArgumentError(f"malformed MLP spec: {exc}") from None
    return {"params": count_params(specs), "madds": count_madds(specs, points),
            "mlps": [{"input_width": s.input_width, "widths": list(s.widths),
                      "bias": s.has_bias, "batchnorm": s.has_batchnorm, "points": int(n)}
                     for s, n in zip(specs, points)]}


def cmd_quantize(args):
    layout = role_layout(args.module, args.layout)
    if args.input:
        samples = [load_tensor(Path(f).read_bytes()) for f in args.input]
    else:
        samples = [head_activations(layout, args.samples, args.seed)]
    shapes = {np.shape(s)[-1] for s in samples}
    if shapes != {layout.total}:
        raise ArgumentError(f"tensors have {sorted(shapes)} channels, {args.module} layout "
                            f"for {args.layout} has {layout.total}")
    stats = calibrate(samples, bins=args.bins)
    if args.granularity == "group":
        gran = parse_granularity(f"group:{len(layout.groups)}")
    else:
        gran = parse_granularity(args.granularity, layout)
    part = partition_channels(layout.total, gran)
    x = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1, layout.total) for s in samples])
    params = params_from_stats(stats, part)
    q = quantize(x, part, params)
    recon = dequantize(q)
    err = quant_error(x, gran)
    count = head_param_count(args.granularity, args.layout)
    return {"module": args.module, "dataset": args.layout, "channels": layout.total,
            "layout": layout.to_dict(), "groups": [list(s) for s in part],
            "quant_params": [p.to_dict() for p in params],
            "head_param_count": count,
            "calibration": {"min": stats.min, "max": stats.max, "samples": stats.count},
            "quant_error": err,
            "reconstruction_max_abs": float(np.max(np.abs(recon - x)))}


def cmd_klmap(args):
    if args.input:
        samples = [load_tensor(Path(f).read_bytes()) for f in args.input]
    else:
        samples = [head_activations(role_layout("proposal", args.layout), args.samples, args.seed)]
    stats = calibrate(samples, bins=args.bins, shared_range=True)
    kl = kl_matrix(stats, args.epsilon)
    result = {"channels": stats.channels, "bins": stats.bins,
              "max": float(kl.max()), "mean": float(kl.mean())}
    blocks = args.blocks
    if blocks is None and not args.input:
        blocks = role_layout("proposal", args.layout).sizes()
    if blocks:
        result["blocks"] = list(blocks)
        result["block_contrast"] = block_contrast(kl, blocks)
    if args.csv:
        path = _out_path(args.csv)
        path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in kl) + "\n")
        result["csv"] = str(path)
    if args.svg:
        path = _out_path(args.svg)
        path.write_text(heatmap_svg(kl, title="channel KL divergence"))
        result["svg"] = str(path)
    return result


def cmd_schedule(args):
    if args.dag:
        dag = StageDag.from_dict(_read_json(args.dag))
        mode = "dag"
    else:
        profile = LatencyProfile.from_dict(_read_json(args.profile)) if args.profile else REFERENCE_PROFILE
        if args.mode == "naive":
            dag = build_naive(profile, args.transfer_ms)
        else:
            dag = build_split(profile, args.split_factor, args.transfer_ms)
        mode = args.mode
    tl = simulate(dag)
    result = {"mode": mode, "critical_path": critical_path(dag), **tl.to_dict()}
    if args.csv:
        _out_path(args.csv).write_text(tl.to_csv())
    if args.svg:
        _out_path(args.svg).write_text(gantt_svg(tl, title=f"{mode} schedule"))
    if args.json:
        _out_path(args.json).write_text(json.dumps(tl.to_dict(), indent=2))
    return result


# -- parser -------------------------------------------------------------------------------

def _blocks(text):
    try:
        sizes = [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad block sizes {text!r}") from None
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitsa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def cloud_input(p):
        p.add_argument("input", help="point cloud file")
        p.add_argument("--in-format", choices=("auto", "text", "binary"), default="auto")

    p = sub.add_parser("sample", help="farthest point sampling, biased or split")
    cloud_input(p)
    p.add_argument("--m", type=int, required=True, help="centroids (total when --split)")
    p.add_argument("--w0", type=float, default=2.0)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--start-bias", type=int, default=0)
    p.add_argument("--split", action="store_true")
    p.add_argument("--plain", action="store_true", help="unbiased FPS")
    p.add_argument("--radius", type=float, help="also group with a ball query")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--out", help="write index arrays as JSON")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("paint", help="attach mask labels to projected points")
    cloud_input(p)
    p.add_argument("--mask", required=True, help='JSON {"width", "height", "labels"}')
    p.add_argument("--camera", required=True, help="JSON fx, fy, cx, cy, rotation, translation")
    p.add_argument("--out")
    p.add_argument("--format", choices=("text", "binary"), default="binary")
    p.set_defaults(func=cmd_paint)

    p = sub.add_parser("backbone", help="run the two-pipeline SA backbone")
    cloud_input(p)
    p.add_argument("--weights", help="weight manifest JSON (blob alongside as .bin)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w0", type=float, default=2.0)
    p.add_argument("--start-normal", type=int, default=0)
    p.add_argument("--start-bias", type=int, default=0)
    p.add_argument("--out", help="fused coords+features as a PSTN tensor")
    p.set_defaults(func=cmd_backbone)

    p = sub.add_parser("stats", help="parameter and multiply-add counts")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--spec", help='JSON {"mlps": [{"input_width", "widths", "bias", "batchnorm", "points"}]}')
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("quantize", help="calibrate and quantize head activations")
    p.add_argument("--input", nargs="*", help="PSTN activation tensors (synthetic if omitted)")
    p.add_argument("--granularity", default="role", help="layer | group | group:N | channel | role")
    p.add_argument("--layout", choices=("sunrgbd", "scannet"), default="sunrgbd")
    p.add_argument("--module", choices=("voting", "proposal"), default="proposal")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--samples", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("klmap", help="pairwise KL divergence of channel activations")
    p.add_argument("input", nargs="*", help="PSTN activation tensors (synthetic if omitted)")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--blocks", type=_blocks, help="comma-separated block sizes, e.g. 3,34,42")
    p.add_argument("--layout", choices=("sunrgbd", "scannet"), default="sunrgbd")
    p.add_argument("--samples", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_klmap)

    p = sub.add_parser("schedule", help="simulate the naive or split two-processor pipeline")
    p.add_argument("--profile", help="latency profile JSON (default: per-layer INT8 profile)")
    p.add_argument("--dag", help="explicit stage graph JSON")
    p.add_argument("--mode", choices=("naive", "split"), default="split")
    p.add_argument("--split-factor", type=float, default=0.5)
    p.add_argument("--transfer-ms", type=float, default=0.0)
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.add_argument("--json")
    p.set_defaults(func=cmd_schedule)
    return parser


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        result = args.func(args)
    except (ArgumentError, ConfigurationError, MeasurementError) as exc:
        print(f"splitsa {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ParseError) as exc:
        print(f"splitsa {args.command}: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"splitsa {args.command}: internal invariant violated: {exc}", file=sys.stderr)
        return 3
    report = {"tool": "splitsa", "version": __version__, "command": args.command,
              "config": _config(args), "result": result,
              "duration_ms": round((time.perf_counter() - t0) * 1000, 3)}
    json.dump(report, sys.stdout)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
