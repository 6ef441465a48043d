"""``panokit`` command line.

Subcommands: ``stitch``, ``demo-rig``, ``attend``, ``annotate``, ``score`` and
``filter``.  Every subcommand accepts ``--config FILE`` (a JSON object whose
keys are option names, e.g. ``{"top_k": 64}``); explicit flags win over config
values and unknown keys are rejected.  ``--verbose`` prints the resolved
options to stderr.

Exit codes: 0 success, 2 usage or validation error, 1 internal error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import (
    AttentionConfig,
    AttentionMask,
    HybridMask,
    IndexerConfig,
    PHALayer,
    TokenSequence,
    export_mask,
    swa,
)
from .evalkit import (
    EmptyInputError,
    FilterSpec,
    RecordError,
    category_report,
    filter_records,
    read_jsonl,
    write_jsonl,
)
from .numerics import DimensionError, LinearLayer, SplitMix64, save_checkpoint, write_matrix
from .pnm import PnmError, read_ppm, write_pgm, write_ppm
from .projection import DEMO_YAWS, CameraRig, PanoramaSpec, RgbImage, RigError, ring_rig, solid_images, stitch
from .scene import DepthMap, GeometryError, SchemaError, annotate_frame

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

DEMO_COLOURS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25), (145, 30, 180), (70, 240, 240)]


class UsageError(Exception):
    """Bad flags or inputs; reported with exit code 2."""


VALIDATION_ERRORS = (UsageError, RigError, PnmError, SchemaError, GeometryError, RecordError, EmptyInputError,
                     DimensionError)


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _input(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def _read_json(path: str, flag: str):
    try:
        return json.loads(_input(path, flag).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag}: {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _emit_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_stitch(args) -> int:
    _require(args, "rig", "images", "out")
    rig = CameraRig.from_json(_read_json(args.rig, "--rig"))
    paths = [p for p in args.images.split(",") if p]
    images = [RgbImage(read_ppm(_input(p, "--images"))) for p in paths]
    try:
        spec = PanoramaSpec(args.width, args.height, math.radians(args.lat_min), math.radians(args.lat_max))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pano = stitch(rig, images, spec, workers=args.workers)
    write_ppm(args.out, pano.pixels)
    if args.coverage:
        write_pgm(args.coverage, pano.coverage, maxval=255)
    uncovered = int((pano.coverage == 255).sum())
    print(f"panorama {spec.width}x{spec.height}: {pano.coverage.size - uncovered} covered, {uncovered} uncovered")
    return EXIT_OK


def cmd_demo_rig(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig = ring_rig(DEMO_YAWS, args.hfov, args.image_width, args.image_height)
    rig.save(out / "rig.json")
    names = []
    for i, img in enumerate(solid_images(rig, DEMO_COLOURS)):
        name = out / f"cam{i}.ppm"
        write_ppm(name, img.pixels)
        names.append(str(name))
    print(f"--rig {out / 'rig.json'} --images {','.join(names)}")
    return EXIT_OK


def patchify(rgb: np.ndarray, patch: int) -> tuple[np.ndarray, int, int]:
    """Row-major patches flattened to ``patch*patch*3`` values in [0, 1]."""
    h, w = rgb.shape[:2]
    if patch < 1 or h % patch or w % patch:
        raise UsageError(f"--patch {patch} does not divide the {w}x{h} image")
    gr, gc = h // patch, w // patch
    tiles = rgb.reshape(gr, patch, gc, patch, 3).transpose(0, 2, 1, 3, 4).reshape(gr * gc, -1)
    return tiles.astype(np.float64) / 255.0, gr, gc


def cmd_attend(args) -> int:
    _require(args, "image")
    tokens, gr, gc = patchify(read_ppm(_input(args.image, "--image")), args.patch)
    try:
        cfg = AttentionConfig(args.dim, args.heads, args.window, args.top_k)
        idx = IndexerConfig.from_bottleneck(args.dim, args.bottleneck, args.selector_heads)
        idx.check(args.dim)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 0 <= args.seed < 2**64:
        raise UsageError("--seed must fit in 64 unsigned bits")
    rng = SplitMix64(args.seed)
    embed = LinearLayer.init(rng, tokens.shape[1], args.dim)
    cls = rng.uniform(-1.0, 1.0, (1, args.dim))
    x = TokenSequence(np.vstack([cls, embed(tokens)]), has_cls=True)
    layer = PHALayer.init(rng, cfg, idx, gr, gc, has_cls=True)
    if args.oracle:
        out = layer.dense_reference(x, workers=args.workers)
        _, local = swa(x, layer.w_local, cfg, args.workers)
        mask = HybridMask(local, AttentionMask(np.ones((x.length, x.length), dtype=bool)))
    else:
        out, mask = layer(x, args.gate_bypass, args.workers)
    if args.out:
        write_matrix(args.out, out.hidden)
    if args.mask:
        export_mask(mask, args.mask)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, layer.tensors())
    print(f"tokens {x.length} ({gr}x{gc} patches + cls)")
    print(f"swa pairs {mask.local.count}")
    print(f"psa pairs {mask.sparse.count}")
    print(f"union pairs {mask.count} of {x.length * x.length}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    _require(args, "frame")
    if args.resolution < 1:
        raise UsageError("--resolution must be >= 1")
    frame = _read_json(args.frame, "--frame")
    depth = None
    if args.depth:
        path = _input(args.depth, "--depth")
        try:
            depth = DepthMap.from_pgm(path, args.depth_scale) if path.suffix.lower() == ".pgm" \
                else DepthMap.from_matrix(path)
        except (OSError, KeyError, ValueError) as exc:
            if isinstance(exc, VALIDATION_ERRORS):
                raise
            raise UsageError(f"--depth: {path}: {exc!r}") from None
    _emit_json(annotate_frame(frame, args.subset, depth, args.resolution).to_json(), args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    _require(args, "records")
    report = category_report(read_jsonl(_input(args.records, "--records")))
    if not report.total:
        raise EmptyInputError(f"{args.records}: no records")
    if args.out:
        _emit_json(report.to_json(), args.out)
    table = report.to_table()
    if args.table:
        Path(args.table).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_filter(args) -> int:
    _require(args, "records", "keywords", "kept")
    records = read_jsonl(_input(args.records, "--records"))
    try:
        spec = FilterSpec.load(_input(args.keywords, "--keywords"))
    except ValueError as exc:
        raise UsageError(f"--keywords: {exc}") from None
    kept, removed = filter_records(records, spec)
    write_jsonl(args.kept, kept)
    if args.removed:
        write_jsonl(args.removed, [r.to_json() for r in removed])
    print(f"kept {len(kept)} removed {len(removed)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, seed: bool = False, workers: bool = False) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON object of option values; explicit flags take precedence")
    p.add_argument("--verbose", action="store_true", help="print the resolved options to stderr")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    if workers:
        p.add_argument("--workers", type=int, default=1, help="worker threads; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panokit", description="Panoramic driving-scene toolkit.")
    parser.add_argument("--version", action="version",
                        version=json.dumps({"name": "panokit", "version": __version__}))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("stitch", help="stitch camera images into an equirectangular panorama")
    p.add_argument("--rig", help="rig JSON")
    p.add_argument("--images", help="comma-separated PPM paths in rig priority order")
    p.add_argument("--out", help="panorama PPM to write")
    p.add_argument("--coverage", help="coverage PGM to write (camera index, 255 = uncovered)")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--lat-min", type=float, default=-45.0, help="lower latitude bound in degrees")
    p.add_argument("--lat-max", type=float, default=45.0, help="upper latitude bound in degrees")
    _common(p, workers=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("demo-rig", help="write the six-camera ring rig and solid-colour test images")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--hfov", type=float, default=90.0, help="horizontal field of view in degrees")
    p.add_argument("--image-width", type=int, default=64)
    p.add_argument("--image-height", type=int, default=96)
    _common(p)
    p.set_defaults(func=cmd_demo_rig)

    p = sub.add_parser("attend", help="run one hybrid attention block over an image's patch tokens")
    p.add_argument("--image", help="input PPM")
    p.add_argument("--patch", type=int, default=14)
    p.add_argument("--dim", type=int, default=64, help="token width d")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--window", type=int, default=64, help="window size L_w")
    p.add_argument("--top-k", type=int, default=512)
    p.add_argument("--bottleneck", type=int, default=196)
    p.add_argument("--selector-heads", type=int, default=4)
    p.add_argument("--gate-bypass", action="store_true", help="fix the indexer gate to 1")
    p.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out", help="output hidden-state matrix file")
    p.add_argument("--mask", help="union attention mask PGM")
    p.add_argument("--checkpoint", help="write the layer's parameters")
    _common(p, seed=True, workers=True)
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("annotate", help="object quadruples and occlusion relations for one frame")
    p.add_argument("--frame", help="frame JSON")
    p.add_argument("--subset", choices=["N", "O", "D"], default="N")
    p.add_argument("--depth", help="depth map: 16-bit PGM with a JSON scale sidecar, or a matrix file")
    p.add_argument("--depth-scale", type=float, help="meters per PGM unit (overrides the sidecar)")
    p.add_argument("--resolution", type=int, default=1, help="raster cells per pixel for overlaps")
    p.add_argument("--out", help="output JSON (default stdout)")
    _common(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("score", help="normalised judge scores per category")
    p.add_argument("--records", help="scored QA JSONL")
    p.add_argument("--out", help="report JSON")
    p.add_argument("--table", help="text table (always also printed)")
    _common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="remove QA records containing banned keywords")
    p.add_argument("--records", help="QA JSONL")
    p.add_argument("--keywords", help="keyword file, one per line, # comments")
    p.add_argument("--kept", help="JSONL of kept records")
    p.add_argument("--removed", help="JSONL of removed records with reasons")
    _common(p)
    p.set_defaults(func=cmd_filter)

    return parser


def _config_defaults(sub: argparse.ArgumentParser, path: str) -> dict:
    data = _read_json(path, "--config")
    if not isinstance(data, dict):
        raise UsageError("--config: expected a JSON object")
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    out = {}
    for key, value in data.items():
        dest = key.lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise UsageError(f"--config: unknown option {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if not isinstance(value, bool):
                raise UsageError(f"--config: {key} must be true or false")
        elif value is not None and action.type is not None:
            if isinstance(value, bool) or not isinstance(value, (str, int, float)):
                raise UsageError(f"--config: {key} has the wrong type")
            try:
                converted = action.type(value)
            except (TypeError, ValueError):
                raise UsageError(f"--config: {key}: cannot convert {value!r}") from None
            if action.type is int and converted != value and not isinstance(value, str):
                raise UsageError(f"--config: {key} must be an integer")
            value = converted
        elif value is not None and not isinstance(value, str):
            raise UsageError(f"--config: {key} must be a string")
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"--config: {key} must be one of {', '.join(map(str, action.choices))}")
        out[dest] = value
    return out


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    prog = f"panokit {args.command}"
    try:
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            sub.set_defaults(**_config_defaults(sub, args.config))
            args = parser.parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        if args.verbose:
            resolved = {k: v for k, v in vars(args).items() if k != "func"}
            print(json.dumps(resolved, indent=2, sort_keys=True), file=sys.stderr)
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"{prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort report for the exit-code contract
        print(f"{prog}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
