#!/usr/bin/env python3
"""End-to-end exit-code contract of the ``panokit`` executable.

Runs ``python -m panokit`` in fresh processes over a set of good and bad
invocations and checks each exit code: 0 success, 2 usage/validation, 1
internal error.  Exits non-zero if any case disagrees.
"""
from __future__ import annotations

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from panokit.pnm import write_ppm

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def panokit(*argv, cwd) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "panokit", *map(str, argv)], cwd=cwd, capture_output=True, text=True)


def main() -> int:
    failures = 0
    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)
        write_ppm(d / "img.ppm", np.random.default_rng(0).integers(0, 256, (28, 56, 3), dtype=np.uint8))
        (d / "frame.json").write_text(json.dumps(
            {"objects": [{"id": 1, "category": "car", "position": [5.0, 0.0, 0.0]}]}))
        (d / "bad_frame.json").write_text(json.dumps({"objects": [{"id": 1}]}))
        (d / "bad.jsonl").write_text('{"id": "a", "category": "N1", "question": "q", "answer": "a", "score": 3}\n'
                                     "{oops\n")
        (d / "not_an_image.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        (d / "rig_as_list.json").write_text("[]")
        # camera with a zero-width image: must be a validation error, not a crash
        cams = {"cameras": [{"priority": 0, "width": 0, "height": 8, "fx": 1, "fy": 1, "cx": 0, "cy": 0,
                             "rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1]}]}
        (d / "zero_rig.json").write_text(json.dumps(cams))

        cases = [
            ("version", 0, ["--version"]),
            ("help", 0, ["--help"]),
            ("subcommand help", 0, ["attend", "--help"]),
            ("no subcommand", 2, []),
            ("unknown flag", 2, ["score", "--nope"]),
            ("demo rig", 0, ["demo-rig", "--out-dir", d / "demo"]),
            ("stitch demo", 0, ["stitch", "--rig", d / "demo" / "rig.json", "--images",
                                ",".join(str(d / "demo" / f"cam{i}.ppm") for i in range(6)),
                                "--out", d / "p.ppm", "--width", 128, "--height", 32]),
            ("stitch missing image", 2, ["stitch", "--rig", d / "demo" / "rig.json", "--images",
                                         d / "missing.ppm", "--out", d / "p.ppm"]),
            ("stitch wrong image count", 2, ["stitch", "--rig", d / "demo" / "rig.json", "--images",
                                             d / "demo" / "cam0.ppm", "--out", d / "p.ppm"]),
            ("stitch bad rig shape", 2, ["stitch", "--rig", d / "rig_as_list.json", "--images", d / "img.ppm",
                                         "--out", d / "p.ppm"]),
            ("stitch zero-size camera", 2, ["stitch", "--rig", d / "zero_rig.json", "--images", d / "img.ppm",
                                            "--out", d / "p.ppm"]),
            ("attend", 0, ["attend", "--image", d / "img.ppm", "--out", d / "h.txt", "--mask", d / "m.pgm"]),
            ("attend bad patch", 2, ["attend", "--image", d / "img.ppm", "--patch", 5]),
            ("attend non-P6 image", 2, ["attend", "--image", d / "not_an_image.ppm"]),
            ("attend bad workers", 2, ["attend", "--image", d / "img.ppm", "--workers", 0]),
            ("annotate", 0, ["annotate", "--frame", d / "frame.json", "--out", d / "a.json"]),
            ("annotate schema error", 2, ["annotate", "--frame", d / "bad_frame.json"]),
            ("score", 0, ["score", "--records", FIXTURES / "scores_24.jsonl"]),
            ("score malformed line", 2, ["score", "--records", d / "bad.jsonl"]),
            ("filter", 0, ["filter", "--records", FIXTURES / "filter_10.jsonl", "--keywords",
                           FIXTURES / "filter_keywords.txt", "--kept", d / "k.jsonl"]),
            ("filter missing flag", 2, ["filter", "--records", FIXTURES / "filter_10.jsonl"]),
        ]
        for name, want, argv in cases:
            got = panokit(*argv, cwd=d)
            ok = got.returncode == want
            failures += not ok
            print(f"{'ok  ' if ok else 'FAIL'} {name}: exit {got.returncode} (want {want})")
            if not ok:
                print("     " + (got.stderr.strip() or got.stdout.strip())[-400:])
    print(f"{len(cases) - failures}/{len(cases)} exit codes as expected")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
