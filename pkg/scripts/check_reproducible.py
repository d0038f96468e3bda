"""Run the suite twice into separate directories and compare every artefact byte for byte.

Timing fields are the only content allowed to differ; they are dropped before comparing reports.
"""
import argparse
import json
import sys
import tempfile
from pathlib import Path

from obstaclehj.cli import run


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k != "wall_clock"}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def compare(a: Path, b: Path) -> list[str]:
    diffs = []
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files_a != files_b:
        diffs.append(f"file sets differ: {set(files_a) ^ set(files_b)}")
    for rel in files_a:
        if rel not in files_b:
            continue
        x, y = (a / rel).read_bytes(), (b / rel).read_bytes()
        if rel.suffix == ".json":
            x = json.dumps(_strip_timing(json.loads(x)), sort_keys=True).encode()
            y = json.dumps(_strip_timing(json.loads(y)), sort_keys=True).encode()
        if x != y:
            diffs.append(str(rel))
    return diffs


def run_twice(config: str, jobs: int = 1) -> list[str]:
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a", Path(tmp) / "b"
        for out in (a, b):
            if run("suite", config, out, jobs) == 2:
                raise SystemExit(f"config error in {config}")
        return compare(a, b)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(Path(__file__).parent.parent / "configs" / "quick.ini"))
    ap.add_argument("--jobs", type=int, default=2)
    diffs = run_twice(**vars(ap.parse_args()))
    print("identical" if not diffs else "differs: " + ", ".join(diffs))
    sys.exit(1 if diffs else 0)
