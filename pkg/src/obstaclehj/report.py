"""Structured experiment records with per-check verdicts."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

PASS, FAIL, INFO = "PASS", "FAIL", "INFO"

_OPS = {
    "<=": lambda a, b: a <= b,
    "<": lambda a, b: a < b,
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
}


@dataclass
class Verdict:
    check_id: str
    status: str
    measured: Any
    threshold: Any = None
    comparison: str = ""
    note: str = ""

    def line(self) -> str:
        if self.status == INFO:
            return f"[{self.status}] {self.check_id}: measured {_fmt(self.measured)}" + (
                f" ({self.note})" if self.note else "")
        return (f"[{self.status}] {self.check_id}: measured {_fmt(self.measured)} "
                f"{self.comparison} {_fmt(self.threshold)}" + (f" ({self.note})" if self.note else ""))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    return v


@dataclass
class ExperimentReport:
    experiment_id: str
    config: dict = field(default_factory=dict)
    measured: dict = field(default_factory=dict)
    verdicts: list[Verdict] = field(default_factory=list)
    wall_clock: float = 0.0
    checksums: dict = field(default_factory=dict)

    def check(self, check_id: str, measured, threshold, comparison: str = "<=", note: str = "") -> bool:
        ok = bool(_OPS[comparison](measured, threshold))
        self.verdicts.append(Verdict(check_id, PASS if ok else FAIL, measured, threshold, comparison, note))
        return ok

    def require(self, check_id: str, condition: bool, measured, note: str = "") -> bool:
        """Boolean check whose measured value is descriptive rather than a scalar."""
        self.verdicts.append(Verdict(check_id, PASS if condition else FAIL, measured, True, "holds:", note))
        return bool(condition)

    def info(self, check_id: str, measured, note: str = "") -> None:
        self.verdicts.append(Verdict(check_id, INFO, measured, note=note))

    def merge(self, other: "ExperimentReport", prefix: str | None = None) -> None:
        tag = prefix or other.experiment_id
        for v in other.verdicts:
            self.verdicts.append(Verdict(f"{tag}/{v.check_id}", v.status, v.measured, v.threshold,
                                         v.comparison, v.note))
        self.measured[tag] = other.measured
        self.checksums.update({f"{tag}/{k}": c for k, c in other.checksums.items()})

    @property
    def passed(self) -> bool:
        return all(v.status in (PASS, INFO) for v in self.verdicts)

    def status(self, check_id: str) -> str:
        for v in self.verdicts:
            if v.check_id == check_id:
                return v.status
        raise KeyError(check_id)

    def lines(self) -> list[str]:
        return [v.line() for v in self.verdicts]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "experiment_id": self.experiment_id,
            "config": self.config,
            "measured": self.measured,
            "verdicts": [asdict(v) for v in self.verdicts],
            "passed": self.passed,
            "checksums": self.checksums,
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return _jsonable(d)

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``; nan if any value is nonpositive."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
