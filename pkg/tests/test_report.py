import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from obstaclehj.report import ExperimentReport, loglog_slope


def test_verdicts_and_passed():
    rep = ExperimentReport("demo")
    assert rep.check("small", 1e-3, 1e-2)
    assert not rep.check("big", 1.0, 0.5, "<=")
    rep.info("note", 3.0)
    assert not rep.passed
    assert rep.status("small") == "PASS" and rep.status("big") == "FAIL" and rep.status("note") == "INFO"
    with pytest.raises(KeyError):
        rep.status("missing")


def test_info_only_report_passes():
    rep = ExperimentReport("demo")
    rep.info("a", 1)
    assert rep.passed


def test_nan_comparisons_fail():
    rep = ExperimentReport("demo")
    assert not rep.check("slope", float("nan"), 0.3, ">=")


def test_lines_cite_measured_and_threshold():
    rep = ExperimentReport("demo")
    rep.check("gap", 0.25, 0.5)
    assert rep.lines() == ["[PASS] gap: measured 0.25 <= 0.5"]


def test_merge_prefixes_ids():
    inner = ExperimentReport("inner", measured={"x": 1})
    inner.check("c", 1, 2)
    outer = ExperimentReport("outer")
    outer.merge(inner)
    outer.merge(inner, prefix="again")
    assert [v.check_id for v in outer.verdicts] == ["inner/c", "again/c"]
    assert outer.measured["inner"] == {"x": 1}


def test_json_roundtrip_handles_numpy_and_nonfinite(tmp_path):
    rep = ExperimentReport("demo", config={"N": np.int64(4)}, measured={"arr": np.arange(3.0), "bad": np.nan})
    rep.require("flag", np.bool_(True), "ok")
    d = json.loads(rep.write(tmp_path / "r.json").read_text())
    assert d["config"]["N"] == 4 and d["measured"]["arr"] == [0.0, 1.0, 2.0]
    assert d["measured"]["bad"] == "nan"
    assert "wall_clock" not in rep.to_dict(include_timing=False)


@given(st.floats(-3, 3), st.floats(0.1, 10))
def test_loglog_slope_recovers_power(k, c):
    x = np.array([0.4, 0.2, 0.1, 0.05])
    assert loglog_slope(x, c * x**k) == pytest.approx(k, abs=1e-9)


def test_loglog_slope_nonpositive_is_nan():
    assert math.isnan(loglog_slope([1, 2, 3], [1, 0, 2]))
