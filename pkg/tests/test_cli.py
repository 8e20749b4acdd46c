import json
import math
from pathlib import Path

import numpy as np
import pytest

from gcr import __version__
from gcr.cli import main

GOLDEN = Path(__file__).parent / "golden" / "fit_study1_gaussian_n30_seed3.json"
FIT_ARGS = ["--cluster", "id", "--response", "y", "--family", "gaussian", "--mean", "x1 + x2",
            "--corr", "intercept + diff(u) + sqdiff(u)"]


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


@pytest.fixture
def sim(tmp_path):
    data = tmp_path / "d.csv"
    assert main(["simulate", "--scenario", "study1_gaussian", "--n", "30", "--seed", "3",
                 "--out", str(data), "--truth", str(tmp_path / "t.json")]) == 0
    return data


def _assert_close(a, b, path="result"):
    if isinstance(a, dict):
        assert list(a) == list(b), path
        for k in a:
            _assert_close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            _assert_close(x, y, f"{path}[{i}]")
    elif isinstance(a, float):
        assert b == pytest.approx(a, rel=1e-7, abs=1e-10), path
    else:
        assert a == b, path


def _all_finite(obj):
    if isinstance(obj, dict):
        return all(_all_finite(v) for v in obj.values())
    if isinstance(obj, list):
        return all(_all_finite(v) for v in obj)
    if isinstance(obj, float):
        return math.isfinite(obj)
    return True


def test_simulate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["simulate", "--scenario", "study1_gaussian", "--n", "10", "--seed", "1",
                     "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_truth_file(sim, tmp_path):
    truth = json.loads((tmp_path / "t.json").read_text())
    assert truth["kind"] == "truth"
    assert truth["params"]["alpha0"] == [0.2, -0.2, 0.3]
    assert len(truth["clusters"]) == 30
    assert len(truth["clusters"][0]["sigma0_sha256"]) == 64


def test_fit_matches_golden_file(sim, tmp_path, capsys):
    out = tmp_path / "f.json"
    assert main(["fit", "--data", str(sim), *FIT_ARGS, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "alpha:diff(u)" in text and "converged" in text
    doc = json.loads(out.read_text())
    golden = json.loads(GOLDEN.read_text())
    assert doc["schema_version"] == golden["schema_version"] == "1.0"
    assert list(doc) == golden["top_keys"]
    assert list(doc["manifest"]) == golden["manifest_keys"]
    assert doc["manifest"]["version"] == __version__
    _assert_close(golden["result"], doc["result"])
    assert _all_finite(doc)


def test_rerun_reproduces_numeric_payload(sim, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert main(["fit", "--data", str(sim), *FIT_ARGS, "--out", str(p)]) == 0
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    assert da["result"] == db["result"]
    assert da["manifest"]["input_sha256"] == db["manifest"]["input_sha256"]


def test_fit_alpha_close_to_truth_at_n400(tmp_path):
    data = tmp_path / "d.csv"
    main(["simulate", "--scenario", "study1_gaussian", "--n", "400", "--seed", "7",
          "--out", str(data)])
    out = tmp_path / "f.json"
    assert main(["fit", "--data", str(data), *FIT_ARGS, "--out", str(out)]) == 0
    alpha = list(json.loads(out.read_text())["result"]["alpha"].values())
    assert np.allclose(alpha, [0.2, -0.2, 0.3], atol=0.15)


def test_non_convergence_exits_3_and_still_writes(sim, tmp_path):
    out = tmp_path / "f.json"
    assert main(["fit", "--data", str(sim), *FIT_ARGS, "--max-outer", "1",
                 "--out", str(out)]) == 3
    assert json.loads(out.read_text())["result"]["converged"] is False


def test_diagnose_round_trip(sim, tmp_path, capsys):
    fit = tmp_path / "f.json"
    main(["fit", "--data", str(sim), *FIT_ARGS, "--out", str(fit)])
    out = tmp_path / "dg.json"
    assert main(["diagnose", "--fit", str(fit), "--data", str(sim), "--subgroup", "within",
                 "--subgroup", "between:same(v)", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert [r["subgroup"] for r in doc["subgroups"]] == ["within", "between:same(v)"]
    assert doc["subgroups"][0]["p_value"] > 0.01
    assert "within" in capsys.readouterr().out


def test_diagnose_rejects_foreign_json(sim, tmp_path, capsys):
    bogus = tmp_path / "x.json"
    bogus.write_text('{"kind": "cv"}')
    assert main(["diagnose", "--fit", str(bogus), "--data", str(sim),
                 "--subgroup", "within"]) == 2
    assert _error_line(capsys)["exit_code"] == 2


def test_cv_report(sim, tmp_path):
    out = tmp_path / "cv.json"
    args = ["cv", "--data", str(sim), "--cluster", "id", "--response", "y", "--family",
            "gaussian", "--mean", "x1 + x2", "--corr", "intercept", "--folds", "3",
            "--repeats", "2", "--seed", "5", "--out", str(out)]
    assert main(args) == 0
    one = json.loads(out.read_text())
    assert main(args[:-2] + ["--threads", "2", "--out", str(out)]) == 0
    two = json.loads(out.read_text())
    assert one["report"]["fold_scores"] == two["report"]["fold_scores"]
    assert len(one["report"]["fold_scores"]["mae"]) == 2


def test_missing_flag_is_usage_error(sim, capsys):
    assert main(["fit", "--data", str(sim), "--cluster", "id", "--family", "gaussian"]) == 1
    captured = capsys.readouterr().err
    assert "usage:" in captured
    assert json.loads(captured.strip().splitlines()[-1])["error"] == "UsageError"
    assert main([]) == 1


@pytest.mark.parametrize("extra,code", [
    (["--mean", "x1 + + x2"], 2),
    (["--corr", "same(nope)"], 2),
    (["--threads", "zero"], 2),
])
def test_validation_errors_exit_2(sim, capsys, extra, code):
    args = ["fit", "--data", str(sim), "--cluster", "id", "--response", "y",
            "--family", "gaussian", *extra]
    assert main(args) == code
    err = _error_line(capsys)
    assert err["exit_code"] == code and err["message"]


def test_missing_data_file(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "none.csv"), *FIT_ARGS]) == 2
    assert _error_line(capsys)["error"] == "IngestionError"


def test_numerical_failure_exits_4(tmp_path, capsys):
    data = tmp_path / "d.csv"
    data.write_text("id,y,x\n1,1,1\n1,2,1\n2,3,1\n2,4,1\n")
    assert main(["fit", "--data", str(data), "--cluster", "id", "--response", "y",
                 "--family", "gaussian", "--mean", "x"]) == 4
    assert _error_line(capsys)["error"] == "EstimationError"


def test_threads_fallback_to_environment(sim, tmp_path, monkeypatch):
    monkeypatch.setenv("GCR_THREADS", "2")
    out = tmp_path / "f.json"
    main(["fit", "--data", str(sim), *FIT_ARGS, "--out", str(out)])
    assert json.loads(out.read_text())["manifest"]["flags"]["threads"] == 2
