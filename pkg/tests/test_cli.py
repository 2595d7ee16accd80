import csv
import io
import json

import numpy as np
import pytest

from resq.archive import read_archive, write_archive
from resq.cli import main, read_streams, write_streams


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = {k: str(d / n) for k, n in [("toy", "toy.resq"), ("calib", "calib.txt"), ("eval", "eval.txt"), ("cal", "cal.resq")]}
    assert main(["toy", p["toy"], "--calib-stream", p["calib"], "--eval-stream", p["eval"], "--n-calib", "16", "--n-eval", "4", "--seq-len", "32"]) == 0
    assert main(["calibrate", p["toy"], p["calib"], p["cal"], "--samples", "16", "--hessian-samples", "8", "--seed", "7"]) == 0
    p["dir"] = d
    return p


def run_json(capsys, argv):
    capsys.readouterr()
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out)


def test_stream_round_trip(tmp_path):
    toks = np.arange(12).reshape(3, 4)
    write_streams(tmp_path / "s.txt", toks)
    np.testing.assert_array_equal(read_streams(tmp_path / "s.txt"), toks)
    (tmp_path / "bad.txt").write_text("1 2 3\n4 5\n")
    with pytest.raises(Exception):
        read_streams(tmp_path / "bad.txt")


def test_float_mode_matches_float_baseline(work, capsys):
    out = str(work["dir"] / "f16.resq")
    assert main(["quantize", work["cal"], out, "--wbits", "16", "--abits", "16", "--kvbits", "16"]) == 0
    base = run_json(capsys, ["eval", work["toy"], work["eval"]])["perplexity"]
    got = run_json(capsys, ["eval", out, work["eval"]])["perplexity"]
    assert abs(got - base) <= 1e-4 * base


def test_quantize_eval_compare(work, capsys):
    q = str(work["dir"] / "q.resq")
    assert main(["quantize", work["cal"], q]) == 0
    rec = run_json(capsys, ["eval", q, work["eval"]])
    assert rec["config"]["basis"] == "resq" and rec["config"]["wbits"] == 4
    capsys.readouterr()
    assert main(["compare", q, q, "--stream", work["eval"]]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 2 and all(float(r["delta_ppl"]) == 0.0 for r in rows)


def test_snr_and_bound_metrics(work, capsys):
    snr = run_json(capsys, ["eval", work["cal"], work["eval"], "--metric", "snr"])["snr"]
    assert [r["basis"] for r in snr] == ["identity", "rotation", "outlier", "resq"]
    bound = run_json(capsys, ["eval", work["cal"], work["eval"], "--metric", "bound"])["bound"]
    # the bound assumes Gaussian activations; toy activations may exceed it
    assert {r["site"] for r in bound} >= {"U_A", "layer.0.U_B", "layer.1.U_C"}
    for r in bound:
        assert r["measured"] > 0 and r["within_bound"] == (r["bound"] is not None and r["measured"] <= r["bound"])


def test_report(work, capsys):
    out = str(work["dir"] / "report.json")
    assert main(["report", work["cal"], work["eval"], "--out", out]) == 0
    rec = json.loads(open(out).read())
    for key in ("schema_version", "experiment", "config", "perplexity", "snr_db", "frobenius_error", "bound", "op_counts"):
        assert key in rec


def test_seeded_runs_are_byte_identical(work):
    a, b = str(work["dir"] / "a.resq"), str(work["dir"] / "b.resq")
    for out in (a, b):
        assert main(["calibrate", work["toy"], work["calib"], out, "--samples", "16", "--hessian-samples", "8", "--seed", "7"]) == 0
    assert open(a, "rb").read() == open(b, "rb").read() == open(work["cal"], "rb").read()
    qa, qb = str(work["dir"] / "qa.resq"), str(work["dir"] / "qb.resq")
    for src, out in ((a, qa), (b, qb)):
        assert main(["quantize", src, out, "--basis", "outlier"]) == 0
    assert open(qa, "rb").read() == open(qb, "rb").read()


def test_exit_usage(work, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["quantize", work["cal"], "x", "--wbits", "9"])
    assert info.value.code == 2
    junk = tmp_path / "junk.resq"
    junk.write_bytes(b"not an archive at all, definitely not")
    assert main(["eval", str(junk), work["eval"]]) == 2
    with pytest.raises(SystemExit) as info:
        main(["quantize", work["cal"], "x", "--drop", "u_z"])
    assert info.value.code == 2


def test_exit_shape(work, tmp_path):
    arc = read_archive(work["toy"])
    arc.tensors["model.embed"] = arc.tensors["model.embed"][:, :-1].copy()
    bad = tmp_path / "bad.resq"
    write_archive(bad, arc)
    assert main(["quantize", str(bad), str(tmp_path / "o.resq"), "--basis", "identity", "--no-gptq"]) == 3


def test_exit_missing_calibration(work, tmp_path):
    out = str(tmp_path / "o.resq")
    assert main(["quantize", work["toy"], out]) == 4
    assert main(["quantize", work["toy"], out, "--basis", "identity"]) == 4
    assert main(["quantize", work["toy"], out, "--basis", "rotation", "--no-gptq"]) == 0
    assert main(["eval", work["toy"], work["eval"], "--metric", "snr"]) == 4


def test_exit_incomparable(work, tmp_path):
    other = str(tmp_path / "other.resq")
    assert main(["toy", other, "--seed", "3"]) == 0
    assert main(["compare", work["toy"], other, "--stream", work["eval"]]) == 5
