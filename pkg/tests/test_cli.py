import json
import subprocess
import sys
import time

import jsonschema
import pytest

from semrnnt.cli import EXIT_DIVERGED, EXIT_INPUT, EXIT_OK, EXIT_SELFTEST, main
from semrnnt.data import TOY_GRAMMAR
from semrnnt.trainer import REPORT_SCHEMA

SMALL_MODEL = {"enc_hidden": 8, "enc_out": 8, "wp_hidden": 8, "wp_out": 8, "slot_hidden": 8, "slot_out": 8,
               "joint_hidden": 8, "intent_hidden": 4}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "grammar.json").write_text(json.dumps(TOY_GRAMMAR.to_json()))
    assert run("gen-data", "--grammar", d / "grammar.json", "--out", d / "data.jsonl", "--n", 8, "--seed", 1) == 0
    (d / "cfg.json").write_text(json.dumps({"model": SMALL_MODEL,
                                            "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.01}}))
    assert run("train", "--data", d / "data.jsonl", "--config", d / "cfg.json", "--out", d / "m.ckpt") == 0
    return d


def test_gen_data_is_byte_identical(tmp_path, capsys):
    (tmp_path / "g.json").write_text(json.dumps(TOY_GRAMMAR.to_json()))
    for name in ("a", "b"):
        assert run("gen-data", "--grammar", tmp_path / "g.json", "--out", tmp_path / f"{name}.jsonl",
                   "--n", 200, "--seed", 7) == EXIT_OK
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.jsonl.vocab.json").read_bytes() == (tmp_path / "b.jsonl.vocab.json").read_bytes()
    stats = dict(kv.split("=") for kv in capsys.readouterr().out.split("\n")[0].split())
    assert stats["utterances"] == "200"
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 200


def test_gen_data_errors(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run("gen-data", "--grammar", missing, "--out", tmp_path / "x.jsonl", "--n", 3) == EXIT_INPUT
    assert str(missing) in capsys.readouterr().err
    (tmp_path / "bad.json").write_text(json.dumps({"templates": [["a <X>", "I"]], "fillers": {}}))
    assert run("gen-data", "--grammar", tmp_path / "bad.json", "--out", tmp_path / "x.jsonl", "--n", 3) == EXIT_INPUT
    (tmp_path / "g.json").write_text(json.dumps(TOY_GRAMMAR.to_json()))
    assert run("gen-data", "--grammar", tmp_path / "g.json", "--out", tmp_path / "x.jsonl", "--n", 0) == EXIT_INPUT


def test_usage_error_exits_2():
    assert run("decode") == EXIT_INPUT
    assert run("frobnicate") == EXIT_INPUT


def test_zero_learning_rate_checkpoint_equals_init(work, tmp_path):
    cfg0 = tmp_path / "init.json"
    cfg0.write_text(json.dumps({"model": SMALL_MODEL, "train": {"epochs": 0}}))
    cfg1 = tmp_path / "lr0.json"
    cfg1.write_text(json.dumps({"model": SMALL_MODEL, "train": {"epochs": 1, "learning_rate": 0.0}}))
    assert run("train", "--data", work / "data.jsonl", "--config", cfg0, "--out", tmp_path / "init.ckpt") == 0
    assert run("train", "--data", work / "data.jsonl", "--config", cfg1, "--out", tmp_path / "lr0.ckpt") == 0
    assert (tmp_path / "init.ckpt").read_bytes() == (tmp_path / "lr0.ckpt").read_bytes()


@pytest.mark.parametrize("mode", ["ce", "rnnt_align"])
def test_train_both_slot_modes_and_rerun_determinism(work, tmp_path, mode):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": SMALL_MODEL, "train": {"epochs": 1, "batch_size": 4, "slot_mode": mode}}))
    for name in ("a", "b"):
        assert run("train", "--data", work / "data.jsonl", "--config", cfg, "--out", tmp_path / name) == EXIT_OK
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a.log.jsonl").read_text() == (tmp_path / "b.log.jsonl").read_text()
    assert (tmp_path / "a.epoch001").read_bytes() == (tmp_path / "a").read_bytes()
    assert (tmp_path / "a.best").exists()


def test_train_errors(work, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"train": {"learning_rate": -1}}))
    assert run("train", "--data", work / "data.jsonl", "--config", tmp_path / "bad.json",
               "--out", tmp_path / "m") == EXIT_INPUT
    assert run("train", "--data", tmp_path / "none.jsonl", "--config", work / "cfg.json",
               "--out", tmp_path / "m") == EXIT_INPUT


def test_train_divergence_exits_3(work, tmp_path, capsys):
    lines = (work / "data.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    rec["features"][0][0] = float("nan")
    (tmp_path / "nan.jsonl").write_text("\n".join([json.dumps(rec)] + lines[1:]) + "\n")
    (tmp_path / "nan.jsonl.vocab.json").write_text((work / "data.jsonl.vocab.json").read_text())
    assert run("train", "--data", tmp_path / "nan.jsonl", "--config", work / "cfg.json",
               "--held-out", work / "data.jsonl", "--out", tmp_path / "m") == EXIT_DIVERGED
    assert "non-finite" in capsys.readouterr().err


def test_decode_unit_beam_equals_greedy(work, tmp_path):
    common = ["decode", "--ckpt", work / "m.ckpt", "--data", work / "data.jsonl"]
    assert run(*common, "--beam", "1,1,1,1", "--out", tmp_path / "beam.jsonl") == EXIT_OK
    assert run(*common, "--greedy", "--out", tmp_path / "greedy.jsonl") == EXIT_OK
    assert (tmp_path / "beam.jsonl").read_bytes() == (tmp_path / "greedy.jsonl").read_bytes()


def test_decode_stream_equals_batch(work, tmp_path):
    common = ["decode", "--ckpt", work / "m.ckpt", "--data", work / "data.jsonl", "--beam", "4,2,4,3"]
    assert run(*common, "--out", tmp_path / "batch.jsonl") == EXIT_OK
    assert run(*common, "--stream", 1, "--out", tmp_path / "stream.jsonl") == EXIT_OK
    assert (tmp_path / "batch.jsonl").read_bytes() == (tmp_path / "stream.jsonl").read_bytes()
    records = [json.loads(x) for x in (tmp_path / "batch.jsonl").read_text().splitlines()]
    assert len(records) == 8
    assert all(1 <= len(r["n_best"]) <= 3 for r in records)


def test_decode_errors(work, capsys):
    assert run("decode", "--ckpt", work / "m.ckpt", "--data", work / "data.jsonl", "--beam", "10,2,10") == EXIT_INPUT
    assert "--beam" in capsys.readouterr().err
    assert run("decode", "--ckpt", work / "m.ckpt", "--data", work / "data.jsonl", "--beam", "1,x,1,1") == EXIT_INPUT
    assert run("decode", "--ckpt", work / "missing.ckpt", "--data", work / "data.jsonl") == EXIT_INPUT


def test_eval_reports(work, tmp_path, capsys):
    common = ["eval", "--ckpt", work / "m.ckpt", "--data", work / "data.jsonl", "--beam", "4,2,4,3"]
    assert run(*common, "--out", tmp_path / "r.json") == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)

    assert run(*common, "--baseline", tmp_path / "r.json", "--out", tmp_path / "self.json") == EXIT_OK
    red = json.loads((tmp_path / "self.json").read_text())["relative_reduction"]
    m = report["metrics"]
    for key, name in (("wer", "WERR"), ("semer", "SemERR"), ("irer", "IRERR"), ("icer", "ICERR")):
        assert red[name] == (0.0 if m[key] > 0 else None)

    # a baseline whose WER is larger by 0.61/0.55 gives the 9.8% reduction
    base = dict(report, metrics=dict(m, wer=m["wer"] * 0.61 / 0.55, icer=0.0))
    (tmp_path / "base.json").write_text(json.dumps(base))
    capsys.readouterr()
    assert run(*common, "--baseline", tmp_path / "base.json", "--out", tmp_path / "cmp.json") == EXIT_OK
    out = json.loads((tmp_path / "cmp.json").read_text())["relative_reduction"]
    assert round(out["WERR"], 1) == 9.8
    assert out["ICERR"] is None
    assert "warning" in capsys.readouterr().err

    (tmp_path / "junk.json").write_text(json.dumps({"metrics": {}}))
    assert run(*common, "--baseline", tmp_path / "junk.json") == EXIT_INPUT


def test_selftest_passes_and_detects_sign_flip(capsys):
    start = time.perf_counter()
    assert run("selftest") == EXIT_OK
    assert time.perf_counter() - start < 300
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(x.startswith("PASS") for x in lines)
    assert run("selftest", "--only", "gradient", "--inject-sign-flip") == EXIT_SELFTEST
    out = capsys.readouterr().out
    assert out.startswith("FAIL gradient-check") and "failing seed" in out
    assert run("selftest", "--only", "bogus") == EXIT_INPUT


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "semrnnt", "decode", "--ckpt", "x", "--data", "y",
                           "--beam", "1,1"], capture_output=True, text=True)
    assert proc.returncode == EXIT_INPUT
    assert "four comma-separated" in proc.stderr
