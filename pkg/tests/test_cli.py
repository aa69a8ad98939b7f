import json

import pytest

from biquant import cli, runtime
from biquant.pipeline import QuantConfig

FAST = "recon_steps = 20\nT = 1\ncalib_size = 64\n"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert cli.main(["train-toy", "--out", str(out), "--n-samples", "400", "--n-scenes", "10", "--epochs", "30"]) == 0
    (out / "fast.cfg").write_text(FAST)
    return out


@pytest.fixture(scope="module")
def quantized(trained):
    out = trained / "q"
    args = ["quantize", "--model", str(trained / "mf.dfq"), "--data", str(trained / "train.bqds")]
    assert cli.main(args + ["--config", str(trained / "fast.cfg"), "--out", str(out)]) == 0
    return out


def test_train_toy_outputs(trained):
    for name in ("mf.dfq", "train.bqds", "val.bqds", "test.bqds", "manifest.json"):
        assert (trained / name).is_file()
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["model_bytes"] == (trained / "mf.dfq").stat().st_size


def test_quantize_outputs(quantized):
    for name in ("mq.dfq", "mqv.dfq", "manifest.json", "assignment.txt"):
        assert (quantized / name).is_file()
    assert len((quantized / "assignment.txt").read_text().splitlines()) == 6
    assert runtime.load(quantized / "mqv.dfq").restored_channels() == 24


def test_quantize_from_manifest_is_reproducible(quantized, tmp_path):
    assert cli.main(["quantize", "--from-manifest", str(quantized / "manifest.json"), "--out", str(tmp_path)]) == 0
    for name in ("mq.dfq", "mqv.dfq", "assignment.txt"):
        assert (tmp_path / name).read_bytes() == (quantized / name).read_bytes()


def test_ablation_flags_set_config(trained, tmp_path):
    args = ["quantize", "--model", str(trained / "mf.dfq"), "--data", str(trained / "train.bqds")]
    assert cli.main(args + ["--config", str(trained / "fast.cfg"), "--haq=off", "--veft=off", "--out", str(tmp_path)]) == 0
    cfg = QuantConfig.from_text(json.loads((tmp_path / "manifest.json").read_text())["config"])
    assert cfg == QuantConfig.from_text(FAST).replace(haq_on=False, veft_on=False)
    assert (tmp_path / "mq.dfq").read_bytes() == (tmp_path / "mqv.dfq").read_bytes()


def test_seed_environment_override(trained, tmp_path, monkeypatch):
    monkeypatch.setenv("BIQUANT_SEED", "17")
    args = ["quantize", "--model", str(trained / "mf.dfq"), "--data", str(trained / "train.bqds")]
    assert cli.main(args + ["--config", str(trained / "fast.cfg"), "--veft=off", "--seed", "3", "--out", str(tmp_path)]) == 0
    assert QuantConfig.from_text(json.loads((tmp_path / "manifest.json").read_text())["config"]).seed == 17


def test_eval_pack_infer_describe(trained, quantized, capsys):
    assert cli.main(["eval", "--model", str(quantized / "mqv.dfq"), "--data", str(trained / "test.bqds")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("accuracy ") and "auc " in out
    assert cli.main(["pack", "--model", str(quantized / "mqv.dfq"), "--reference", str(trained / "mf.dfq")]) == 0
    assert "compression rate" in capsys.readouterr().out
    assert cli.main(["infer", "--model", str(quantized / "mq.dfq"), "--data", str(trained / "test.bqds"), "-n", "2", "--runs", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3 and lines[-1].startswith("latency")
    assert cli.main(["describe", "--model", str(quantized / "mq.dfq")]) == 0
    assert "block3.0" in capsys.readouterr().out


def test_missing_file_is_file_error(trained, capsys):
    assert cli.main(["eval", "--model", str(trained / "nope.dfq"), "--data", str(trained / "test.bqds")]) == cli.EXIT_FILE
    assert "not found" in capsys.readouterr().err


def test_corrupt_model_is_format_error(trained, tmp_path):
    bad = tmp_path / "bad.dfq"
    bad.write_bytes(b"junk")
    assert cli.main(["describe", "--model", str(bad)]) == cli.EXIT_FORMAT


def test_invalid_combinations_are_usage_errors(trained, quantized, tmp_path):
    assert cli.main(["quantize", "--from-manifest", str(quantized / "manifest.json"), "--haq=off", "--out", str(tmp_path)]) == 2
    args = ["quantize", "--model", str(trained / "mf.dfq"), "--data", str(trained / "train.bqds"), "--out", str(tmp_path)]
    assert cli.main(args + ["--veft=off", "--random-mask=on"]) == 2
    assert cli.main(args + ["--weight-bits", "4"]) == 2
    assert cli.main(["quantize", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["quantize", "--haq=maybe", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_report_on_empty_directory(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_bench_and_report(trained, tmp_path, capsys):
    cfg = trained / "fast.cfg"
    args = ["bench", "--out", str(tmp_path), "--seeds", "0", "--calib-sizes", "64", "--latency-runs", "2", "--config", str(cfg), "--quiet"]
    assert cli.main(args) == 0
    first = capsys.readouterr()
    assert "5" in first.err  # fewer seeds than the default warns
    for name in ("bench.csv", "report.txt", "manifest.json"):
        assert (tmp_path / name).is_file()
    assert cli.main(["report", str(tmp_path)]) == 0
    assert capsys.readouterr().out == (tmp_path / "report.txt").read_text()


def test_unknown_bench_method(tmp_path):
    assert cli.main(["bench", "--out", str(tmp_path), "--seeds", "0", "--methods", "fp,magic"]) == 2
