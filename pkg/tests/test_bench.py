import numpy as np
import pytest

from biquant import bench
from biquant.bench import BenchRow, BenchSettings, RunReport, emit_csv, read_csv, render_table, run_matrix
from biquant.errors import ContractError
from biquant.pipeline import QuantConfig


def _row(**kw):
    base = dict(
        method="haq", b_avg=5.0, calib_size=256, seed=0, mask="-", accuracy=0.95, auc=0.99,
        retention=0.97, storage_bytes=100, compression_rate=0.9, latency_ms=0.5, config_hash="abc",
    )
    base.update(kw)
    return BenchRow(**base)


@pytest.fixture(scope="module")
def tiny_report():
    settings = BenchSettings(
        seeds=(0,),
        calib_sizes=(64, 128),
        n_samples=400,
        n_scenes=10,
        latency_runs=2,
        base=QuantConfig(recon_steps=20, T=2, calib_size=64),
    )
    return run_matrix(settings)


def test_row_validation():
    with pytest.raises(ContractError):
        _row(method="magic")
    with pytest.raises(ContractError):
        _row(retention=1.5)


def test_single_row_csv(tmp_path):
    text = emit_csv(RunReport({}, [_row()]), tmp_path / "a.csv")
    assert len(text.splitlines()) == 2
    assert text.splitlines()[0] == ",".join(bench.COLUMNS)
    assert (tmp_path / "a.csv").read_text() == text


def test_empty_report_rejected():
    with pytest.raises(ContractError):
        emit_csv(RunReport({}, []))


def test_unwritable_path(tmp_path):
    with pytest.raises(FileNotFoundError):
        emit_csv(RunReport({}, [_row()]), tmp_path / "missing" / "a.csv")


def test_matrix_structure(tiny_report):
    rows = tiny_report.rows
    main = {(r.method, r.mask) for r in rows if r.calib_size == 64}
    assert main == {("fp", "-"), ("rtn", "-"), ("recon-uniform", "-"), ("haq", "-"), ("haq+veft", "random"), ("haq+veft", "fixed")}
    assert {r.calib_size for r in rows if r.method == "haq+veft" and r.mask == "random"} == {64, 128}
    assert all(len(r.config_hash) == 16 for r in rows)


def test_csv_is_deterministic_and_round_trips(tiny_report, tmp_path):
    a = emit_csv(tiny_report, tmp_path / "a.csv")
    b = emit_csv(tiny_report, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes() == a.encode() == b.encode()
    back = read_csv(tmp_path / "a.csv")
    assert [r.cells() for r in back] == [r.cells() for r in tiny_report.rows]


def test_retention_column_recomputes(tiny_report, tmp_path):
    emit_csv(tiny_report, tmp_path / "a.csv")
    rows = read_csv(tmp_path / "a.csv")
    fp = {r.seed: r.accuracy for r in rows if r.method == "fp"}
    for r in rows:
        assert r.retention == round(r.accuracy / fp[r.seed], 4)


def test_summary_and_table(tiny_report):
    summary = tiny_report.summary()
    assert all(s["n"] == 1 and s["accuracy_sd"] == 0.0 for s in summary)
    table = render_table(tiny_report)
    assert "haq+veft" in table and "fixed" in table
    assert tiny_report.mean_retention("fp") == 1.0
    with pytest.raises(ContractError):
        tiny_report.mean_retention("haq", calib_size=999)


def test_manifest_records_sweep(tiny_report):
    m = tiny_report.manifest
    assert m["bench"]["calib_sizes"] == [64, 128]
    assert m["seeds"]["seeds"] == [0]
    assert "numpy" in m["versions"]
