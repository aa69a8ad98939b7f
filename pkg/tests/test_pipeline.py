import numpy as np
import pytest
from sklearn.base import clone

from biquant import runtime
from biquant.errors import ContractError, StageError
from biquant.fakequant import fake_quantize, rtn_quantize_model
from biquant.pipeline import (
    BiQuantizer,
    QuantConfig,
    build_calibration_set,
    read_manifest,
    run,
    total_loss,
    write_manifest,
)
from biquant.toy import generate_dataset


def test_calibration_whole_dataset():
    data = generate_dataset(0, 100, 10)
    calib = build_calibration_set(data, 100, seed=1)
    assert sorted(map(bytes, calib.pixels.reshape(100, -1))) == sorted(map(bytes, data.pixels.reshape(100, -1)))


def test_calibration_scene_cap():
    data = generate_dataset(0, 2000, 40)
    calib = build_calibration_set(data, 256, seed=3)
    assert len(calib) == 256
    assert np.bincount(calib.scene_ids).max() <= 7


def test_calibration_deterministic_and_bounded():
    data = generate_dataset(0, 200, 10)
    a, b = build_calibration_set(data, 64, 5), build_calibration_set(data, 64, 5)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    with pytest.raises(ContractError):
        build_calibration_set(data, 201, 5)


def test_total_loss_examples():
    off = QuantConfig(gamma1=0.0, gamma2=0.0)
    assert total_loss(0.7, 3.0, 9.0, off) == 0.7
    assert total_loss(0.2, 0.1, 0.4, QuantConfig(gamma1=0.5, gamma2=0.5)) == pytest.approx(0.45, abs=1e-15)
    assert total_loss(1.0, 1.0, 1.0) == 2.0


def test_default_hyperparameters():
    c = QuantConfig()
    assert (c.alpha, c.lam, c.gamma1, c.gamma2) == (1.0, 1.0, 0.5, 0.5)
    assert c.calib_size == 256 and c.bits == (4, 8) and c.b_avg == 5.0 and c.rho == 0.1


def test_config_text_round_trip(tmp_path):
    c = QuantConfig(b_avg=6.0, haq_on=False, bits=(2, 4, 8), seed=11)
    assert QuantConfig.from_text(c.to_text()) == c
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nb_avg = 4.5  # trailing\n\nveft_on = off\n")
    loaded = QuantConfig.load(path)
    assert loaded.b_avg == 4.5 and loaded.veft_on is False
    assert loaded.hash != QuantConfig().hash


@pytest.mark.parametrize("text", ["bogus = 1", "b_avg 5", "haq_on = maybe", "K = x"])
def test_config_rejects_bad_lines(text):
    with pytest.raises(ContractError):
        QuantConfig.from_text(text)


def test_identity_pipeline(reference):
    det, train, test = reference["detector"], reference["train"], reference["test"]
    cfg = QuantConfig(haq_on=False, veft_on=False, weight_bits=32, act_bits=32)
    res = run(det, train, cfg)
    np.testing.assert_array_equal(res.M_q.forward(test.X), det.forward(test.X))


def test_toggles_off_is_rtn(reference):
    det, train, test = reference["detector"], reference["train"], reference["test"]
    cfg = QuantConfig(haq_on=False, veft_on=False)
    res = run(det, train, cfg)
    calib = build_calibration_set(train, cfg.calib_size, cfg.seed)
    rtn = rtn_quantize_model(det, calib, 5)
    np.testing.assert_array_equal(res.M_q.forward(test.X), rtn.forward(test.X))
    assert res.assignment is None and res.traces["l_rec"] == []


def test_average_bits_within_budget(pipeline_result):
    res = pipeline_result
    assert res.M_q.average_weight_bits() <= res.config.b_avg
    assert res.assignment.average_bits <= res.config.b_avg
    assert set(res.manifest["bits"]) <= {4, 8}


def test_stage_tag_on_failure(reference):
    with pytest.raises(StageError) as info:
        run(reference["detector"], reference["train"], QuantConfig(calib_size=10**6))
    assert info.value.stage == "copy"


def test_layers_reconstructed_on_quantized_inputs(pipeline_result, reference):
    """Recorded RTN errors reproduce only with every earlier layer quantized."""
    res = pipeline_result
    M = res.M_q_reconstructed
    calib = build_calibration_set(reference["train"], res.config.calib_size, res.config.seed)
    for i, layer in enumerate(M.layers):
        x = layer.act_fq(M.layer_inputs(calib.X, i))
        w_rtn = fake_quantize(layer.weight, layer.weight_q)
        diff = x @ (layer.weight - w_rtn).T
        assert np.sum(diff * diff) == pytest.approx(res.traces["rtn_mse"][i], rel=1e-9)


def test_reconstruction_not_worse_than_rtn(pipeline_result):
    for rec, rtn in zip(pipeline_result.traces["recon_mse"], pipeline_result.traces["rtn_mse"]):
        assert rec <= rtn


def test_rerun_is_byte_identical(pipeline_result, reference):
    again = run(reference["detector"], reference["train"], pipeline_result.config)
    assert runtime.pack(again.M_qv) == runtime.pack(pipeline_result.M_qv)
    assert runtime.pack(again.M_q) == runtime.pack(pipeline_result.M_q)


def test_manifest_contents(pipeline_result, tmp_path):
    m = pipeline_result.manifest
    assert m["config_hash"] == pipeline_result.config.hash
    assert QuantConfig.from_text(m["config"]) == pipeline_result.config
    assert set(m["stage_timings"]) >= {"calibrate", "allocate", "reconstruct", "finetune"}
    write_manifest(m, tmp_path / "m.json")
    assert read_manifest(tmp_path / "m.json") == m


def test_loss_traces(pipeline_result):
    tr = pipeline_result.traces
    assert len(tr["l_ver"]) == pipeline_result.config.T
    assert len(tr["total"]) == 2
    assert tr["l_ver"][-1] <= tr["l_ver"][0]


def test_restored_rows_in_result(pipeline_result, reference):
    for layer, fp in zip(pipeline_result.M_qv.layers, reference["detector"].layers_):
        assert np.array_equal(layer.effective_weight()[layer.restored], fp.weight[layer.restored])


def test_estimator_api(reference):
    det, train, test = reference["detector"], reference["train"], reference["test"]
    est = BiQuantizer(det, QuantConfig(veft_on=False, recon_steps=20, calib_size=64))
    assert set(est.get_params(deep=False)) == {"detector", "config", "use_mixed"}
    assert clone(est).get_params()["config"] == est.config
    est.fit(train.X)
    pred = est.predict(test.X)
    assert pred.shape == (len(test),) and set(np.unique(pred)) <= {0, 1}
    np.testing.assert_allclose(est.predict_proba(test.X).sum(axis=1), 1.0)
    assert est.transform(test.X[:3]).shape == (3, det.feature_dim)
