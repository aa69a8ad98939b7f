"""End-to-end post-training quantization: observe, allocate, reconstruct, fine-tune.

Stages run in a fixed order on a copy of the full-precision detector:

1. copy the model and insert fake-quant wrappers
2. switch observers on
3. forward the calibration set to record activation ranges
4. freeze the observers and enable activation quantization
5. score layers and allocate weight bits (uniform when allocation is off)
6. reconstruct rounding layer by layer on already-quantized inputs
7. contrastive fine-tuning with channel restoration (optional)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import __version__
from . import haq as haq_mod
from .errors import ContractError, StageError
from .fakequant import DISABLED_BITS, QuantizedModel, calibrate, quantize, weight_qparams
from .reconstruct import ReconUnit, optimize_rounding
from .toy import Dataset, dense_forward
from .veft import finetune

STAGES = ("copy", "observe", "calibrate", "enable", "allocate", "reconstruct", "finetune")


@dataclass
class QuantConfig:
    """Every knob of a run; serialized as ``key = value`` lines.

    ``recon`` is ``auto`` (reconstruct exactly when allocation is on), ``on``
    or ``off``. ``weight_bits`` fixes the uniform bit-width used when
    allocation is off; 0 means ``floor(b_avg)``.
    """

    alpha: float = 1.0
    lam: float = 1.0
    gamma1: float = 0.5
    gamma2: float = 0.5
    bits: Tuple[int, ...] = (4, 8)
    b_avg: float = 5.0
    weight_bits: int = 0
    act_bits: int = 8
    rho: float = 0.1
    tau: float = 0.2
    K: int = 7
    T: int = 10
    calib_size: int = 256
    seed: int = 0
    haq_on: bool = True
    veft_on: bool = True
    random_mask_on: bool = True
    recon: str = "auto"
    haq_granularity: str = "layer"
    recon_steps: int = 500
    recon_lr: float = 1e-2
    beta_start: float = 20.0
    beta_end: float = 2.0
    veft_lr: float = 1e-3

    def __post_init__(self):
        self.bits = tuple(sorted({int(b) for b in self.bits}))
        if not self.bits or self.bits[0] < 2:
            raise ContractError("candidate bit-widths must be integers >= 2")
        if self.recon not in ("auto", "on", "off"):
            raise ContractError("recon must be auto, on or off")
        if self.haq_granularity not in ("layer", "block"):
            raise ContractError("haq_granularity must be layer or block")
        if self.calib_size < 1 or self.K < 1 or self.T < 0 or not self.tau > 0:
            raise ContractError("calib_size and K must be positive, T nonnegative, tau positive")
        if not 0 < self.rho <= 1:
            raise ContractError("rho must lie in (0, 1]")
        if self.haq_on and not self.bits[0] <= self.b_avg <= self.bits[-1]:
            raise ContractError("b_avg must lie within the candidate bit range")

    @property
    def recon_on(self):
        return self.haq_on if self.recon == "auto" else self.recon == "on"

    @property
    def uniform_bits(self):
        return self.weight_bits or int(math.floor(self.b_avg))

    def replace(self, **changes) -> "QuantConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(b) for b in v)
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "QuantConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"line {n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ContractError(f"line {n}: unknown key {key!r}")
            values[key] = _parse_value(key, value, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path) -> "QuantConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(key, value, type_name):
    try:
        if type_name == "bool":
            if value.lower() not in ("on", "off", "true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("on", "true", "1")
        if type_name.startswith("Tuple"):
            return tuple(int(v) for v in value.split(",") if v.strip())
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
        return value
    except ValueError:
        raise ContractError(f"{key}: cannot parse {value!r}") from None


def build_calibration_set(dataset: Dataset, size, seed=0) -> Dataset:
    """Seeded sample with at most ``ceil(size / n_scenes)`` samples per scene.

    If the per-scene cap cannot fill ``size`` (scenes too small), the rest is
    taken from the remaining samples in the same seeded order.
    """
    n = len(dataset)
    if size > n:
        raise ContractError(f"calibration size {size} exceeds dataset size {n}")
    if size < 1:
        raise ContractError("calibration size must be positive")
    order = np.random.default_rng([seed, 0xCA11B]).permutation(n)
    cap = math.ceil(size / dataset.n_scenes)
    taken, counts, rest = [], {}, []
    for i in order:
        scene = int(dataset.scene_ids[i])
        if len(taken) < size and counts.get(scene, 0) < cap:
            taken.append(i)
            counts[scene] = counts.get(scene, 0) + 1
        else:
            rest.append(i)
    taken.extend(rest[: size - len(taken)])
    return dataset[np.array(taken)]


def total_loss(l_rec, l_hor, l_ver, config: Optional[QuantConfig] = None) -> float:
    config = config or QuantConfig()
    return float(l_rec + config.gamma1 * l_hor + config.gamma2 * l_ver)


@dataclass
class PipelineResult:
    M_q: QuantizedModel
    M_qv: QuantizedModel
    assignment: Optional[haq_mod.BitAssignment]
    traces: Dict[str, list]
    config: QuantConfig
    manifest: dict
    M_q_reconstructed: Optional[QuantizedModel] = None  # stage 6 output, before fine-tuning
    metrics: dict = field(default_factory=dict)


class _Stages:
    def __init__(self):
        self.timings = {}

    def __call__(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start


def _importance(M_f, M_q: QuantizedModel, X):
    """Layer scores from full-precision layer inputs."""
    S, p, ids = [], [], []
    h = X
    for layer, fp in zip(M_q.layers, M_f.layers_):
        A = haq_mod.channel_importance(h)
        S.append(haq_mod.layer_score(layer.weight, A))
        p.append(layer.n_params)
        ids.append(layer.name)
        h = dense_forward(h, fp.weight, fp.bias, fp.relu)
    return np.array(S), np.array(p), ids


def _groups(M_q: QuantizedModel, granularity):
    if granularity == "layer":
        return [[i] for i in range(len(M_q.layers))]
    in_block = {i for b in M_q.blocks for i in b}
    groups = [list(b) for b in M_q.blocks]
    groups += [[i] for i in range(len(M_q.layers)) if i not in in_block]
    return sorted(groups)


def _allocate(M_f, M_q, X, config: QuantConfig, traces):
    n = len(M_q.layers)
    if not config.haq_on:
        return [config.uniform_bits] * n, None
    S, p, ids = _importance(M_f, M_q, X)
    groups = _groups(M_q, config.haq_granularity)
    gS = [float(np.dot(S[g], p[g]) / p[g].sum()) for g in groups]
    gp = [int(p[g].sum()) for g in groups]
    gid = ["+".join(ids[i] for i in g) for g in groups]
    problem = haq_mod.AllocationProblem(gS, gp, config.bits, config.b_avg, config.lam, gid)
    assignment = haq_mod.optimize_allocation(problem)
    bits = [0] * n
    for g, b in zip(groups, assignment.bits):
        for i in g:
            bits[i] = int(b)
    traces["l_hor"].append(haq_mod.loss_hor(problem, assignment.bits.astype(np.float64)).item())
    return bits, assignment


def _reconstruct(M_q: QuantizedModel, X, bits, config: QuantConfig, traces):
    for i, (layer, k) in enumerate(zip(M_q.layers, bits)):
        layer.weight_q = weight_qparams(layer.weight, k)
        if layer.weight_q is None:
            continue
        if not config.recon_on:
            layer.codes = quantize(layer.weight, layer.weight_q)
            continue
        x = M_q.layer_inputs(X, i)
        if layer.act_fq.enabled:
            x = layer.act_fq(x)
        unit = ReconUnit.for_layer(layer.weight, layer.weight_q, x, alpha=config.alpha, name=layer.name)
        state = optimize_rounding(
            unit, steps=config.recon_steps, lr=config.recon_lr, beta_schedule=(config.beta_start, config.beta_end)
        )
        layer.codes = state.codes[0]
        layer.rounding = state
        traces["l_rec"].append(state.history[-1] if state.history else state.mse)
        traces["recon_mse"].append(state.mse)
        traces["rtn_mse"].append(state.rtn_mse)


def run(M_f, dataset, config: Optional[QuantConfig] = None) -> PipelineResult:
    """Quantize ``M_f`` using a calibration sample drawn from ``dataset``."""
    config = config or QuantConfig()
    stages = _Stages()
    traces = {"l_rec": [], "l_hor": [], "l_ver": [], "total": [], "recon_mse": [], "rtn_mse": []}
    check_is_fitted(M_f, "layers_")

    calib = stages("copy", build_calibration_set, dataset, config.calib_size, config.seed)
    X = calib.X
    M_q = stages("copy", QuantizedModel.from_detector, M_f)
    stages("observe", M_q.set_observing, True)
    # observation runs with activation quantization off; freezing enables it
    stages("calibrate", calibrate, M_q, X, config.act_bits)
    bits, assignment = stages("allocate", _allocate, M_f, M_q, X, config, traces)
    stages("reconstruct", _reconstruct, M_q, X, bits, config, traces)
    l_hor = traces["l_hor"][-1] if traces["l_hor"] else 0.0
    l_rec = float(np.sum(traces["l_rec"]))
    traces["total"].append(total_loss(l_rec, l_hor, 0.0, config))

    M_recon = M_q.copy()
    if config.veft_on:
        ft = stages(
            "finetune",
            finetune,
            M_q,
            M_f,
            X,
            T=config.T,
            rho=config.rho,
            tau=config.tau,
            K=config.K,
            lr=config.veft_lr,
            seed=config.seed,
            random_mask=config.random_mask_on,
        )
        M_q, M_qv = ft.M_q, ft.M_qv
        traces["l_ver"] = list(ft.loss_trace)
        if ft.loss_trace:
            traces["total"].append(total_loss(l_rec, l_hor, ft.loss_trace[-1], config))
    else:
        M_qv = M_q.copy()

    for model in (M_q, M_qv):
        for layer in model.layers:
            layer.rounding = None
    manifest = make_manifest(config, stages.timings)
    manifest["bits"] = bits
    manifest["average_bits"] = M_q.average_weight_bits()
    return PipelineResult(M_q, M_qv, assignment, traces, config, manifest, M_recon)


def make_manifest(config: QuantConfig, timings=None, **extra) -> dict:
    import scipy
    import sklearn

    manifest = {
        "config": config.to_text(),
        "config_hash": config.hash,
        "seeds": {"seed": config.seed},
        "versions": {
            "biquant": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
            "python": platform.python_version(),
        },
        "stage_timings": {k: round(v, 4) for k, v in (timings or {}).items()},
    }
    manifest.update({k: v for k, v in extra.items() if v is not None})
    return manifest


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


class BiQuantizer(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`run`.

    ``fit(X, y=None, scene_ids=None)`` treats ``X`` as the calibration pool
    (labels are ignored). ``predict``/``predict_proba``/``decision_function``
    use the mixed-precision model when ``use_mixed`` is set, otherwise the
    low-precision one; ``transform`` returns final-block features.
    """

    def __init__(self, detector=None, config=None, use_mixed=True):
        self.detector = detector
        self.config = config
        self.use_mixed = use_mixed

    def fit(self, X, y=None, scene_ids=None):
        if self.detector is None:
            raise ContractError("a fitted full-precision detector is required")
        X = check_array(np.asarray(X).reshape(len(X), -1), dtype=np.float64)
        side = int(round(math.sqrt(X.shape[1])))
        pixels = X.reshape(X.shape[0], side, side) if side * side == X.shape[1] else X[:, None, :]
        scenes = np.zeros(len(X), dtype=np.int32) if scene_ids is None else np.asarray(scene_ids)
        labels = np.zeros(len(X), dtype=np.uint8) if y is None else np.asarray(y)
        pool = Dataset(pixels, labels, scenes)
        config = self.config or QuantConfig()
        if config.calib_size > len(pool):
            config = config.replace(calib_size=len(pool))
        self.result_ = run(self.detector, pool, config)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def model_(self) -> QuantizedModel:
        check_is_fitted(self, "result_")
        return self.result_.M_qv if self.use_mixed else self.result_.M_q

    def _X(self, X):
        return check_array(np.asarray(X).reshape(len(X), -1), dtype=np.float64)

    def decision_function(self, X):
        return self.model_.decision_function(self._X(X))

    def predict(self, X):
        return self.model_.predict(self._X(X))

    def predict_proba(self, X):
        return self.model_.predict_proba(self._X(X))

    def transform(self, X):
        return self.model_.features(self._X(X))
