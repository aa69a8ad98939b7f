"""Experiment matrix: methods x bit budgets x calibration sizes x seeds.

Method rows:

``fp``             the trained full-precision detector
``rtn``            min/max round-to-nearest at ``floor(B_avg)`` bits
``recon-uniform``  the same uniform bits with learnable rounding
``haq``            allocated bits with learnable rounding (``M_q``)
``haq+veft``       the fine-tuned mixed-precision model (``M_q^v``)
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import pipeline, runtime
from .errors import ContractError
from .fakequant import QuantizedModel
from .toy import ToyDetector, evaluate, generate_dataset, split_dataset

METHODS = ("fp", "rtn", "recon-uniform", "haq", "haq+veft")
DEFAULT_CALIB_SIZES = (64, 128, 256, 512, 1024)


@dataclass
class BenchRow:
    method: str
    b_avg: float
    calib_size: int
    seed: int
    mask: str
    accuracy: float
    auc: float
    retention: float
    storage_bytes: int
    compression_rate: float
    latency_ms: float
    config_hash: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        if not 0.0 <= self.retention <= 1.2:
            raise ContractError(f"retention {self.retention} outside [0, 1.2]")

    def cells(self) -> List[str]:
        return [
            self.method,
            f"{self.b_avg:g}",
            str(self.calib_size),
            str(self.seed),
            self.mask,
            f"{self.accuracy:.4f}",
            f"{self.auc:.6f}",
            f"{self.retention:.4f}",
            str(self.storage_bytes),
            f"{self.compression_rate:.6f}",
            f"{self.latency_ms:.4f}",
            self.config_hash,
        ]


COLUMNS = [f.name for f in fields(BenchRow)]


@dataclass
class BenchSettings:
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    b_avgs: Sequence[float] = (5.0,)
    calib_sizes: Sequence[int] = (256,)
    methods: Sequence[str] = METHODS
    mask_ablation: bool = True
    sweep_methods: Sequence[str] = ("haq+veft",)
    n_samples: int = 2000
    n_scenes: int = 40
    latency_runs: int = 100
    base: pipeline.QuantConfig = field(default_factory=pipeline.QuantConfig)


@dataclass
class RunReport:
    manifest: dict
    rows: List[BenchRow]

    def summary(self) -> List[dict]:
        """Mean and standard deviation over seeds for each configuration cell."""
        groups: Dict[tuple, List[BenchRow]] = {}
        for r in self.rows:
            groups.setdefault((r.method, r.b_avg, r.calib_size, r.mask), []).append(r)
        out = []
        for (method, b_avg, calib, mask), rows in groups.items():
            acc = np.array([r.accuracy for r in rows])
            ret = np.array([r.retention for r in rows])
            out.append(
                dict(
                    method=method,
                    b_avg=b_avg,
                    calib_size=calib,
                    mask=mask,
                    n=len(rows),
                    accuracy_mean=float(acc.mean()),
                    accuracy_sd=float(acc.std()),
                    retention_mean=float(ret.mean()),
                    retention_sd=float(ret.std()),
                    storage_bytes=int(np.mean([r.storage_bytes for r in rows])),
                    compression_rate=float(np.mean([r.compression_rate for r in rows])),
                )
            )
        return out

    def mean_retention(self, method, b_avg=None, calib_size=None, mask=None) -> float:
        vals = [
            r.retention
            for r in self.rows
            if r.method == method
            and (b_avg is None or r.b_avg == b_avg)
            and (calib_size is None or r.calib_size == calib_size)
            and (mask is None or r.mask == mask)
        ]
        if not vals:
            raise ContractError(f"no rows for {method} (b_avg={b_avg}, calib={calib_size}, mask={mask})")
        return float(np.mean(vals))


def train_reference(seed, n_samples=2000, n_scenes=40, **detector_params):
    """Data splits and the trained full-precision detector for one seed."""
    data = generate_dataset(seed, n_samples, n_scenes)
    train, val, test = split_dataset(data, seed=seed)
    detector = ToyDetector(random_state=seed, **detector_params).fit(train.X, train.y)
    return detector, train, val, test


def _row(method, model, test, acc_fp, config, reference, mask, latency_runs, X_lat) -> BenchRow:
    scores = evaluate(model, test)
    if isinstance(model, QuantizedModel):
        data = runtime.pack(model)
    else:
        data = runtime.pack(QuantizedModel.from_detector(model))
    metrics = runtime.storage_and_compression(data, reference)
    lat = runtime.latency(runtime.unpack(data), X_lat, runs=latency_runs)[0] if latency_runs else 0.0
    return BenchRow(
        method=method,
        b_avg=float(config.b_avg),
        calib_size=int(config.calib_size),
        seed=int(config.seed),
        mask=mask,
        accuracy=scores["accuracy"],
        auc=scores["auc"],
        retention=round(scores["accuracy"] / acc_fp, 12),
        storage_bytes=metrics.storage_cost_bytes,
        compression_rate=metrics.compression_rate,
        latency_ms=lat,
        config_hash=config.hash,
    )


def run_seed(seed, settings: BenchSettings, log=None) -> List[BenchRow]:
    detector, train, _, test = train_reference(seed, settings.n_samples, settings.n_scenes)
    acc_fp = evaluate(detector, test)["accuracy"]
    reference = runtime.fp_reference_bytes(detector)
    X_lat = test.X[:16]
    runs = settings.latency_runs
    rows = []
    base = settings.base.replace(seed=seed)
    if "fp" in settings.methods:
        rows.append(_row("fp", detector, test, acc_fp, base, reference, "-", runs, X_lat))
    cells = [(b, c) for b in settings.b_avgs for c in settings.calib_sizes]
    main_calib = base.calib_size if base.calib_size in settings.calib_sizes else settings.calib_sizes[0]
    for b_avg, calib in cells:
        cfg = base.replace(b_avg=b_avg, calib_size=calib)
        main_cell = calib == main_calib
        wanted = [m for m in settings.methods if m != "fp" and (main_cell or m in settings.sweep_methods)]
        if log:
            log(f"seed {seed} b_avg {b_avg:g} calib {calib}: {', '.join(wanted)}")
        if "rtn" in wanted:
            c = cfg.replace(haq_on=False, veft_on=False, recon="off")
            res = pipeline.run(detector, train, c)
            rows.append(_row("rtn", res.M_q, test, acc_fp, c, reference, "-", runs, X_lat))
        if "recon-uniform" in wanted:
            c = cfg.replace(haq_on=False, veft_on=False, recon="on")
            res = pipeline.run(detector, train, c)
            rows.append(_row("recon-uniform", res.M_q, test, acc_fp, c, reference, "-", runs, X_lat))
        if "haq" in wanted or "haq+veft" in wanted:
            c = cfg.replace(haq_on=True, veft_on=True, random_mask_on=True)
            res = pipeline.run(detector, train, c)
            if "haq" in wanted:
                # stages before fine-tuning do not depend on the fine-tuning toggle
                c_haq = cfg.replace(haq_on=True, veft_on=False)
                rows.append(_row("haq", res.M_q_reconstructed, test, acc_fp, c_haq, reference, "-", runs, X_lat))
            if "haq+veft" in wanted:
                rows.append(_row("haq+veft", res.M_qv, test, acc_fp, c, reference, "random", runs, X_lat))
            if settings.mask_ablation and main_cell and "haq+veft" in wanted:
                c_fixed = cfg.replace(haq_on=True, veft_on=True, random_mask_on=False)
                res_fixed = pipeline.run(detector, train, c_fixed)
                rows.append(_row("haq+veft", res_fixed.M_qv, test, acc_fp, c_fixed, reference, "fixed", runs, X_lat))
    return rows


def run_matrix(settings: Optional[BenchSettings] = None, log=None) -> RunReport:
    settings = settings or BenchSettings()
    if len(settings.seeds) < 1:
        raise ContractError("at least one seed is required")
    rows = []
    for seed in settings.seeds:
        rows.extend(run_seed(seed, settings, log))
    manifest = pipeline.make_manifest(settings.base)
    manifest["seeds"] = {"seeds": list(settings.seeds), "data_and_training": "per-row seed"}
    manifest["bench"] = {
        "b_avgs": list(settings.b_avgs),
        "calib_sizes": list(settings.calib_sizes),
        "methods": list(settings.methods),
        "mask_ablation": settings.mask_ablation,
        "n_samples": settings.n_samples,
        "n_scenes": settings.n_scenes,
    }
    return RunReport(manifest, rows)


def emit_csv(report: RunReport, path=None) -> str:
    if not report.rows:
        raise ContractError("report has no rows")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in report.rows:
        writer.writerow(r.cells())
    text = buf.getvalue()
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise FileNotFoundError(f"cannot write {path}: {exc}") from exc
    return text


def read_csv(path) -> List[BenchRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            raise ContractError(f"{path} is not a bench CSV")
        rows = []
        for d in reader:
            rows.append(
                BenchRow(
                    method=d["method"],
                    b_avg=float(d["b_avg"]),
                    calib_size=int(d["calib_size"]),
                    seed=int(d["seed"]),
                    mask=d["mask"],
                    accuracy=float(d["accuracy"]),
                    auc=float(d["auc"]),
                    retention=float(d["retention"]),
                    storage_bytes=int(d["storage_bytes"]),
                    compression_rate=float(d["compression_rate"]),
                    latency_ms=float(d["latency_ms"]),
                    config_hash=d["config_hash"],
                )
            )
    return rows


def render_table(report: RunReport) -> str:
    """Plain-text summary table, one line per configuration cell."""
    head = (
        f"{'method':<14} {'mask':<6} {'B_avg':>5} {'calib':>5} {'n':>2} "
        f"{'accuracy':>15} {'retention':>15} {'storage':>8} {'compr%':>6}"
    )
    lines = [head, "-" * len(head)]
    order = {m: i for i, m in enumerate(METHODS)}
    cells = sorted(report.summary(), key=lambda s: (s["b_avg"], s["calib_size"], order[s["method"]], s["mask"]))
    for s in cells:
        lines.append(
            f"{s['method']:<14} {s['mask']:<6} {s['b_avg']:>5g} {s['calib_size']:>5} {s['n']:>2} "
            f"{s['accuracy_mean']:>7.4f}±{s['accuracy_sd']:<7.4f} {s['retention_mean']:>7.4f}±{s['retention_sd']:<7.4f} "
            f"{s['storage_bytes']:>8} {100 * s['compression_rate']:>6.1f}"
        )
    return "\n".join(lines) + "\n"
