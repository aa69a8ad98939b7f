"""Command-line entry point: ``biquant <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing or
unreadable file, 4 malformed file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, pipeline, runtime
from .errors import BiquantError, ContractError, FormatError
from .fakequant import QuantizedModel
from .toy import ToyDetector, evaluate, generate_dataset, load_dataset, save_dataset, split_dataset

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FILE, EXIT_FORMAT = 0, 1, 2, 3, 4
SEED_ENV = "BIQUANT_SEED"


class UsageError(Exception):
    pass


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_detector(path):
    return runtime.to_detector(runtime.load(_require_file(path, "model")))


def _load_data(path):
    return load_dataset(_require_file(path, "dataset"))


# commands -------------------------------------------------------------------


def cmd_train_toy(args):
    seed = _env_seed()
    seed = args.seed if seed is None else seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(seed, args.n_samples, args.n_scenes)
    train, val, test = split_dataset(data, seed=seed)
    detector = ToyDetector(random_state=seed, epochs=args.epochs).fit(train.X, train.y)
    size = runtime.save(QuantizedModel.from_detector(detector), out / "mf.dfq")
    for name, part in (("train", train), ("val", val), ("test", test)):
        save_dataset(part, out / f"{name}.bqds")
    scores = evaluate(detector, test)
    manifest = {
        "command": "train-toy",
        "seed": seed,
        "n_samples": args.n_samples,
        "n_scenes": args.n_scenes,
        "epochs": args.epochs,
        "test_accuracy": round(scores["accuracy"], 6),
        "test_auc": round(scores["auc"], 6),
        "model_bytes": size,
        "model_sha256": _sha256(out / "mf.dfq"),
    }
    pipeline.write_manifest(manifest, out / "manifest.json")
    print(f"wrote {out / 'mf.dfq'} ({size} bytes, {detector.n_params} parameters)")
    print(f"test accuracy {scores['accuracy']:.4f}  auc {scores['auc']:.4f}")
    return EXIT_OK


_QUANT_FLAGS = ("haq", "veft", "random_mask", "recon", "b_avg", "bits", "calib_size", "rho", "weight_bits", "act_bits")


def cmd_quantize(args):
    if args.from_manifest:
        clashing = [f for f in ("config",) + _QUANT_FLAGS if getattr(args, f) is not None]
        if clashing:
            raise UsageError("--from-manifest cannot be combined with " + ", ".join("--" + c.replace("_", "-") for c in clashing))
        manifest = pipeline.read_manifest(_require_file(args.from_manifest, "manifest"))
        if "config" not in manifest:
            raise UsageError(f"{args.from_manifest} carries no quantization config")
        config = pipeline.QuantConfig.from_text(manifest["config"])
        model_path = args.model or manifest.get("model")
        data_path = args.data or manifest.get("data")
    else:
        config = pipeline.QuantConfig.load(_require_file(args.config, "config")) if args.config else pipeline.QuantConfig()
        changes = {
            "haq_on": args.haq,
            "veft_on": args.veft,
            "random_mask_on": args.random_mask,
            "recon": args.recon,
            "b_avg": args.b_avg,
            "bits": tuple(args.bits) if args.bits else None,
            "calib_size": args.calib_size,
            "rho": args.rho,
            "weight_bits": args.weight_bits,
            "act_bits": args.act_bits,
            "seed": args.seed,
        }
        config = config.replace(**{k: v for k, v in changes.items() if v is not None})
        model_path, data_path = args.model, args.data
        env = _env_seed()
        if env is not None:
            config = config.replace(seed=env)
    if not model_path or not data_path:
        raise UsageError("--model and --data are required")
    if args.random_mask is not None and not config.veft_on:
        raise UsageError("--random-mask only applies with --veft on")
    if args.weight_bits is not None and config.haq_on:
        raise UsageError("--weight-bits only applies with --haq off")

    detector = _load_detector(model_path)
    data = _load_data(data_path)
    result = pipeline.run(detector, data, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reference = runtime.fp_reference_bytes(detector)
    sizes = {name: runtime.save(model, out / f"{name}.dfq") for name, model in (("mq", result.M_q), ("mqv", result.M_qv))}
    (out / "assignment.txt").write_text(result.assignment.to_text() if result.assignment is not None else "")
    manifest = dict(result.manifest)
    manifest.update(
        command="quantize",
        model=str(Path(model_path).resolve()),
        model_sha256=_sha256(model_path),
        data=str(Path(data_path).resolve()),
        data_sha256=_sha256(data_path),
        packed={
            name: {"bytes": size, "sha256": _sha256(out / f"{name}.dfq"), "fraction_of_fp32": round(size / reference, 6)}
            for name, size in sizes.items()
        },
        fp32_reference_bytes=reference,
    )
    pipeline.write_manifest(manifest, out / "manifest.json")
    print(f"config {config.hash}  bits {result.manifest['bits']}  average {result.manifest['average_bits']:.3f}")
    for name, size in sizes.items():
        print(f"{name}.dfq  {size} bytes  {100 * size / reference:.2f}% of fp32")
    return EXIT_OK


def cmd_eval(args):
    model = runtime.load(_require_file(args.model, "model"))
    scores = evaluate(model, _load_data(args.data))
    print(f"accuracy {scores['accuracy']:.4f}")
    print(f"auc {scores['auc']:.6f}")
    return EXIT_OK


def cmd_pack(args):
    data = Path(_require_file(args.model, "model")).read_bytes()
    packed = runtime.unpack(data)
    if packed.to_bytes() != data:
        raise FormatError("re-serialized bytes differ from the file")
    print(f"round trip ok ({len(data)} bytes, {packed.restored_channels()} restored channels)")
    if args.reference:
        ref_size = len(Path(_require_file(args.reference, "reference")).read_bytes())
        m = runtime.storage_and_compression(data, ref_size)
        print(f"storage {m.storage_cost_bytes} bytes  reference {ref_size} bytes")
        print(f"compression rate {100 * m.compression_rate:.2f}%  size {100 * m.size_fraction:.2f}% of reference")
    if args.out:
        Path(args.out).write_bytes(packed.to_bytes())
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_infer(args):
    packed = runtime.load(_require_file(args.model, "model"))
    data = _load_data(args.data)
    X = data.X[: args.n]
    logits = packed.forward(X)
    np.savetxt(sys.stdout, logits, fmt="%.6f")
    mean, sd = runtime.latency(packed, X, warmup=args.warmup, runs=args.runs)
    print(f"latency {mean:.4f} ms ± {sd:.4f} ms over {args.runs} single-sample runs")
    return EXIT_OK


def cmd_describe(args):
    packed = runtime.load(_require_file(args.model, "model"))
    sys.stdout.write(packed.describe())
    return EXIT_OK


def cmd_bench(args):
    seeds = args.seeds
    if seeds is None:
        env = _env_seed()
        start = 0 if env is None else env
        seeds = list(range(start, start + 5))
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    if len(seeds) < 5:
        print(f"warning: {len(seeds)} seed(s); benchmarked claims use 5", file=sys.stderr)
    unknown = set(args.methods) - set(bench.METHODS)
    if unknown:
        raise UsageError(f"unknown method(s): {', '.join(sorted(unknown))}")
    base = pipeline.QuantConfig.load(_require_file(args.config, "config")) if args.config else pipeline.QuantConfig()
    if args.calib_size is not None:
        base = base.replace(calib_size=args.calib_size)
    settings = bench.BenchSettings(
        seeds=seeds,
        b_avgs=args.b_avg,
        calib_sizes=args.calib_sizes,
        methods=tuple(m for m in bench.METHODS if m in args.methods),
        mask_ablation=args.mask_ablation,
        latency_runs=args.latency_runs,
        base=base,
    )
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    report = bench.run_matrix(settings, log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.emit_csv(report, out / "bench.csv")
    table = bench.render_table(report)
    (out / "report.txt").write_text(table)
    pipeline.write_manifest(report.manifest, out / "manifest.json")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_report(args):
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir} is not a directory")
    csv_path = run_dir / "bench.csv"
    if not csv_path.is_file():
        raise UsageError(f"{run_dir} holds no bench.csv; run `biquant bench --out {run_dir}` first")
    rows = bench.read_csv(csv_path)
    if not rows:
        raise UsageError(f"{csv_path} has no rows")
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else {}
    report = bench.RunReport(manifest, rows)
    table = bench.render_table(report)
    (run_dir / "report.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# parser ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="biquant", description="Post-training quantization of a toy deepfake detector.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="generate the toy dataset and train the full-precision detector")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--n-scenes", type=int, default=40)
    p.add_argument("--epochs", type=int, default=100)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("quantize", help="run the quantization pipeline")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--from-manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--haq", type=_on_off)
    p.add_argument("--veft", type=_on_off)
    p.add_argument("--random-mask", type=_on_off)
    p.add_argument("--recon", choices=("auto", "on", "off"))
    p.add_argument("--b-avg", type=float)
    p.add_argument("--bits", type=_int_list)
    p.add_argument("--weight-bits", type=int)
    p.add_argument("--act-bits", type=int)
    p.add_argument("--calib-size", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="accuracy and AUC of a .dfq model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pack", help="verify a .dfq file and report storage and compression")
    p.add_argument("--model", required=True)
    p.add_argument("--reference")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("infer", help="logits and single-sample latency from the packed runtime")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-n", type=int, default=8)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--runs", type=int, default=100)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("describe", help="print the layer table of a .dfq file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("bench", help="run the experiment matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--b-avg", type=_float_list, default=[5.0])
    p.add_argument("--calib-sizes", type=_int_list, default=list(bench.DEFAULT_CALIB_SIZES))
    p.add_argument("--calib-size", type=int, help="main calibration size for the non-sweep rows")
    p.add_argument("--methods", type=lambda s: [m for m in s.split(",") if m], default=list(bench.METHODS))
    p.add_argument("--config")
    p.add_argument("--no-mask-ablation", dest="mask_ablation", action="store_false")
    p.add_argument("--latency-runs", type=int, default=100)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render the table of a finished bench run")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"biquant {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"biquant {args.command}: {exc}", file=sys.stderr)
        return EXIT_FILE
    except FormatError as exc:
        print(f"biquant {args.command}: malformed file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (BiquantError, ContractError, OSError) as exc:
        print(f"biquant {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
