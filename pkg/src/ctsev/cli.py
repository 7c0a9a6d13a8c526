"""Command line front end.

Exit codes: 0 on success, 1 for validation problems (bad arguments, malformed
manifests or configs, label errors), 2 for I/O failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import prepare_volume, resolve_volume_path
from .errors import ValidationError
from .evaluate import CLASS_NAMES, evaluate, render_report
from .preprocess import preprocess_volume
from .synth import PhantomSpec, generate_dataset
from .train import (
    RunConfig,
    load_checkpoint,
    predict_classes,
    predict_patient_slicevote,
    run_training,
)
from .volio import (
    DatasetManifest,
    PatientRecord,
    class_histogram,
    load_manifest,
    load_volume,
    save_manifest,
    save_volume_raw,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract here says
    validation problems are exit 1, so route them through ValidationError."""

    def error(self, message):
        raise ValidationError(f"{self.format_usage()}{message}")


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(Path(path).read_text(encoding="utf-8"))


def _cmd_synth(args) -> int:
    spec = PhantomSpec(
        height=args.height,
        width=args.width,
        depth_range=(args.depth_min, args.depth_max),
        noise_std=args.noise_std,
        seed=args.seed,
    )
    manifest = generate_dataset(
        args.out,
        spec,
        (args.low, args.medium, args.high),
        test_fraction=args.test_fraction,
    )
    counts = class_histogram(manifest)
    print(
        f"wrote {len(manifest.records)} phantoms to {args.out} "
        f"(low {counts[0]}, medium {counts[1]}, high {counts[2]})"
    )
    return 0


def _cmd_preprocess(args) -> int:
    cfg = _load_run_config(args.config).preprocess
    manifest = load_manifest(args.manifest)
    base_dir = Path(args.manifest).parent
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    for record in manifest.records:
        volume = load_volume(resolve_volume_path(record, base_dir), args.format)
        processed = preprocess_volume(volume, cfg, record_id=record.id)
        rel = f"volumes/{record.id}"
        save_volume_raw(processed, out / rel)
        records.append(PatientRecord(record.id, rel, record.score, record.split))
    save_manifest(
        DatasetManifest(records=records, source_note=manifest.source_note),
        out / "manifest.json",
    )
    print(f"preprocessed {len(records)} volumes into {out}")
    return 0


def _cmd_train(args) -> int:
    run_cfg = _load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    run_training(
        manifest,
        run_cfg,
        mode=args.mode,
        base_dir=Path(args.manifest).parent,
        fmt=args.format,
        out_dir=args.out,
        log=print,
    )
    print(f"saved checkpoint and metrics to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    run_cfg = _load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    net, _ = load_checkpoint(args.checkpoint)
    report = evaluate(
        net,
        manifest,
        run_cfg.preprocess,
        mode=args.mode,
        base_dir=Path(args.manifest).parent,
        fmt=args.format,
    )
    sys.stdout.write(render_report(report))
    if args.out:
        report.save(args.out)
    return 0


def _cmd_predict(args) -> int:
    run_cfg = _load_run_config(args.config)
    net, _ = load_checkpoint(args.checkpoint)
    volume = load_volume(args.volume, args.format)
    arr = prepare_volume(volume, run_cfg.preprocess)[None, None]
    if net.planar:
        cls = predict_patient_slicevote(net, arr[0])
    else:
        cls = int(predict_classes(net, arr)[0])
    print(CLASS_NAMES[cls])
    return 0


def _cmd_histogram(args) -> int:
    manifest = load_manifest(args.manifest)
    counts = class_histogram(manifest)
    lines = ["class,count"]
    lines += [f"{name},{counts[i]}" for i, name in enumerate(CLASS_NAMES)]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctsev", description="CT severity pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--low", type=int, default=10)
    p.add_argument("--medium", type=int, default=10)
    p.add_argument("--high", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--depth-min", type=int, default=32)
    p.add_argument("--depth-max", type=int, default=48)
    p.add_argument("--noise-std", type=float, default=12.0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="window, crop, resize, uniformize")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--format", default="raw", choices=["raw", "slice_stack"])
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train a severity classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument(
        "--mode", default="volumetric3d", choices=["volumetric3d", "slicevote2d"]
    )
    p.add_argument("--format", default="raw", choices=["raw", "slice_stack"])
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument(
        "--mode", default="volumetric3d", choices=["volumetric3d", "slicevote2d"]
    )
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.add_argument("--format", default="raw", choices=["raw", "slice_stack"])
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="predict severity for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--format", default="raw", choices=["raw", "slice_stack"])
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("histogram", help="class histogram of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="also write the CSV here")
    p.set_defaults(func=_cmd_histogram)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
