"""Command line entry point: synth / train / eval / report.

Exit codes: 0 success, 2 usage errors, 3 data or input errors, 4 config
errors. Train settings come from a key=value config file whose keys match
TrainConfig field names; RGBTSAL_<FIELD> environment variables override
the file, --set key=value flags override the environment, and the
explicit --strategy/--seed flags override everything. Every train or
eval output directory receives a manifest.json recording the resolved
config, a digest of the package sources, and the produced files.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields as dataclass_fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .exceptions import ConfigurationError, DataError, InputError, UsageError
from .data import SynthConfig, generate_synthetic, load_vt_dataset, misalign_thermal, to_tensors
from .model import load_model
from .metrics import MetricReport, evaluate_dataset
from .trainer import (STRATEGIES, TrainConfig, config_from_mapping, parse_config_file,
                      run_training)

ENV_PREFIX = "RGBTSAL_"
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONFIG = 4


def code_digest():
    """sha256 over the package sources, for provenance in manifests."""
    digest = hashlib.sha256()
    package_dir = Path(__file__).parent
    for path in sorted(package_dir.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_manifest(run_dir, command, config, outputs):
    manifest = {
        "created": datetime.now(timezone.utc).isoformat(),
        "command": command,
        "config": config,
        "code_digest": code_digest(),
        "package_version": __version__,
        "outputs": outputs,
    }
    (Path(run_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def resolve_train_config(args) -> TrainConfig:
    mapping = {}
    if args.config:
        mapping.update(parse_config_file(args.config))
    for field in dataclass_fields(TrainConfig):
        env_key = ENV_PREFIX + field.name.upper()
        if env_key in os.environ:
            mapping[field.name] = os.environ[env_key]
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    if args.strategy:
        mapping["strategy"] = args.strategy
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    return config_from_mapping(mapping)


def cmd_synth(args):
    config = SynthConfig(n_samples=args.n, size=args.size, noise_rgb=args.noise,
                         darkness=args.darkness, distractors=args.distractors,
                         thermal_blur=args.thermal_blur, seed=args.seed,
                         shapes=tuple(args.shapes.split(",")))
    manifest = generate_synthetic(config, args.out)
    print(f"wrote {manifest['n_samples']} synthetic pairs to {args.out} "
          f"({manifest['n_dark']} darkened, {manifest['n_distractors']} with distractors)")
    return EXIT_OK


def cmd_train(args):
    config = resolve_train_config(args)
    result = run_training(config, args.data, args.out)
    write_manifest(args.out, "train", asdict(config), result)
    print(f"strategy {config.strategy}: {result['steps']} steps, "
          f"checkpoints {', '.join(result['checkpoints'])}")
    print(f"loss log: {result['loss_log']}")
    return EXIT_OK


def _per_image_seed(seed, name):
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _write_maps(model, payload, pairs, maps_dir, misalign_seed):
    use_thermal = payload["stage"] in ("stage2", "joint")
    maps_dir.mkdir(parents=True, exist_ok=True)
    if misalign_seed is not None:
        pairs = [misalign_thermal(p, _per_image_seed(misalign_seed, p.name)) for p in pairs]
    model.eval()
    with torch.no_grad():
        for start in range(0, len(pairs), 10):
            batch = pairs[start:start + 10]
            rgb, thermal, _ = to_tensors(batch)
            outputs = model(rgb, thermal) if use_thermal else model(rgb)
            probs = torch.sigmoid(outputs.final)
            for pair, prob in zip(batch, probs):
                resized = torch.nn.functional.interpolate(
                    prob[None], size=pair.orig_size, mode="bilinear", align_corners=False)
                gray = np.clip(np.rint(resized[0, 0].numpy() * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(gray).save(maps_dir / f"{pair.name}.png")


def cmd_eval(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ckpt:
        if args.pred or args.gt:
            raise UsageError("--ckpt mode and --pred/--gt mode are mutually exclusive")
        if not args.data:
            raise UsageError("--ckpt mode requires --data")
        model, payload = load_model(args.ckpt)
        size = model.config.backbone.input_size
        pairs = load_vt_dataset(args.data, split=args.split, size=size)
        maps_dir = out / "maps"
        _write_maps(model, payload, pairs, maps_dir, args.misalign)
        gt_dir = (Path(args.data) / args.split if args.split else Path(args.data)) / "GT"
        report = evaluate_dataset(maps_dir, gt_dir)
        config = {"ckpt": str(args.ckpt), "data": str(args.data), "split": args.split,
                  "misalign": args.misalign, "stage": payload["stage"]}
    else:
        if not (args.pred and args.gt):
            raise UsageError("eval needs either --ckpt with --data, or --pred with --gt")
        if args.misalign is not None:
            raise UsageError("--misalign applies only to --ckpt mode")
        report = evaluate_dataset(args.pred, args.gt)
        config = {"pred": str(args.pred), "gt": str(args.gt)}
    report_path = out / "report.json"
    report.to_json(report_path)
    write_manifest(out, "eval", config, {"report": str(report_path)})
    scalars = {k: getattr(report, k) for k in ("f_max", "f_adaptive", "s", "e_max", "mae")}
    print(f"evaluated {report.n_images} images: "
          + ", ".join(f"{k}={v:.4f}" if v is not None else f"{k}=n/a"
                      for k, v in scalars.items()))
    if report.flagged:
        print(f"flagged (no foreground): {', '.join(report.flagged)}")
    if report.skipped:
        print(f"skipped (missing counterpart): {', '.join(report.skipped)}")
        return EXIT_DATA
    return EXIT_OK


def cmd_report(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = ("run", "n_images", "f_max", "f_adaptive", "s", "e_max", "mae")
    lines = [",".join(columns)]
    for run_dir in args.run_dirs:
        run = Path(run_dir)
        report_path = run / "report.json"
        if not report_path.is_file():
            raise DataError(f"no report.json under {run}")
        try:
            report = MetricReport.from_json(report_path)
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"malformed report {report_path}: {exc}") from exc
        values = [run.name, str(report.n_images)]
        for key in ("f_max", "f_adaptive", "s", "e_max", "mae"):
            value = getattr(report, key)
            values.append("" if value is None else f"{value:.17g}")
        lines.append(",".join(values))
        if report.pr:
            pr_path = out.parent / f"{out.stem}_{run.name}_pr.csv"
            pr_lines = ["t,p,r"] + [f"{p['t']:.17g},{p['p']:.17g},{p['r']:.17g}"
                                    for p in report.pr]
            pr_path.write_text("\n".join(pr_lines) + "\n")
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out} ({len(args.run_dirs)} runs)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="rgbtsal",
                                     description="RGB-thermal saliency training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic RGB-T dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n", type=int, default=100)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--noise", type=float, default=0.02)
    p_synth.add_argument("--darkness", type=float, default=0.5)
    p_synth.add_argument("--distractors", type=float, default=0.5)
    p_synth.add_argument("--thermal-blur", type=float, default=1.2, dest="thermal_blur")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--shapes", default="ellipse,rectangle,blob")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a dataset directory")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", help="key=value file with TrainConfig fields")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_train.add_argument("--strategy", choices=STRATEGIES)
    p_train.add_argument("--seed", type=int)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="write saliency maps and/or score predictions")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--ckpt")
    p_eval.add_argument("--data")
    p_eval.add_argument("--split")
    p_eval.add_argument("--misalign", type=int, metavar="SEED",
                        help="perturb thermal inputs with seeded random affines")
    p_eval.add_argument("--pred")
    p_eval.add_argument("--gt")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="tabulate eval reports from run directories")
    p_report.add_argument("run_dirs", nargs="+")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
