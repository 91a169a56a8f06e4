"""Command-line interface.

Subcommands: gen-data, train, sample, eval, decompose. Every command
reads an optional JSON config file; explicit flags win over file values.
The effective configuration is echoed to the output directory as
resolved-config.json so a run is reproducible from its artifacts alone.

Exit codes: 0 success, 2 configuration error, 3 data/IO error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import (
    generate_dataset,
    load_checkpoint,
    load_image_pgm,
    read_dataset,
    save_image_pgm,
    write_dataset,
)
from .errors import ConfigurationError, DataIOError, NumericFailure
from .metrics import MetricReport, paired_t_test, psnr, ssim
from .pipeline import (
    TrainConfig,
    Trainer,
    build_pyramid,
    config_hash,
    copy_source_report,
    evaluate,
    sample_hierarchical,
)
from .pyramid import Pyramid, decompose
from .tensor import Tensor

TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}

_FLAG_NAMES = {
    "image_size": "--image-size",
    "num_levels": "--levels",
    "alpha": "--alpha",
    "patch_size": "--patch-size",
    "timesteps": "--timesteps",
    "beta_start": "--beta-start",
    "beta_end": "--beta-end",
    "mask_ratio_fine": "--mask-ratio-fine",
    "mask_ratio_coarse": "--mask-ratio-coarse",
    "cgr_weight": "--cgr-weight",
    "learning_rate": "--learning-rate",
    "batch_size": "--batch-size",
    "epochs": "--epochs",
    "seed": "--seed",
    "checkpoint_every": "--checkpoint-every",
    "embed_dim": "--embed-dim",
    "num_heads": "--num-heads",
    "num_encoder_blocks": "--encoder-blocks",
    "num_decoder_blocks": "--decoder-blocks",
    "time_embed_dim": "--time-embed-dim",
    "mlp_ratio": "--mlp-ratio",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")
    for name, flag in _FLAG_NAMES.items():
        kind = type(getattr(TrainConfig, name))
        parser.add_argument(flag, dest=name, type=kind, default=None)
    parser.add_argument(
        "--encode-clean-visible",
        dest="encode_clean_visible",
        action="store_true",
        default=None,
    )


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{p}: top level must be a JSON object")
    return raw


def _resolve(args, command_keys: set[str]) -> tuple[TrainConfig, dict]:
    """Defaults < JSON file < explicit flags; unknown JSON keys are errors."""
    raw = _load_json(getattr(args, "config", None))
    unknown = set(raw) - TRAIN_FIELDS - command_keys
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    cfg_kwargs = {k: v for k, v in raw.items() if k in TRAIN_FIELDS}
    for name in TRAIN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            cfg_kwargs[name] = value
    try:
        config = TrainConfig(**cfg_kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    options = {k: v for k, v in raw.items() if k in command_keys}
    for key in command_keys:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    return config, options


def _require(options: dict, key: str, flag: str):
    if key not in options or options[key] in (None, ""):
        raise ConfigurationError(f"{flag} is required")
    return options[key]


def _prepare_out(options: dict, command: str, config: TrainConfig) -> Path:
    out = Path(_require(options, "out", "--out"))
    out.mkdir(parents=True, exist_ok=True)
    echo = {
        "command": command,
        "config_hash": config_hash(config),
        "options": {k: str(v) if isinstance(v, Path) else v for k, v in options.items()},
        "train_config": asdict(config),
    }
    (out / "resolved-config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


def _load_model(path: str | Path) -> tuple[TrainConfig, dict[str, Tensor], dict]:
    header, arrays, _ = load_checkpoint(path)
    try:
        config = TrainConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(
            f"{path}: checkpoint header has no usable config: {exc}"
        ) from exc
    params = {name: Tensor(arr) for name, arr in arrays.items()}
    return config, params, header


def _write_loss_csv(path: Path, history: list[list[float]], num_levels: int) -> None:
    columns = [
        "epoch",
        "step",
        "loss_eps",
        *[f"cgr_{i}" for i in range(num_levels)],  # cgr_0 is the coarsest level
        "combined",
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow(
                [f"{row[0]:.0f}", f"{row[1]:.0f}", *[f"{v:.17g}" for v in row[2:]]]
            )


# ---- commands ----


def cmd_gen_data(args) -> None:
    keys = {"out", "num_train", "num_test", "difficulty"}
    config, options = _resolve(args, keys)
    out = _prepare_out(options, "gen-data", config)
    num_train = int(options.get("num_train", 16))
    num_test = int(options.get("num_test", 4))
    difficulty = float(options.get("difficulty", 0.5))
    train, test = generate_dataset(
        config.image_size, num_train, num_test, config.seed, difficulty
    )
    manifest = write_dataset(
        out,
        train,
        test,
        meta={
            "image_size": config.image_size,
            "seed": config.seed,
            "difficulty": difficulty,
            "num_train": num_train,
            "num_test": num_test,
        },
    )
    print(f"wrote {num_train} train + {num_test} test pairs to {manifest.parent}")


def cmd_train(args) -> None:
    keys = {"out", "data", "resume", "force"}
    config, options = _resolve(args, keys)
    out = _prepare_out(options, "train", config)
    data_dir = _require(options, "data", "--data")
    train_samples, _, _ = read_dataset(data_dir)

    resume_path = options.get("resume")
    if resume_path:
        header, _, _ = load_checkpoint(resume_path)
        stored_hash = header.get("config_hash", "")
        requested_hash = config_hash(config)
        if stored_hash != requested_hash and not options.get("force"):
            raise ConfigurationError(
                f"checkpoint config hash {stored_hash[:12]} differs from the "
                f"requested {requested_hash[:12]}; pass --force to train anyway"
            )
        trainer = Trainer.resume(resume_path, train_samples, config=config)
        print(f"resumed from {resume_path} at epoch {trainer.epoch}")
    else:
        trainer = Trainer(config, train_samples)

    loss_csv = out / "loss_log.csv"
    _write_loss_csv(loss_csv, trainer.history, config.num_levels)
    while trainer.epoch < config.epochs:
        results = trainer.train_epoch()
        _write_loss_csv(loss_csv, trainer.history, config.num_levels)
        mean_combined = float(np.mean([r.combined for r in results]))
        print(
            f"epoch {trainer.epoch}/{config.epochs}  "
            f"steps {trainer.global_step}  combined {mean_combined:.6f}"
        )
        at_cadence = trainer.epoch % config.checkpoint_every == 0
        if at_cadence or trainer.epoch == config.epochs:
            trainer.save(out / f"checkpoint_epoch{trainer.epoch:04d}.phmd")
            trainer.save(out / "checkpoint_latest.phmd")
    print(f"loss log: {loss_csv}")
    print(f"latest checkpoint: {out / 'checkpoint_latest.phmd'}")


def cmd_sample(args) -> None:
    keys = {"out", "checkpoint", "source", "target", "sample_seed",
            "sample_timesteps", "snapshot_every"}
    _, options = _resolve(args, keys)
    checkpoint = _require(options, "checkpoint", "--checkpoint")
    config, params, _ = _load_model(checkpoint)
    out = _prepare_out(options, "sample", config)

    source = load_image_pgm(_require(options, "source", "--source"))
    expected = (config.image_size, config.image_size)
    if source.shape != expected:
        raise ConfigurationError(
            f"source dims {source.shape} do not match the checkpoint's "
            f"image size {expected}"
        )
    target = None
    if options.get("target"):
        target = load_image_pgm(options["target"])
        if target.shape != expected:
            raise ConfigurationError(
                f"target dims {target.shape} do not match {expected}"
            )

    budget = options.get("sample_timesteps")
    trace = sample_hierarchical(
        source,
        params,
        config,
        int(options.get("sample_seed", 0)),
        num_timesteps=None if budget is None else int(budget),
        snapshot_every=int(options.get("snapshot_every", 0)),
    )
    target_pyr = build_pyramid(target, config) if target is not None else None

    levels_meta = []
    for n, image in enumerate(trace.outputs):
        name = f"level{n}_output.pgm"
        save_image_pgm(out / name, image)
        meta = {
            "level": n,
            "height": image.shape[0],
            "width": image.shape[1],
            "timesteps": trace.timestep_counts[n],
            "output": name,
        }
        if target_pyr is not None:
            reference = target_pyr.levels[n]
            meta["psnr"] = psnr(reference, image)
            if min(image.shape) >= 11:
                meta["ssim"] = ssim(reference, image)
            error_name = f"level{n}_error.pgm"
            # |error| spans [0, 2]; shift to the PGM writer's [-1, 1]
            save_image_pgm(out / error_name, np.abs(image - reference) - 1.0)
            meta["error_map"] = error_name
        levels_meta.append(meta)
    for level, t, image in trace.snapshots:
        save_image_pgm(out / f"snapshot_level{level}_t{t:04d}.pgm", image)

    trace_doc = {
        "seed": trace.rng_seed,
        "checkpoint": str(checkpoint),
        "levels": levels_meta,
    }
    (out / "trace.json").write_text(
        json.dumps(trace_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {len(levels_meta)} level outputs to {out}")


def cmd_eval(args) -> None:
    keys = {"out", "data", "checkpoint", "checkpoint2", "split",
            "sample_seed", "sample_timesteps"}
    _, options = _resolve(args, keys)
    checkpoint = _require(options, "checkpoint", "--checkpoint")
    config, params, _ = _load_model(checkpoint)
    out = _prepare_out(options, "eval", config)
    data_dir = _require(options, "data", "--data")
    train_samples, test_samples, _ = read_dataset(data_dir)
    split = options.get("split", "test")
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    samples = test_samples if split == "test" else train_samples
    if not samples:
        raise ConfigurationError(f"the {split} split is empty")

    seed = int(options.get("sample_seed", 0))
    budget = options.get("sample_timesteps")
    budget = None if budget is None else int(budget)

    tasks: list[tuple[str, MetricReport]] = []
    result = evaluate(samples, params, config, seed=seed, num_timesteps=budget)
    tasks.append((Path(checkpoint).stem, result.report))
    ttest = None
    if options.get("checkpoint2"):
        config_b, params_b, _ = _load_model(options["checkpoint2"])
        result_b = evaluate(
            samples, params_b, config_b, seed=seed, num_timesteps=budget
        )
        name_b = Path(options["checkpoint2"]).stem
        if name_b == tasks[0][0]:
            name_b += "_b"
        tasks.append((name_b, result_b.report))
        ttest = paired_t_test(result.report.psnr_values, result_b.report.psnr_values)
    tasks.append(("copy-source", copy_source_report(samples)))

    lines = [report.format_row(task) for task, report in tasks]
    if ttest is not None:
        lines.append(f"paired t-test (PSNR)  t {ttest[0]:.6g}  p {ttest[1]:.6g}")
    table = "\n".join(lines)
    print(table)
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")

    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
        for task, report in tasks:
            writer.writerow(
                [
                    task,
                    f"{report.psnr_mean:.4f}",
                    f"{report.psnr_std:.4f}",
                    f"{report.ssim_mean:.4f}",
                    f"{report.ssim_std:.4f}",
                ]
            )
        if ttest is not None:
            writer.writerow(["ttest_psnr", f"{ttest[0]:.6g}", f"{ttest[1]:.6g}", "", ""])
    with open(out / "per_image.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "image", "psnr", "ssim"])
        for task, report in tasks:
            for i, (p_val, s_val) in enumerate(
                zip(report.psnr_values, report.ssim_values)
            ):
                writer.writerow([task, i, f"{p_val:.17g}", f"{s_val:.17g}"])


def cmd_decompose(args) -> None:
    keys = {"out", "input"}
    config, options = _resolve(args, keys)
    out = _prepare_out(options, "decompose", config)
    image = load_image_pgm(_require(options, "input", "--input"))
    if config.num_levels == 1:
        pyramid = Pyramid(levels=(image,), alpha=config.alpha)
    else:
        pyramid = decompose(image, config.alpha, config.num_levels)
    for n, level in enumerate(pyramid.levels):
        save_image_pgm(out / f"level{n}.pgm", level)
    doc = {
        "alpha": config.alpha,
        "levels": [
            {"level": n, "height": im.shape[0], "width": im.shape[1]}
            for n, im in enumerate(pyramid.levels)
        ],
    }
    (out / "pyramid.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {pyramid.num_levels} levels to {out}")


# ---- entry point ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyradiff",
        description="Pyramid hierarchical masked diffusion for paired "
        "image-to-image translation.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a paired phantom dataset")
    _add_config_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--num-train", dest="num_train", type=int, default=None)
    p.add_argument("--num-test", dest="num_test", type=int, default=None)
    p.add_argument("--difficulty", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_config_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="reconstruct one source image")
    _add_config_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--source", default=None)
    p.add_argument("--target", default=None, help="enables error maps and metrics")
    p.add_argument("--sample-seed", dest="sample_seed", type=int, default=None)
    p.add_argument(
        "--sample-timesteps", dest="sample_timesteps", type=int, default=None
    )
    p.add_argument(
        "--snapshot-every", dest="snapshot_every", type=int, default=None
    )
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _add_config_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--checkpoint2", default=None, help="enables the paired t-test")
    p.add_argument("--split", default=None, choices=("train", "test"))
    p.add_argument("--sample-seed", dest="sample_seed", type=int, default=None)
    p.add_argument(
        "--sample-timesteps", dest="sample_timesteps", type=int, default=None
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decompose", help="dump the pyramid of one image")
    _add_config_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--input", default=None)
    p.set_defaults(func=cmd_decompose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataIOError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
