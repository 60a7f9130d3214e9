"""Command-line front end: invert, edit, metrics, demo.

One JSON config file plus ``--set key=value`` overrides drives every
subcommand; precedence is CLI > file > defaults.  Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure.  Any failure also
prints one machine-parsable line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import demo as demo_mod
from . import io as iomod
from . import metrics as metrics_mod
from . import report as report_mod
from .dms import InstanceEdit, SamplingPlan, run_edit
from .errors import ConfigError, DataError, InsteditError
from .ipr import IprConfig
from .predictor import Caption, TinyAttentionPredictor, ToyGaussianPredictor
from .schedule import LatentSequence, NoiseSchedule, invert_sequence


@dataclass(frozen=True)
class CommandOutcome:
    exit_code: int
    report_path: Path | None = None


def _config_epilog() -> str:
    defaults = iomod.RunConfig().to_dict()
    lines = ["configuration keys and defaults:"]
    for key in sorted(defaults):
        lines.append(f"  {key} = {defaults[key]!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--threads", type=int, help="worker cap for branch parallelism")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="instedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = _config_epilog()
    for name, help_text in (
        ("invert", "encode input frames into their stored noise trajectory"),
        ("edit", "run the full multi-instance editing pipeline"),
        ("metrics", "score an edited clip against its manifest"),
        ("demo", "self-contained two-instance toy run with property checks"),
    ):
        sub.add_parser(
            name,
            parents=[common],
            help=help_text,
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
    return parser


def _load_config(args, extra_defaults: dict | None = None) -> iomod.RunConfig:
    cfg = iomod.RunConfig()
    if extra_defaults:
        cfg.apply(extra_defaults)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        cfg.apply(doc)
    overrides = {}
    for item in args.set:
        key, value = iomod.parse_set_option(item)
        overrides[key] = value
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg.apply(overrides)
    return cfg


def _schedule(cfg: iomod.RunConfig) -> NoiseSchedule:
    if cfg.alpha_bar_table:
        return NoiseSchedule.from_table(cfg.alpha_bar_table)
    return NoiseSchedule.linear_beta(cfg.t_model)


def _plan(cfg: iomod.RunConfig) -> SamplingPlan:
    return SamplingPlan(
        total_steps=cfg.total_steps,
        sns_fraction=cfg.sns_fraction,
        reinversion_steps=cfg.reinversion_steps,
        cfg_scale=cfg.cfg_scale,
        inversion_steps=cfg.inversion_steps,
        ipr=IprConfig(
            lambda_=cfg.lambda_,
            lambda_r=cfg.lambda_r,
            warmup_fraction=cfg.warmup_fraction,
            ipr_fraction=cfg.ipr_fraction,
        ),
        seed=cfg.seed,
    )


def _predictor(cfg: iomod.RunConfig, sched: NoiseSchedule, channels: int):
    if cfg.predictor == "gaussian":
        if not cfg.predictor_registry:
            raise ConfigError("gaussian predictor needs 'predictor_registry' pointing at a registry JSON")
        return ToyGaussianPredictor.from_json(cfg.predictor_registry, sched)
    if cfg.predictor == "tiny_attention":
        return TinyAttentionPredictor(channels=channels, seed=cfg.predictor_seed, t_model=sched.t_model)
    raise ConfigError(f"unknown predictor {cfg.predictor!r} (expected 'gaussian' or 'tiny_attention')")


def _load_inputs(cfg: iomod.RunConfig):
    if not cfg.manifest:
        raise ConfigError("this command needs a 'manifest' config key or --set manifest=PATH")
    manifest = iomod.load_manifest(cfg.manifest)
    frames = iomod.load_frames(manifest.frame_paths)
    z0 = LatentSequence(frames, 0)
    edits = []
    for inst in manifest.instances:
        masks = iomod.load_masks(inst.mask_paths, expect_shape=frames.shape[1:3])
        edits.append(InstanceEdit(masks, Caption.from_text(inst.caption), inst.instance_id))
    control = None
    if manifest.control_paths:
        control = np.stack([iomod.load_image(p).astype(np.float64) / 255.0 for p in manifest.control_paths])
    return manifest, z0, edits, control


def cmd_invert(cfg: iomod.RunConfig) -> CommandOutcome:
    sched = _schedule(cfg)
    _, z0, _, _ = _load_inputs(cfg)
    predictor = _predictor(cfg, sched, z0.frame_shape[2])
    trajectory = invert_sequence(z0, predictor, sched, cfg.inversion_steps)
    out = Path(cfg.out_dir) / "trajectory"
    out.mkdir(parents=True, exist_ok=True)
    index = {"timesteps": [], "files": []}
    for z in trajectory:
        name = f"t{z.timestep:05d}.f32"
        iomod.save_latents(out / name, z)
        index["timesteps"].append(z.timestep)
        index["files"].append(name)
    index_path = out / "index.json"
    index_path.write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    print(f"report: {index_path}")
    return CommandOutcome(0, index_path)


def _write_edited(out_dir: Path, final: LatentSequence) -> None:
    edited = out_dir / "edited"
    edited.mkdir(parents=True, exist_ok=True)
    frames = iomod.latents_to_frames(final)
    for k in range(frames.shape[0]):
        img = frames[k]
        img = img[:, :, 0] if img.shape[2] == 1 else img
        suffix = "pgm" if img.ndim == 2 else "ppm"
        iomod.save_image(edited / f"frame_{k:03d}.{suffix}", img)
    latents_dir = out_dir / "latents"
    latents_dir.mkdir(exist_ok=True)
    iomod.save_latents(latents_dir / "final.f32", final)


def cmd_edit(cfg: iomod.RunConfig) -> CommandOutcome:
    sched = _schedule(cfg)
    _, z0, edits, control = _load_inputs(cfg)
    predictor = _predictor(cfg, sched, z0.frame_shape[2])
    plan = _plan(cfg)
    final, report = run_edit(z0, edits, plan, predictor, sched, control=control, threads=cfg.threads)
    out_dir = Path(cfg.out_dir)
    _write_edited(out_dir, final)
    report_path = report_mod.write_run_report(out_dir, report, cfg.to_dict())
    print(f"report: {report_path}")
    return CommandOutcome(0, report_path)


def _frames_from_dir(path: Path) -> np.ndarray:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".png"))
    if not files:
        raise DataError(f"no frames found under {path}")
    return iomod.load_frames(files)


def cmd_metrics(cfg: iomod.RunConfig) -> CommandOutcome:
    if not cfg.manifest:
        raise ConfigError("metrics needs a 'manifest' config key")
    manifest = iomod.load_manifest(cfg.manifest)
    source_frames = iomod.load_frames(manifest.frame_paths)
    edited_dir = Path(cfg.edited_dir) if cfg.edited_dir else Path(cfg.out_dir) / "edited"
    edited_frames = _frames_from_dir(edited_dir)
    if edited_frames.shape != source_frames.shape:
        raise DataError(
            f"edited frames {edited_frames.shape} do not match manifest frames {source_frames.shape}"
        )
    provider = (
        metrics_mod.FileEmbeddingProvider.from_files(cfg.embeddings)
        if cfg.embeddings
        else metrics_mod.ToyEmbeddingProvider()
    )
    instances = [
        metrics_mod.InstanceEval(
            instance_id=inst.instance_id,
            caption=inst.caption,
            masks=iomod.load_masks(inst.mask_paths, expect_shape=source_frames.shape[1:3]),
            source_caption=inst.source_caption,
        )
        for inst in manifest.instances
    ]
    scores = metrics_mod.evaluate_edit(
        edited_frames,
        instances,
        provider,
        source_frames=source_frames,
        global_source_caption=manifest.global_source_caption,
        global_target_caption=manifest.global_target_caption,
    )
    report_path = report_mod.write_metrics_report(cfg.out_dir, scores)
    print(f"report: {report_path}")
    return CommandOutcome(0, report_path)


def cmd_demo(cfg: iomod.RunConfig) -> CommandOutcome:
    sched = _schedule(cfg)
    plan = _plan(cfg)
    out_dir = Path(cfg.out_dir)
    report = demo_mod.run_demo(
        out_dir / "scenario", plan, sched, sigma=cfg.sigma, overlap=cfg.demo_overlap, threads=cfg.threads
    )
    final = report.pop("edited_latents")
    report.pop("edited_frames")
    _write_edited(out_dir, final)
    report_path = report_mod.write_run_report(out_dir, report, cfg.to_dict())
    print(f"report: {report_path}")
    return CommandOutcome(0, report_path)


COMMANDS = {
    "invert": cmd_invert,
    "edit": cmd_edit,
    "metrics": cmd_metrics,
    "demo": cmd_demo,
}

_DEMO_DEFAULTS = {"cfg_scale": 1.0}  # the toy closed form is checked unguided

_ERROR_KINDS = {2: "config", 3: "data", 4: "numerics"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        extra = _DEMO_DEFAULTS if args.command == "demo" else None
        cfg = _load_config(args, extra)
        outcome = COMMANDS[args.command](cfg)
        return outcome.exit_code
    except InsteditError as err:
        kind = _ERROR_KINDS.get(err.exit_code, "error")
        print(f"instedit: error[{kind}]: {err}", file=sys.stderr)
        return err.exit_code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
