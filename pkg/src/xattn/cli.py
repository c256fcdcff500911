"""Command-line entry point: ``xattn <command> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import edits
from . import guidance as gd
from . import media
from . import metrics as mt
from . import targets as tg
from . import toyworld
from .checkpoint import file_digest, load_checkpoint_full, save_checkpoint
from .engine import Tensor, no_grad, save_tensor, load_tensor
from .engine.io import FormatError
from .runconfig import (ConfigError, RunManifest, ScheduleConfig, typed_section, load_train_config,
                        parse_train_config)

log = logging.getLogger("xattn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
# option values that replay turns back into bare flags
BOOLEAN_FLAGS = {"allow_no_mid", "per_step_alpha"}


class UsageError(Exception):
    """Bad input from the user: reported with exit code 2."""


# ---------------------------------------------------------------- helpers
def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_model(path):
    """``(params, denoiser config, noise schedule)`` from a checkpoint file."""
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        params, config, sched = load_checkpoint_full(path)
        schedule = typed_section(ScheduleConfig, sched, "schedule").build() if sched else \
            ScheduleConfig(time_steps=config.time_steps).build()
    except (FormatError, ConfigError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    return params, config, schedule


def _tokens(prompt: str) -> list[int]:
    try:
        return toyworld.tokenize(prompt)
    except toyworld.VocabularyError as exc:
        raise UsageError(str(exc)) from None


def _int_set(text: str) -> frozenset[int]:
    try:
        return frozenset(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _guidance_config(args) -> gd.GuidanceConfig:
    try:
        return gd.GuidanceConfig(
            eta=args.eta,
            selected_resolutions=_int_set(args.resolutions),
            selected_block_groups=frozenset(g.strip() for g in args.blocks.split(",") if g.strip()),
            energy_form=args.energy_form,
            allow_no_mid=args.allow_no_mid,
            cumulative_alpha=not args.per_step_alpha,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _manifest(command: str, args, out: Path, checkpoint: str = "", seeds=()) -> RunManifest:
    skip = {"command", "out", "func", "verbose"}
    values = {k: str(v) for k, v in vars(args).items() if k not in skip and v is not None}
    m = RunManifest(command=command, args=values, seeds=list(seeds), out_dir=str(out))
    if checkpoint:
        m.checkpoint = str(checkpoint)
        m.checkpoint_digest = file_digest(checkpoint)
    return m


def _finish(manifest: RunManifest, out: Path) -> RunManifest:
    manifest.record_outputs(out)
    manifest.write(out)
    return manifest


# ---------------------------------------------------------------- commands
def cmd_train(args) -> RunManifest:
    try:
        cfg = load_train_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    config_text = cfg.to_text()
    (out / "config.ini").write_text(config_text)
    mc = cfg.denoiser
    log.info("generating %d clips (seed %d)", cfg.data.clips, cfg.data.seed)
    clips = toyworld.gen_dataset(cfg.data.clips, cfg.data.seed, mc.frames, mc.height, mc.width)
    latents = np.stack([toyworld.to_latent(c.frames, mc.height, mc.width) for c in clips])
    ids = [c.token_ids for c in clips]
    schedule = cfg.schedule.build()
    params = dn.init_params(mc, cfg.train.seed)
    log.info("training %d parameters for %d steps", dn.param_count(params), cfg.train.steps)

    partial = out / "partial.xatn"
    sched = cfg.sections()["schedule"]

    def progress(step, loss, current):
        if cfg.train.log_every and step % cfg.train.log_every == 0:
            log.info("step %d loss %.2f", step, loss)
        if args.save_every and step % args.save_every == 0:
            save_checkpoint(partial, current, mc, sched)

    try:
        params, loss_log = df.train(params, latents, ids, cfg.optimizer, cfg.train.steps,
                                    cfg.train.seed, schedule, mc, progress)
    except df.TrainingDiverged as exc:
        save_checkpoint(out / "last_good.xatn", exc.params, mc, sched)
        raise
    if partial.exists():
        partial.unlink()
    save_checkpoint(out / "checkpoint.xatn", params, mc, sched)
    (out / "loss_log.csv").write_text("step,loss\n" + "".join(f"{s},{v!r}\n" for s, v in loss_log))
    m = _manifest("train", args, out, seeds=[cfg.data.seed, cfg.train.seed])
    m.config = cfg.sections()
    return _finish(m, out)


def cmd_sample(args) -> RunManifest:
    params, mc, schedule = _load_model(args.checkpoint)
    ids = _tokens(args.prompt)
    out = _out_dir(args.out)
    z = df.sample(params, ids, schedule, mc, n_steps=args.steps, seed=args.seed)
    media.export_media(toyworld.from_latent(z, mc.height, mc.width), out / "frames")
    save_tensor(out / "latent.xatn", z)
    m = _manifest("sample", args, out, args.checkpoint, [args.seed])
    m.config = {"denoiser": _section(mc.to_dict())}
    return _finish(m, out)


def _section(d: dict) -> dict[str, str]:
    return {k: " ".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v) for k, v in d.items()}


def _dump_attention(attention: dict, directory: Path) -> None:
    """One XATN file per layer holding ``steps x f x H x W`` token maps."""
    directory.mkdir(parents=True, exist_ok=True)
    steps = sorted(attention)
    if not steps:
        return
    for key in attention[steps[0]]:
        stack = np.stack([np.asarray(attention[s][key]) for s in steps])
        save_tensor(directory / f"L{key.index:02d}_{key.group}{key.resolution}.xatn", stack)


def _load_attention(directory: Path) -> dict:
    files = sorted(Path(directory).glob("L*_*.xatn"))
    if not files:
        raise UsageError(f"no attention dump files in {directory}")
    by_layer = {}
    for p in files:
        idx, rest = p.stem[1:].split("_", 1)
        group = rest.rstrip("0123456789")
        key = dn.LayerKey(int(idx), group, int(rest[len(group):]))
        by_layer[key] = load_tensor(p).data
    n = {v.shape[0] for v in by_layer.values()}
    if len(n) != 1:
        raise UsageError("attention dump files disagree on the number of steps")
    return {s: {k: v[s] for k, v in by_layer.items()} for s in range(n.pop())}


def _load_spec(path) -> tg.TrajectorySpec:
    try:
        return tg.load_spec(path)
    except FileNotFoundError:
        raise UsageError(f"spec file {path} not found") from None
    except (tg.TrajectorySpecError, toyworld.VocabularyError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_edit(args) -> RunManifest:
    params, mc, schedule = _load_model(args.checkpoint)
    spec = _load_spec(args.spec)
    config = _guidance_config(args)
    out = _out_dir(args.out)
    try:
        outcome = edits.run_edit(params, mc, spec, config, args.seed, args.steps, schedule, args.fit)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    media.export_media(outcome.guided.video, out / "guided")
    media.export_media(outcome.control.video, out / "unguided")
    (out / "energy_trace.csv").write_text(outcome.guided.trace.to_text())
    (out / "target.spec").write_text(tg.serialize_spec(outcome.spec))
    _dump_attention(outcome.guided.attention, out / "attention_guided")
    _dump_attention(outcome.control.attention, out / "attention_unguided")
    (out / "metrics.txt").write_text(
        "[guided]\n" + outcome.guided_report.to_text()
        + "\n[unguided]\n" + outcome.control_report.to_text()
        + f"\n[comparison]\niou_gain = {outcome.iou_gain:.6f}\n"
    )
    m = _manifest("edit", args, out, args.checkpoint, [args.seed])
    m.config = {"denoiser": _section(mc.to_dict()), "guidance": _section(config.to_dict())}
    return _finish(m, out)


def cmd_swap(args) -> RunManifest:
    params, mc, schedule = _load_model(args.checkpoint)
    src, tgt = _tokens(args.prompt), _tokens(args.target_prompt)
    out = _out_dir(args.out)
    try:
        res = gd.forward_guided_sample(params, src, tgt, args.steps, args.seed, schedule, mc)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    plain = df.sample(params, src, schedule, mc, n_steps=args.steps, seed=args.seed)
    media.export_media(toyworld.from_latent(plain, mc.height, mc.width), out / "source")
    media.export_media(res.target, out / "target")
    media.export_media(res.swapped, out / "swapped")
    strip = np.concatenate([toyworld.from_latent(plain, mc.height, mc.width), res.target, res.swapped],
                           axis=-1)
    media.export_media(strip, out / "side_by_side")
    m = _manifest("swap", args, out, args.checkpoint, [args.seed])
    m.config = {"denoiser": _section(mc.to_dict())}
    return _finish(m, out)


def inspect_maps(params, mc, schedule, ids, seed: int, step: int, n_steps: int, resolution: int,
                 groups: frozenset[str]):
    """Per-token maps averaged over the selected layers at sampler ``step``.

    Returns ``(averaged, records)`` where ``averaged`` is ``tokens x f x R x R``
    and ``records`` maps each selected layer to its ``f x R x R x L`` record.
    """
    grid = df.timestep_grid(schedule, n_steps)
    if not 1 <= step <= len(grid):
        raise UsageError(f"step {step} outside [1, {len(grid)}]")
    keys = [k for k in dn.layer_keys(mc) if k.resolution == resolution and k.group in groups]
    if not keys:
        raise UsageError(f"no layer at resolution {resolution} in groups {sorted(groups)}")
    z = df.initial_latent(mc, seed)
    cond = dn.embed_prompt(params, ids, mc)
    for i, (t, t_prev) in enumerate(grid, start=1):
        with no_grad():
            eps, records = dn.forward(params, Tensor(z), t - 1, cond, mc)
        if i == step:
            recs = {k: records.maps[k].data for k in keys}
            avg = np.mean([recs[k] for k in keys], axis=0)           # f x R x R x L
            return np.moveaxis(avg[..., :len(ids)], -1, 0), recs
        z = df.ddim_update(z, eps.data, t, t_prev, schedule)
    raise AssertionError("unreachable")


def cmd_inspect(args) -> RunManifest:
    params, mc, schedule = _load_model(args.checkpoint)
    ids = _tokens(args.prompt)
    groups = frozenset(g.strip() for g in args.blocks.split(",") if g.strip())
    res = _int_set(args.resolutions)
    if len(res) != 1:
        raise UsageError("inspect averages layers of a single resolution; pass one value to --resolutions")
    out = _out_dir(args.out)
    avg, recs = inspect_maps(params, mc, schedule, ids, args.seed, args.step, args.steps, next(iter(res)), groups)
    words = args.prompt.split()
    for k, word in enumerate(words):
        for f in range(avg.shape[1]):
            media.save_gray(out / f"token{k:02d}_{word}_frame{f:03d}.png", avg[k, f], size=mc.height)
    save_tensor(out / "averaged.xatn", avg)
    for key, rec in recs.items():
        save_tensor(out / f"record_L{key.index:02d}_{key.group}{key.resolution}.xatn", rec)
    m = _manifest("inspect", args, out, args.checkpoint, [args.seed])
    m.config = {"denoiser": _section(mc.to_dict())}
    return _finish(m, out)


def compute_metrics(frames_dir, spec: tg.TrajectorySpec, attention_dir=None) -> mt.MetricsReport:
    try:
        video = media.read_frames(frames_dir)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    if len(video) != spec.frame_count:
        raise UsageError(f"{frames_dir} holds {len(video)} frames but the spec has {spec.frame_count}")
    if not spec.keyframes:
        raise UsageError("spec has no keyframes; use the target.spec written by the edit command")
    track = spec.build_track(video.shape[-1])
    per_frame = None
    if attention_dir is not None:
        maps = _load_attention(attention_dir)
        keys = next(iter(maps.values())).keys()
        for k in keys:
            f = maps[0][k].shape[0]
            if f != spec.frame_count:
                raise UsageError(f"attention dump has {f} frames but the spec has {spec.frame_count}")
        per_frame = mt.attention_iou(maps, edits.target_masks_by_layer(track, keys))
    return mt.build_report(video, track.boxes, None, per_frame)


def cmd_metrics(args) -> RunManifest:
    spec = _load_spec(args.spec)
    report = compute_metrics(args.frames, spec, args.attention)
    text = report.to_text()
    sys.stdout.write(text)
    out = _out_dir(args.out)
    (out / "metrics.txt").write_text(text)
    m = _manifest("metrics", args, out)
    return _finish(m, out)


def cmd_replay(args) -> RunManifest | None:
    try:
        manifest = RunManifest.load(args.manifest)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    argv = replay_argv(manifest, out)
    code = main(argv)
    if code != EXIT_OK:
        return None
    fresh = RunManifest.load(out)
    diffs = sorted(
        name for name in set(manifest.outputs) | set(fresh.outputs)
        if manifest.outputs.get(name) != fresh.outputs.get(name)
    )
    if diffs:
        for name in diffs:
            print(f"digest mismatch: {name}", file=sys.stderr)
        raise RuntimeError(f"replay differs in {len(diffs)} output(s)")
    print(f"replay reproduced {len(fresh.outputs)} output(s) exactly")
    return fresh


def replay_argv(manifest: RunManifest, out: Path) -> list[str]:
    args = dict(manifest.args)
    if manifest.command == "train":
        cfg_path = out / "config.ini"
        cfg_path.write_text(parse_train_config(_config_text(manifest.config)).to_text())
        args["config"] = str(cfg_path)
    argv = [manifest.command]
    for key, value in args.items():
        flag = "--" + key.replace("_", "-")
        if key in BOOLEAN_FLAGS:
            if value == "True":
                argv.append(flag)
        else:
            argv += [flag, value]
    return argv + ["--out", str(out)]


def _config_text(sections: dict[str, dict[str, str]]) -> str:
    return "".join(f"[{name}]\n" + "".join(f"{k} = {v}\n" for k, v in sec.items()) + "\n"
                   for name, sec in sections.items())


# ---------------------------------------------------------------- parser
def _add_guidance(p):
    p.add_argument("--eta", type=float, default=20.0, help="guidance scale (default 20)")
    p.add_argument("--resolutions", default="8,16", help="comma-separated layer resolutions")
    p.add_argument("--blocks", default="down,mid,up", help="comma-separated block groups")
    p.add_argument("--energy-form", default="squared_difference", choices=gd.ENERGY_FORMS)
    p.add_argument("--allow-no-mid", action="store_true",
                   help="permit a block selection without the mid block")
    p.add_argument("--per-step-alpha", action="store_true",
                   help="compute delta_t from the per-step alpha_t instead of the cumulative product")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser from a configuration file")
    p.add_argument("--config", required=True)
    p.add_argument("--save-every", type=int, default=0,
                   help="write partial.xatn every N steps while training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a clip for a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="backward-guided edit plus its unguided control")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    _add_guidance(p)
    p.add_argument("--fit", default="attention", choices=("attention", "pixels"),
                   help="what a resize-only spec is fitted to in the unguided run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("swap", help="forward guidance: swap one token's attention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="source prompt")
    p.add_argument("--target-prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("inspect", help="render per-token attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=int, default=1, help="1-based sampler step")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--resolutions", default="16")
    p.add_argument("--blocks", default="down,mid,up")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("metrics", help="score frames (and attention) against a spec")
    p.add_argument("--frames", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--attention", default=None, help="attention dump directory from edit")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("replay", help="rerun a manifest and compare output digests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"xattn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with exit 3
        log.debug("failure", exc_info=True)
        print(f"xattn {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
