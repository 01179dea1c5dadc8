"""Command-line entry point: ``appode <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import read_config
from .data import SYNTH_KINDS, list_frames, load_exemplar, read_image, render_maps_sequence, save_exemplar, synth_exemplar, write_png
from .field import FieldConfig
from .latent import RGB, SVBRDF
from .losses import FeatureBank
from .metrics import LIGHTS, evaluate_video, relight_eval
from .ops import make_rng
from .synthesis import Model, generate, relight_maps, sample_maps, transfer
from .train import TrainConfig, Trainer, load_checkpoint

log = logging.getLogger("appode")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _light(text: str) -> tuple[float, float, float]:
    try:
        x, y, z = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"light position must be x,y,z, got {text!r}") from None
    return x, y, z


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="key = value file with [train] / [field] sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (or file for metrics)")
    common.add_argument("--threads", type=int, default=None, help="cap on numerical library threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="appode", description="Dynamic texture synthesis with appearance ODEs.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    t = sub.add_parser("train", parents=[common], help="train a field on an exemplar")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--exemplar", help="directory of ordered frames")
    src.add_argument("--synth", choices=sorted(SYNTH_KINDS), help="train on a procedural exemplar")
    t.add_argument("--mode", choices=[RGB, SVBRDF], default=None)
    t.add_argument("--size", type=int, default=None)
    t.add_argument("--frames", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--desk", action="store_true", help="small network preset for CPU runs")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0)

    g = sub.add_parser("generate", parents=[common], help="synthesize frames from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--size", type=int, default=None)
    g.add_argument("--frames", type=int, default=100)
    g.add_argument("--light", type=_light, default=(0.0, 0.0, 1.0))

    r = sub.add_parser("relight", parents=[common], help="render generated svBRDF maps under several lights")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--size", type=int, default=None)
    r.add_argument("--frames", type=int, default=100)
    r.add_argument("--light", type=_light, action="append", help="extra x,y,z light; defaults to the four standard ones")

    x = sub.add_parser("transfer", parents=[common], help="apply learned dynamics to a new image")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--frames", type=int, default=100)

    m = sub.add_parser("metrics", parents=[common], help="realism and non-straightness of generated frames")
    m.add_argument("--generated", help="directory of generated frames")
    m.add_argument("--target", help="directory of target frames")
    m.add_argument("--checkpoint", help="svBRDF checkpoint for relighting evaluation")
    m.add_argument("--references", help="directory with one sub-directory of frames per lighting name")
    m.add_argument("--size", type=int, default=None)
    m.add_argument("--bank", help="tensor archive with feature-bank weights")

    s = sub.add_parser("synth", parents=[common], help="write a procedural exemplar")
    s.add_argument("kind", choices=sorted(SYNTH_KINDS))
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--size", type=int, default=None)

    i = sub.add_parser("inspect-checkpoint", parents=[common], help="print a checkpoint's metadata")
    i.add_argument("path")
    return p


# commands ----------------------------------------------------------------------------------


def _configs(args) -> tuple[TrainConfig, FieldConfig | None]:
    sections = read_config(args.config) if args.config else {}
    train_kw = dict(sections.get("train", {}))
    mode = getattr(args, "mode", None) or train_kw.get("mode") or (SVBRDF if getattr(args, "synth", None) == "rusting-ramp" else RGB)
    train_kw["mode"] = mode
    if getattr(args, "iterations", None) is not None:
        train_kw["iterations"] = args.iterations
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if getattr(args, "desk", False):
        train_kw.setdefault("lr", 2e-3)
    cfg = TrainConfig.rgb(**train_kw) if mode == RGB else TrainConfig.svbrdf(**train_kw)
    fcfg = FieldConfig.from_dict(sections["field"]) if "field" in sections else None
    return cfg, fcfg


def cmd_train(args) -> int:
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    cfg, fcfg = _configs(args)
    if args.synth:
        kw = {k: v for k, v in (("size", args.size), ("n_frames", args.frames)) if v is not None}
        ex = synth_exemplar(args.synth, rng=make_rng(cfg.seed), **kw)
    else:
        ex = load_exemplar(args.exemplar, cfg.mode, args.size, args.frames, cfg.t_start, cfg.t_end)
    if fcfg is None:
        fcfg = cfg.field_config(desk=args.desk)
    report = out / "report.jsonl"
    if args.resume:
        tr = Trainer.load(args.resume, ex, report_path=report)
        if args.iterations is not None:
            tr.cfg = dataclasses.replace(tr.cfg, iterations=args.iterations)
    else:
        report.unlink(missing_ok=True)
        tr = Trainer(cfg, ex, fcfg, report_path=report)

    def checkpoint(trainer, rec):
        every = args.checkpoint_every
        if every and trainer.iteration % every == 0:
            trainer.save(out / f"ckpt_{trainer.iteration:06d}")

    tr.run(callback=checkpoint)
    tr.save(out / "final")
    summary = tr.report()
    summary.pop("losses")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def _model(args) -> Model:
    return Model.load(args.checkpoint)


def _default_size(model: Model) -> int:
    return 32 if model.mode == SVBRDF else 24


def cmd_generate(args) -> int:
    model = _model(args)
    seed = 0 if args.seed is None else args.seed
    frames, _ = generate(model, seed, args.size or _default_size(model), args.frames, Path(args.out or "generated"), args.light)
    print(f"wrote {len(frames)} frames to {args.out or 'generated'}")
    return 0


def cmd_relight(args) -> int:
    model = _model(args)
    if model.mode != SVBRDF:
        raise ValueError("relight needs an svBRDF checkpoint")
    seed = 0 if args.seed is None else args.seed
    lights = dict(LIGHTS)
    for j, pos in enumerate(args.light or []):
        lights[f"custom-{j}"] = pos
    maps = sample_maps(model, seed, args.size or _default_size(model), model.frame_times(args.frames))
    out = Path(args.out or "relit")
    for name, pos in lights.items():
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for k, f in enumerate(relight_maps(model, maps, pos)):
            write_png(d / f"frame_{k:04d}.png", f)
    print(f"wrote {len(lights)} lightings to {out}")
    return 0


def cmd_transfer(args) -> int:
    model = _model(args)
    seed = 0 if args.seed is None else args.seed
    frames = transfer(model, read_image(args.image), seed, args.frames)
    out = Path(args.out or "transfer")
    out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        write_png(out / f"frame_{k:04d}.png", f)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _read_dir(path) -> np.ndarray:
    paths = list_frames(path)
    if not paths:
        raise ValueError(f"{path}: no frames")
    return np.stack([read_image(p) for p in paths])


def cmd_metrics(args) -> int:
    bank = FeatureBank.load(args.bank) if args.bank else FeatureBank.random(0)
    lines: list[str] = []
    if args.checkpoint:
        model = _model(args)
        refs = {}
        n = None
        if args.references:
            for name in LIGHTS:
                d = Path(args.references) / name
                refs[name] = _read_dir(d) if d.is_dir() else None
                if refs[name] is not None:
                    n = len(refs[name])
        if n is None:
            raise ValueError("relighting evaluation needs --references with at least one lighting directory")
        seed = 0 if args.seed is None else args.seed
        size = args.size or next(r for r in refs.values() if r is not None).shape[-1]
        for rep in relight_eval(model, model.frame_times(n), [seed], refs, bank, size=size):
            lines += rep.to_lines()
    else:
        if not (args.generated and args.target):
            raise UsageError("metrics needs --generated and --target (or --checkpoint with --references)")
        gen, tgt = _read_dir(args.generated), _read_dir(args.target)
        lines += evaluate_video(gen, tgt, bank).to_lines()
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    kw = {"n_frames": args.frames}
    if args.size is not None:
        kw["size"] = args.size
    seed = 0 if args.seed is None else args.seed
    ex = synth_exemplar(args.kind, rng=make_rng(seed), **kw)
    out = Path(args.out or args.kind)
    save_exemplar(ex, out)
    if ex.maps is not None:
        from .archive import save_archive

        save_archive(out / "maps.nap", {f"maps/{i:04d}": m for i, m in enumerate(ex.maps)}, {"kind": "svbrdf-maps"})
        inten = ex.manifest["intensity"]
        for name, pos in LIGHTS.items():
            d = out / "relit" / name
            d.mkdir(parents=True, exist_ok=True)
            for k, f in enumerate(render_maps_sequence(ex.maps, pos, inten)):
                write_png(d / f"frame_{k:04d}.png", f)
    print(f"wrote {len(ex)} frames to {out}")
    return 0


def cmd_inspect(args) -> int:
    tensors, meta = load_checkpoint(args.path)
    info = {
        "iteration": meta.get("iteration"),
        "format_version": meta.get("format_version"),
        "field_config": meta.get("field_config"),
        "train_config": meta.get("train_config"),
        "lr": meta.get("opt", {}).get("lr"),
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "parameters": int(sum(v.size for k, v in tensors.items() if k.startswith("param/"))),
    }
    print(json.dumps(info, indent=2))
    return 0


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "relight": cmd_relight,
    "transfer": cmd_transfer,
    "metrics": cmd_metrics,
    "synth": cmd_synth,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(args.threads)
    else:
        limits = nullcontext()
    with limits:
        try:
            return COMMANDS[args.command](args)
        except UsageError as exc:
            sys.stderr.write(f"appode: error: {exc}\n")
            return 1
        except Exception as exc:
            sys.stderr.write(f"appode: {type(exc).__name__}: {exc}\n")
            return 2


if __name__ == "__main__":
    sys.exit(main())
