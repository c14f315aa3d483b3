"""``urepa`` command line: train, sample, probe-depth, gradcheck, export-features.

Exit status: 0 success, 1 user or config error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, dump_config, load_config, to_dict
from .flow import GuidanceConfig, sample
from .numerics import SeededRng
from .teacher import FeatureFormatError, save_features
from .trainer import CheckpointError

log = logging.getLogger("urepa")

EXIT_OK, EXIT_USER, EXIT_VERIFY = 0, 1, 2


class UserError(Exception):
    pass


def _configure_threads():
    raw = os.environ.get("UREPA_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise UserError(f"UREPA_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise UserError("UREPA_THREADS must be >= 1")
        torch.set_num_threads(n)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "iters", None) is not None:
        changes["trainer.iters"] = args.iters
    return cfg.replace(**changes) if changes else cfg


def _parse_interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"interval must be LO,HI, got {text!r}") from None
    return lo, hi


def _parse_depths(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"depths must be comma-separated integers, got {text!r}") from None


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    if args.resume:
        trainer = Trainer.resume(args.resume, out)
        remaining = max(cfg.trainer.iters - trainer.state.iteration, 0)
        trainer.run(remaining, append=True)
    else:
        trainer = Trainer(cfg, out)
        print(dump_config(cfg), end="")
        trainer.run()
    last = trainer.history[-1] if trainer.history else {}
    log.info("finished %d iterations in %s (last: %s)", trainer.state.iteration, out,
             {k: last[k] for k in ("velocity_loss", "repa_loss", "manifold_loss") if k in last})
    return EXIT_OK


def _load_model(checkpoint: str, weights: str):
    from .trainer import checkpoint_load

    state, cfg = checkpoint_load(checkpoint)
    model = state.model
    if weights == "ema":
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(state.ema[name])
    model.eval()
    return model, cfg, state


def _to_uint8(x: np.ndarray, lo: float = -2.0, hi: float = 2.0) -> np.ndarray:
    return np.clip(np.round((x - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)


def cmd_sample(args) -> int:
    model, cfg, _ = _load_model(args.checkpoint, args.weights)
    g = cfg.guidance
    guidance = GuidanceConfig(
        cfg_scale=g.cfg_scale if args.cfg_scale is None else args.cfg_scale,
        interval=g.interval if args.interval is None else args.interval,
        steps=g.steps if args.steps is None else args.steps,
        method=g.method if args.method is None else args.method,
    )
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = cfg.model
    labels = torch.arange(args.num) % m.num_classes
    dtype = next(model.parameters()).dtype
    x = sample(model.velocity, (args.num, m.in_channels, m.input_size, m.input_size), labels,
               guidance, SeededRng(seed).spawn("sample"), dtype=dtype)
    arr = x.to(torch.float32).numpy()
    np.save(out / "samples.npy", arr)
    np.save(out / "samples_u8.npy", _to_uint8(arr))
    np.save(out / "labels.npy", labels.numpy())
    _write_png(out / "samples.png", _to_uint8(arr))
    meta = {"checkpoint": str(args.checkpoint), "weights": args.weights, "seed": seed,
            "num": args.num, "guidance": to_dict(guidance)}
    (out / "sample_config.json").write_text(json.dumps(meta, indent=2) + "\n")
    (out / "config.yaml").write_text(dump_config(cfg))
    print(json.dumps(meta, indent=2))
    return EXIT_OK


def _write_png(path: Path, u8: np.ndarray):
    from PIL import Image

    # channel 0 of each sample, tiled in one row
    tiles = np.concatenate(list(u8[:, 0]), axis=1)
    Image.fromarray(tiles, mode="L").save(path)


def cmd_probe_depth(args) -> int:
    from .data import ToyDataset
    from .model import depth_to_stage
    from .probe import probe_depths
    from .trainer import build_teacher

    model, cfg, _ = _load_model(args.checkpoint, args.weights)
    depths = args.depths or list(range(1, cfg.model.total_blocks + 1))
    for d in depths:
        try:
            depth_to_stage(cfg.model, d)
        except ValueError as exc:
            raise UserError(str(exc)) from None
    seed = cfg.seed if args.seed is None else args.seed
    m = cfg.model
    dataset = ToyDataset(cfg.data.num_samples, m.num_classes, m.input_size, m.in_channels,
                         seed=cfg.seed, noise=cfg.data.noise)
    teacher = build_teacher(cfg, dataset)
    rows = probe_depths(model, cfg, teacher, dataset, depths, steps=args.probe_steps, seed=seed)
    report = {"checkpoint": str(args.checkpoint), "weights": args.weights, "seed": seed,
              "probe_steps": args.probe_steps, "rows": rows}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe_report.json").write_text(text)
        (out / "config.yaml").write_text(dump_config(cfg))
    print(f"{'depth':>5} {'stage':>8} {'feat dim':>8} {'mean sim':>9}")
    for r in rows:
        print(f"{r['depth']:>5} {r['stage']:>8} {r['height']:>8} {r['mean_sim']:>9.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_report, run_checks

    results = run_checks(seeds=args.seeds)
    report = format_report(results)
    print(report)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_export_features(args) -> int:
    from .data import ToyDataset
    from .teacher import encode

    cfg = _resolve(args)
    m = cfg.model
    dataset = ToyDataset(cfg.data.num_samples, m.num_classes, m.input_size, m.in_channels,
                         seed=cfg.seed, noise=cfg.data.noise)
    feats = encode(dataset.images, cfg.teacher.stub)
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_features(path, feats)
    print(f"wrote {len(feats)} x {feats.num_tokens} x {feats.dim} features to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urepa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on the toy task")
    t.add_argument("--config", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", type=Path)
    t.add_argument("--iters", type=int)
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--interval", type=_parse_interval)
    s.add_argument("--steps", type=int)
    s.add_argument("--method", choices=("euler", "heun"))
    s.add_argument("--num", type=int, default=16)
    s.add_argument("--seed", type=int)
    s.add_argument("--weights", choices=("ema", "live"), default="ema")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("probe-depth", help="fit per-depth projectors on a frozen checkpoint")
    d.add_argument("--checkpoint", required=True, type=Path)
    d.add_argument("--depths", type=_parse_depths)
    d.add_argument("--out", type=Path)
    d.add_argument("--seed", type=int)
    d.add_argument("--probe-steps", type=int, default=50)
    d.add_argument("--weights", choices=("ema", "live"), default="live")
    d.set_defaults(func=cmd_probe_depth)

    g = sub.add_parser("gradcheck", help="run all finite-difference gradient checks")
    g.add_argument("--seeds", type=int)
    g.add_argument("--out", type=Path)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("export-features", help="write stub-teacher features as a URFT file")
    e.add_argument("--config", type=Path)
    e.add_argument("--seed", type=int)
    e.add_argument("--output", "--out", dest="output", required=True, type=Path)
    e.set_defaults(func=cmd_export_features)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads()
        return args.func(args)
    except (UserError, ConfigError, FeatureFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except FloatingPointError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
