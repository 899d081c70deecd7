"""Command line: gen-data, train, infer, eval, render."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, overrides_from_args, parse_config
from .metrics import evaluate, predictions_from_json, predictions_to_json
from .synth import make_dataset, read_dataset, write_dataset, write_ppm

SUBCOMMANDS = ("gen-data", "train", "infer", "eval", "render")

USAGE = """\
usage: stgvis <subcommand> [--config FILE] [--key value ...]

subcommands:
  gen-data   write a synthetic dataset to <dataset>
  train      train on <dataset>, write <checkpoint> and the CSV log <log>
  infer      run <checkpoint> over <dataset>, write <predictions>
  eval       score <predictions> against <dataset>, write <report>
  render     draw predicted tracks over the frames into <render_dir>

any configuration key can be overridden, e.g. --L 2 --dataset data/test
"""


class CliError(Exception):
    pass


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_dataset(cfg: Config):
    path = _require(cfg.dataset, "dataset")
    try:
        return read_dataset(path)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None


def _load_model(cfg: Config):
    from .pipeline import Model
    model = Model.init(cfg)
    try:
        model.load(_require(cfg.checkpoint, "checkpoint"))
    except ValueError as exc:
        raise CliError(f"{cfg.checkpoint}: {exc}") from None
    return model


def _load_predictions(cfg: Config) -> dict:
    text = _require(cfg.predictions, "predictions").read_text()
    try:
        return predictions_from_json(text)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{cfg.predictions}: {exc}") from None


def _write_text(path, text: str) -> None:
    """Write via a sibling temp file so a failed run never leaves half a file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def cmd_gen_data(cfg: Config) -> None:
    ds = make_dataset(cfg.num_videos, cfg.seed, cfg.preset)
    write_dataset(ds, cfg.dataset)
    print(f"wrote {len(ds)} videos to {cfg.dataset}")


def cmd_train(cfg: Config) -> None:
    from .pipeline import Model, train
    ds = _load_dataset(cfg)
    model = Model.init(cfg)
    history = train(model, ds, log_path=cfg.log)
    model.save(cfg.checkpoint)
    if history:
        print(f"trained {len(history)} steps, L_total {history[0]['L_total']:.4f} -> "
              f"{history[-1]['L_total']:.4f}; checkpoint {cfg.checkpoint}")


def cmd_infer(cfg: Config) -> None:
    from .pipeline import infer_video
    ds = _load_dataset(cfg)
    model = _load_model(cfg)
    preds = {v.name: infer_video(model, v, cfg) for v in ds}
    _write_text(cfg.predictions, predictions_to_json(preds))
    print(f"wrote {sum(len(t) for t in preds.values())} tracks to {cfg.predictions}")


def cmd_eval(cfg: Config) -> None:
    from .pipeline import ground_truth_tubes
    ds = _load_dataset(cfg)
    preds = _load_predictions(cfg)
    report = evaluate(preds, {v.name: ground_truth_tubes(v) for v in ds})
    _write_text(cfg.report, report.to_json())
    print(report.to_text(), end="")


def track_color(track_id: int) -> np.ndarray:
    """Stable RGB colour in [0, 1] derived from the identity."""
    digest = hashlib.sha1(str(int(track_id)).encode()).digest()
    return 0.25 + 0.75 * np.frombuffer(digest[:3], dtype=np.uint8) / 255.0


def render_video(video, tubes, out_dir, alpha: float = 0.5) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f, frame in enumerate(video.frames):
        img = frame.copy()
        for tube in tubes:
            mask = tube.masks.get(f)
            if mask is None:
                continue
            color = track_color(tube.track_id)[:, None]
            img[:, mask] = (1 - alpha) * img[:, mask] + alpha * color
        path = out_dir / f"frame_{f:04d}.ppm"
        write_ppm(path, img)
        written.append(path)
    return written


def cmd_render(cfg: Config) -> None:
    ds = _load_dataset(cfg)
    preds = _load_predictions(cfg)
    count = 0
    for v in ds:
        count += len(render_video(v, preds.get(v.name, []), Path(cfg.render_dir) / v.name))
    print(f"wrote {count} overlay frames to {cfg.render_dir}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "render": cmd_render}


def dispatch(subcommand: str, cfg: Config) -> int:
    if subcommand not in COMMANDS:
        sys.stderr.write(f"unknown subcommand {subcommand!r}\n{USAGE}")
        return 2
    try:
        COMMANDS[subcommand](cfg)
    except CliError as exc:
        sys.stderr.write(f"stgvis {subcommand}: {exc}\n")
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stgvis", usage=USAGE, add_help=False)
    parser.add_argument("subcommand", nargs="?")
    parser.add_argument("--config")
    parser.add_argument("-h", "--help", action="store_true")
    args, rest = parser.parse_known_args(argv)
    if args.help or args.subcommand is None:
        (sys.stdout if args.help else sys.stderr).write(USAGE)
        return 0 if args.help else 2
    if args.subcommand not in COMMANDS:
        sys.stderr.write(f"unknown subcommand {args.subcommand!r}\n{USAGE}")
        return 2
    try:
        cfg = parse_config(args.config, overrides_from_args(rest))
    except (ConfigError, OSError) as exc:
        sys.stderr.write(f"stgvis: {exc}\n")
        return 2
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    return dispatch(args.subcommand, cfg)


if __name__ == "__main__":
    sys.exit(main())
