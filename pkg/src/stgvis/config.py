"""Run configuration: ``key = value`` files with ``#`` comments, plus overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


@dataclass(frozen=True)
class Config:
    # model
    D: int = 64
    L: int = 3
    w: int = 11
    num_classes: int = 3
    crop: int = 3
    head_hidden: int = 32
    backbone_width: int = 16
    # inference
    tau_det: float = 0.3
    tau_assoc: float = 0.5
    delta_t: int = 7
    top_k: int = 20
    # loss weights
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_size: float = 0.1
    lambda_offset: float = 1.0
    # optimisation
    lr: float = 3e-3
    momentum: float = 0.9
    milestones: tuple[int, ...] = ()
    steps: int = 300
    batch_size: int = 4
    clip_norm: float = 10.0
    node_lr_scale: float = 0.01
    seed: int = 0
    # data / files
    preset: str = "easy"
    num_videos: int = 24
    dataset: str = "data"
    checkpoint: str = "model.ckpt"
    predictions: str = "predictions.json"
    report: str = "report.json"
    log: str = "train_log.csv"
    render_dir: str = "render"


_RANGES = {
    "D": (1, None), "L": (1, None), "w": (1, None), "num_classes": (1, None), "crop": (1, None),
    "head_hidden": (1, None), "backbone_width": (1, None),
    "tau_det": (0.0, 1.0), "tau_assoc": (0.0, 1.0), "delta_t": (0, None), "top_k": (1, None),
    "lambda1": (0.0, None), "lambda2": (0.0, None), "lambda3": (0.0, None),
    "lambda_size": (0.0, None), "lambda_offset": (0.0, None),
    "lr": (0.0, None), "momentum": (0.0, 1.0), "steps": (0, None), "batch_size": (1, None), "clip_norm": (0.0, None), "node_lr_scale": (0.0, None),
    "seed": (0, None), "num_videos": (1, None),
}
# spellings accepted in files/flags besides the field names
_ALIASES = {"dt": "delta_t", "d": "D", "l": "L"}
_FIELDS = {f.name: f for f in fields(Config)}


class ConfigError(ValueError):
    pass


def _convert(key: str, raw: str):
    default = getattr(Config(), key)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(int(p) for p in parts)
    return raw


def _canonical(key: str) -> str | None:
    key = key.strip().replace("-", "_")
    if key in _FIELDS:
        return key
    return _ALIASES.get(key.lower())


def _check_range(key: str, value, where: str) -> None:
    lo, hi = _RANGES.get(key, (None, None))
    if lo is not None and value < lo or hi is not None and value > hi:
        bounds = f"[{lo}, {'inf' if hi is None else hi}]"
        raise ConfigError(f"{where}: {key} = {value} is outside {bounds}")


def _assign(values: dict, key: str, raw: str, where: str) -> None:
    name = _canonical(key)
    if name is None:
        raise ConfigError(f"{where}: unknown key {key.strip()!r}")
    try:
        value = _convert(name, raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw.strip()!r} for {name}") from None
    _check_range(name, value, where)
    values[name] = value


def parse_config_text(text: str, source: str = "<config>", overrides: dict | None = None) -> Config:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        key, raw = body.split("=", 1)
        _assign(values, key, raw, f"{source}:{lineno}")
    for key, raw in (overrides or {}).items():
        _assign(values, key, str(raw), f"--{key}")
    cfg = replace(Config(), **values)
    if cfg.w % 2 == 0:
        raise ConfigError(f"{source}: window w must be odd, got {cfg.w}")
    return cfg


def parse_config(path=None, overrides: dict | None = None) -> Config:
    """Read ``path`` (may be None for defaults) and apply ``--key value`` overrides."""
    if path is None:
        return parse_config_text("", "<defaults>", overrides)
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path), overrides)


def overrides_from_args(args: list[str]) -> dict:
    """['--L', '4', '--lr', '0.1'] -> {'L': '4', 'lr': '0.1'}."""
    out, i = {}, 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"flag {tok} needs a value")
            key, val = tok[2:], args[i + 1]
            i += 2
        out[key] = val
    return out
