"""Line-oriented `key = value` run configuration.

`#` starts a comment, unknown keys are rejected, CLI flags override the file,
and every run echoes its effective (fully defaulted) config so it can be
reproduced byte-for-byte.
"""

from __future__ import annotations

from pathlib import Path

from .model import ModelConfig
from .train import FinetuneConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.split(",") if t.strip())


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",") if t.strip())


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "dataset": (str, ""),
    "out_dir": (str, "runs/default"),
    "num_folds": (int, 4),
    # training
    "learning_rate": (float, 0.0025),
    "momentum": (float, 0.9),
    "epochs": (int, 30),
    "episodes_per_epoch": (int, 200),
    "lambda_sub": (float, 0.1),
    "k": (int, 1),
    "seed": (int, 0),
    "crop_size": (int, 40),
    "augment_crop": (_parse_bool, True),
    "augment_scale": (_parse_bool, True),
    "augment_flip": (_parse_bool, True),
    "train_refine_iterations": (int, 4),
    # architecture
    "channels": (int, 32),
    "enc_channels": (_parse_ints, (16, 32, 32)),
    "multi_level": (_parse_bool, True),
    "cross_reference": (_parse_bool, True),
    "gate_activation": (str, "sigmoid"),
    "global_condition": (_parse_bool, True),
    "local_condition": (_parse_bool, True),
    "masking_mode": (str, "multiplicative"),
    "refine_iterations": (int, 10),
    # evaluation
    "episodes_per_fold": (int, 200),
    "eval_seed": (int, 1234),
    "mode": (str, "single"),
    "scales": (_parse_floats, (1.0,)),
    "annotation": (str, "mask"),
    "finetune_steps": (int, 100),
    "finetune_lr": (float, 0.00025),
}


def parse_config_file(path: Path | str) -> dict[str, str]:
    """Raw key -> string values from a config file."""
    raw: dict[str, str] = {}
    text = Path(path).read_text()
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        raw[key] = value
    return raw


def build_config(file_values: dict[str, str] | None = None,
                 overrides: dict[str, str] | None = None) -> dict:
    """Typed effective config: defaults, then file values, then overrides."""
    cfg = {key: default for key, (_, default) in SCHEMA.items()}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            parser, _ = SCHEMA[key]
            if isinstance(value, str):
                try:
                    cfg[key] = parser(value)
                except (ValueError, ConfigError) as e:
                    raise ConfigError(f"bad value for {key!r}: {value!r} ({e})")
            else:
                cfg[key] = value
    return cfg


def load_config(path: Path | str | None,
                overrides: dict[str, str] | None = None) -> dict:
    file_values = parse_config_file(path) if path else None
    return build_config(file_values, overrides)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def echo_config(cfg: dict, path: Path | str) -> None:
    """Write the effective config; re-running from this file reproduces the run."""
    lines = [f"{key} = {_format_value(cfg[key])}" for key in SCHEMA]
    Path(path).write_text("\n".join(lines) + "\n")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        channels=cfg["channels"],
        enc_channels=tuple(cfg["enc_channels"]),
        multi_level=cfg["multi_level"],
        cross_reference=cfg["cross_reference"],
        gate_activation=cfg["gate_activation"],
        global_condition=cfg["global_condition"],
        local_condition=cfg["local_condition"],
        masking_mode=cfg["masking_mode"],
        refine_iterations=cfg["refine_iterations"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        epochs=cfg["epochs"],
        episodes_per_epoch=cfg["episodes_per_epoch"],
        lambda_sub=cfg["lambda_sub"],
        k=cfg["k"],
        seed=cfg["seed"],
        crop_size=cfg["crop_size"],
        augment_crop=cfg["augment_crop"],
        augment_scale=cfg["augment_scale"],
        augment_flip=cfg["augment_flip"],
        train_refine_iterations=cfg["train_refine_iterations"],
        model=model_config(cfg),
    )


def finetune_config(cfg: dict) -> FinetuneConfig:
    return FinetuneConfig(
        steps=cfg["finetune_steps"],
        learning_rate=cfg["finetune_lr"],
        lambda_sub=cfg["lambda_sub"],
        train_refine_iterations=cfg["train_refine_iterations"],
        seed=cfg["seed"],
    )
