"""Flat text configuration: one "key = value" per line, '#' comments.

Every tunable of the data, training, and inference stages lives here with
its default. Unknown keys are rejected so typos fail loudly, and a snapshot
of the effective configuration can reproduce any run.
"""

from __future__ import annotations

import dataclasses


class ConfigError(ValueError):
    """Unknown key, malformed line, or unparseable value."""


@dataclasses.dataclass
class Config:
    seed: int = 0

    # dataset
    resolution: int = 32
    n_scenes: int = 16
    views_per_scene: int = 24
    gt_samples: int = 128

    # model
    feature_channels: int = 16
    volume_dim: int = 16
    upsample_factor: int = 1
    upsample_mode: str = "learned"
    decoder_hidden: int = 64
    render_samples: int = 32

    # stage-1 training
    recon_lr: float = 3e-3
    recon_steps: int = 1500
    target_strategy: str = "uniform"
    val_interval: int = 100
    patience: int = 5
    loss_lambda: float = 0.1

    # stage-2 training
    embed_dim: int = 16
    denoiser_base: int = 32
    t_dim: int = 32
    diffusion_steps: int = 1000
    diff_lr: float = 1e-4
    diff_steps: int = 800
    p_uncond: float = 0.1

    # inference
    ddim_steps: int = 200
    guidance: float = 2.0
    n_iters: int = 4

    def __post_init__(self):
        if self.upsample_mode not in ("learned", "bicubic"):
            raise ConfigError(f"upsample_mode must be learned|bicubic, "
                              f"got {self.upsample_mode!r}")
        if self.target_strategy not in ("uniform", "anchored"):
            raise ConfigError(f"target_strategy must be uniform|anchored, "
                              f"got {self.target_strategy!r}")

    @property
    def triplane_resolution(self) -> int:
        return self.volume_dim * (2 ** self.upsample_factor)


_FIELDS = {f.name: f.type for f in dataclasses.fields(Config)}


def _parse_value(key: str, text: str):
    kind = _FIELDS[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"config key {key}: cannot parse {text!r} as {kind}") from e


def parse_config(text: str, base: Config | None = None) -> Config:
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        values[key] = _parse_value(key, value)
    return Config(**values)


def load_config(path, base: Config | None = None) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def format_config(cfg: Config) -> str:
    """Snapshot text: sorted keys, round-trips through parse_config."""
    vals = dataclasses.asdict(cfg)
    return "".join(f"{k} = {vals[k]}\n" for k in sorted(vals))


def save_config(path, cfg: Config) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
