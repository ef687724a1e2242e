"""Run configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

CONFIG_ENV_VAR = "UWRESTORE_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    stage_depths: List[int] = field(default_factory=lambda: [3, 5, 6, 6])
    stage_widths: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    prior_dim: int = 256
    num_prompts: int = 5
    num_experts: int = 3
    top_k: int = 2
    diffusion_steps: int = 4
    alpha_1: float = 0.99
    alpha_T: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.5
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    batch: int = 8
    crop: int = 128
    iters_stage1: int = 50000
    iters_stage2: int = 200000
    seed: int = 0
    # not fixed by the method description; see README
    d_state: int = 16
    ssm_expand: int = 2
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eps_weight: float = 1.0
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (len(self.stage_depths) == len(self.stage_widths) == 4):
            raise ConfigError("stage_depths and stage_widths must both have 4 entries")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage depths and widths must be positive")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} must satisfy 1 <= k <= num_experts={self.num_experts}")
        if self.diffusion_steps < 1:
            raise ConfigError("diffusion_steps must be >= 1")
        if not 0.0 < self.alpha_T < self.alpha_1 < 1.0:
            raise ConfigError("need 0 < alpha_T < alpha_1 < 1")
        if min(self.prior_dim, self.num_prompts, self.d_state, self.ssm_expand) < 1:
            raise ConfigError("prior_dim, num_prompts, d_state and ssm_expand must be positive")
        if self.batch < 1 or self.crop < 8:
            raise ConfigError("batch must be >= 1 and crop >= 8")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> RunConfig:
    """CPU-sized profile used by tests and smoke runs."""
    base = dict(
        stage_depths=[1, 1, 1, 1],
        stage_widths=[8, 16, 32, 64],
        prior_dim=64,
        batch=2,
        crop=64,
        ssm_expand=1,
        iters_stage1=2000,
        iters_stage2=500,
        lr_init=2e-3,
        lr_final=1e-5,
        checkpoint_every=500,
    )
    base.update(overrides)
    return RunConfig(**base)


PROFILES = {"full": RunConfig, "tiny": tiny_config}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, list):
            return [int(v) for v in raw.strip("[]").replace(",", " ").split()]
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc
    return raw


def parse_config_text(text: str) -> RunConfig:
    """Parse a flat UTF-8 ``key=value`` file.

    Blank lines and ``#`` comments are ignored. The optional ``profile`` key
    (``full`` or ``tiny``) selects the defaults the other keys override.
    Unknown keys raise ``ConfigError``.
    """
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value

    profile = entries.pop("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = PROFILES[profile]()
    defaults = base.to_dict()
    unknown = set(entries) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    changes = {k: _coerce(k, v, defaults[k]) for k, v in entries.items()}
    return base.replace(**changes)


def load_config(path: Optional[os.PathLike] = None) -> RunConfig:
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return RunConfig()
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
