"""Plain-text configuration: one ``key = value`` pair per line, ``#`` starts
a comment.  Keys cover the prior constants (C1..C13), the sampler settings
(iterations, burn_in, thinning, seed, step.<param>, mips.every, gauge.every,
workers) and report thresholds (fpr, bic.threshold)."""

from __future__ import annotations

import os
from pathlib import Path

from .model import PriorConstants
from .sampler import SamplerConfig

ENV_CONFIG_PATH = "CYCLEFIT_CONFIG"


def read_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def default_config_path() -> str | None:
    return os.environ.get(ENV_CONFIG_PATH)


def priors_from_config(cfg: dict[str, str]) -> PriorConstants:
    return PriorConstants.from_dict(cfg)


def sampler_from_config(cfg: dict[str, str], **overrides) -> SamplerConfig:
    return SamplerConfig.from_dict(cfg, **overrides)
