"""Validated run configurations, one model per subcommand.

A config is a single JSON document.  Unknown keys are rejected and every
numeric field is checked against the preconditions of the module it
feeds, so a bad config fails before any computation or file output.
"""

from __future__ import annotations

import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

U64 = Field(ge=0, le=2 ** 64 - 1)

# Fields that describe where/how a run executes rather than what it computes;
# they are left out of the config echo so outputs do not depend on them.
RUNTIME_FIELDS = frozenset({"out", "workers"})


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = U64
    out: str = "out"
    mode: Literal["theory", "practical"] = "practical"
    workers: int = Field(1, ge=1)

    def echo(self) -> dict:
        return self.model_dump(mode="json", exclude=set(RUNTIME_FIELDS))


def _even(m):
    if m % 2:
        raise ValueError(f"width must be even for symmetric initialization, got {m}")
    return m


class TrainConfig(RunConfig):
    n: int = Field(4, ge=1)
    d: int = Field(2, ge=1)
    m: int = Field(64, ge=2)
    steps: int = Field(200, ge=0)
    inputs: Literal["ball", "circle"] = "ball"
    sigma: Optional[float] = Field(None, gt=0)
    eta_scale: float = Field(1.0, gt=0)
    delta: float = Field(0.1, gt=0, lt=1)
    eps: float = Field(0.01, gt=0)
    C: float = Field(10.0, gt=0)
    c_m: float = Field(1.0, gt=0)
    c_T: float = Field(1.0, gt=0)
    preset: Literal["main", "diffusion"] = "main"

    _m_even = field_validator("m")(_even)

    @model_validator(mode="after")
    def _circle_needs_2d(self):
        if self.inputs == "circle" and self.d != 2:
            raise ValueError("inputs='circle' requires d = 2")
        return self


class KernelConfig(RunConfig):
    n: int = Field(4, ge=1)
    d: int = Field(2, ge=1)
    m: int = Field(64, ge=2)
    sigma: float = Field(1.0, gt=0)
    inputs: Literal["ball", "circle"] = "ball"
    weights: Literal["init", "zero"] = "init"

    _m_even = field_validator("m")(_even)

    @model_validator(mode="after")
    def _circle_needs_2d(self):
        if self.inputs == "circle" and self.d != 2:
            raise ValueError("inputs='circle' requires d = 2")
        return self


class PerturbConfig(RunConfig):
    n: int = Field(4, ge=1)
    d: int = Field(2, ge=1)
    m: int = Field(64, ge=1)
    sigma: Optional[float] = Field(None, gt=0)
    R: float = Field(1e-3, gt=0, lt=0.01)
    trials: int = Field(100, ge=0)
    B: Optional[float] = Field(None, ge=1)
    delta: float = Field(0.01, gt=0, lt=1)
    C: float = Field(10.0, gt=0)


class AuditConfig(RunConfig):
    n: int = Field(4, ge=1)
    d: int = Field(2, ge=1)
    m: int = Field(64, ge=1)
    sigma: Optional[float] = Field(None, gt=0)
    R: float = Field(0.0, ge=0, lt=0.01)
    trials: int = Field(1000, ge=0)
    B: Optional[float] = Field(None, ge=1)
    delta: float = Field(0.01, gt=0, lt=1)
    C: float = Field(10.0, gt=0)


class CoupleConfig(RunConfig):
    n: int = Field(4, ge=1)
    d: int = Field(2, ge=1)
    m_list: tuple[int, ...] = (64, 256, 1024, 4096)
    steps: int = Field(500, ge=0)
    test_points: int = Field(8, ge=1)
    inputs: Literal["ball", "circle"] = "circle"
    sigma: float = Field(1.0, gt=0)
    eta_scale: float = Field(1.0, gt=0, lt=2)

    @field_validator("m_list")
    @classmethod
    def _widths(cls, v):
        if not v:
            raise ValueError("m_list must be non-empty")
        for m in v:
            if m < 2:
                raise ValueError("widths must be >= 2")
            _even(m)
        return v

    @model_validator(mode="after")
    def _circle_needs_2d(self):
        if self.inputs == "circle" and self.d != 2:
            raise ValueError("inputs='circle' requires d = 2")
        return self


class DiffusionConfig(RunConfig):
    d: int = Field(2, ge=1)
    n: int = Field(64, ge=1)
    m: int = Field(512, ge=2)
    steps: int = Field(500, ge=0)
    sigma: float = Field(1.0, gt=0)
    eta_scale: float = Field(1.0, gt=0)
    T: float = Field(10.0, gt=0)
    T0: Optional[float] = Field(None, gt=0)
    g: float = Field(1.0, gt=0)
    s2: float = Field(1.0, gt=0)
    mc_samples: int = Field(4000, ge=2)
    sample_steps: int = Field(500, ge=1)
    n_samples: int = Field(2000, ge=1)

    _m_even = field_validator("m")(_even)

    @model_validator(mode="after")
    def _cutoff(self):
        if self.T0 is not None and not self.T0 < self.T:
            raise ValueError("need T0 < T")
        return self


CONFIGS = {
    "train": TrainConfig,
    "kernel": KernelConfig,
    "perturb": PerturbConfig,
    "audit": AuditConfig,
    "couple": CoupleConfig,
    "diffusion": DiffusionConfig,
}


def load_config(subcommand, path=None, overrides=None) -> RunConfig:
    """Read the JSON document at ``path`` (if any), apply top-level overrides, validate.

    Raises ``pydantic.ValidationError``, ``OSError`` or ``ValueError``.
    """
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return CONFIGS[subcommand].model_validate(raw)


def dump_config(cfg: RunConfig) -> str:
    return cfg.model_dump_json(indent=2)
