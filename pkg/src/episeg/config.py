"""Run configuration: one JSON document keys every tunable in the engine."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .adapt import TtaConfig
from .attention_prior import PgrConfig
from .calibration import PacConfig
from .routing import HlsConfig
from .selectors import StaticMaxConfig
from .self_support import SspConfig
from .synthetic import SyntheticSpec

SELECTORS = ("hls", "static_max", "grad_max", "grad_delta_max")


@dataclass
class RunConfig:
    seed: int = 0
    shot: int = 5
    out_dir: str = "runs/out"
    manifests: list[str] | None = None
    synthetic: SyntheticSpec | None = None
    selector: str = "hls"
    compare_selectors: bool = False
    ssp: SspConfig = field(default_factory=SspConfig)
    hls: HlsConfig = field(default_factory=HlsConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)
    pgr: PgrConfig = field(default_factory=PgrConfig)
    pac: PacConfig = field(default_factory=PacConfig)
    static_max: StaticMaxConfig = field(default_factory=StaticMaxConfig)

    def validate(self) -> None:
        if self.shot < 1:
            raise ValueError("shot must be >= 1")
        if self.selector not in SELECTORS:
            raise ValueError(f"unknown selector {self.selector!r}; options: {SELECTORS}")
        if self.manifests is None and self.synthetic is None:
            raise ValueError("config needs either 'manifests' or 'synthetic'")
        self.ssp.validate()
        self.hls.validate()
        self.tta.validate()
        self.pac.validate()


_NESTED = {
    "ssp": SspConfig,
    "hls": HlsConfig,
    "tta": TtaConfig,
    "pgr": PgrConfig,
    "pac": PacConfig,
    "static_max": StaticMaxConfig,
    "synthetic": SyntheticSpec,
}


def _build(cls, obj: dict):
    # unknown keys fail loudly instead of being silently dropped
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown config keys {sorted(unknown)}")
    kwargs = dict(obj)
    if cls is SyntheticSpec and "attn_sigmas" in kwargs:
        kwargs["attn_sigmas"] = tuple(kwargs["attn_sigmas"])
    return cls(**kwargs)


def run_config_from_dict(obj: dict) -> RunConfig:
    kwargs = {}
    for key, value in obj.items():
        if key in _NESTED:
            kwargs[key] = None if value is None else _build(_NESTED[key], value)
        else:
            kwargs[key] = value
    cfg = _build_top(kwargs)
    cfg.validate()
    return cfg


def _build_top(kwargs: dict) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(kwargs) - names
    if unknown:
        raise ValueError(f"RunConfig: unknown config keys {sorted(unknown)}")
    return RunConfig(**kwargs)


def run_config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    if out.get("synthetic") and isinstance(out["synthetic"].get("attn_sigmas"), tuple):
        out["synthetic"]["attn_sigmas"] = list(out["synthetic"]["attn_sigmas"])
    return out


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return run_config_from_dict(json.load(fh))
