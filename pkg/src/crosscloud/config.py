"""Experiment configuration files (INI style: ``[section]`` then ``key = value``).

Example::

    [experiment]
    scenario = 2
    seed = 0
    steps = 2000

    [link]
    preset = wan60

    [codec]
    forward = FP16(SVD(0.6))
    backward = INT8
    start_step = 0
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from . import __version__
from .codec import CodecSchedule, parse_method
from .netsim import PRESETS, LinkSpec
from .orchestrator import Scenario1Setup, Scenario2Setup


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: int = 2
    seed: int = 0
    steps: int = 2000
    # model and data
    vocab: int = 16
    dim: int = 32
    hidden: int = 64
    layers: int = 1
    length: int = 8
    batch: int = 32
    # optimisation
    lr: float = 3e-3
    warmup: int = 100
    smoothing: float = 0.0
    mask_fraction: float = 0.15
    lam: float = 50.0
    gamma: float = 1.0
    # link
    link: str = "wan60"
    bandwidth_bits_per_s: Optional[float] = None
    latency_s: Optional[float] = None
    jitter: float = 0.0
    codec_cost: dict = field(default_factory=dict)
    # codec schedule
    forward: str = "IDENTITY"
    backward: str = "IDENTITY"
    start_step: int = 0
    # simulated compute times, seconds
    t_g: float = 2e-3
    t_d: float = 16e-3
    t_enc: float = 1.25e-4
    t_dec: float = 1.25e-4
    n: Optional[int] = None
    # hot start: intra-cluster steps before resuming over the WAN
    hot_start_steps: int = 0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValueError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.link not in PRESETS:
            raise ValueError(f"unknown link preset {self.link!r}; choose from {sorted(PRESETS)}")
        if self.steps < 0 or self.start_step < 0:
            raise ValueError("steps and start_step must be >= 0")
        parse_method(self.forward)
        parse_method(self.backward)

    def link_spec(self) -> LinkSpec:
        spec = PRESETS[self.link]
        changes = {"jitter_fraction": self.jitter, "codec_cost_s_per_element": dict(self.codec_cost)}
        if self.bandwidth_bits_per_s is not None:
            changes["bandwidth_bits_per_s"] = self.bandwidth_bits_per_s
        if self.latency_s is not None:
            changes["one_way_latency_s"] = self.latency_s
        return spec.with_(**changes)

    def schedule(self) -> CodecSchedule:
        return CodecSchedule(parse_method(self.forward), parse_method(self.backward), self.start_step)

    def scenario1(self) -> Scenario1Setup:
        return Scenario1Setup(
            self.vocab, self.dim, self.hidden, self.layers, self.length, self.batch, self.mask_fraction,
            self.lam, self.gamma, self.lr, self.warmup, None, self.seed,
        )

    def scenario2(self, decay: Optional[int] = None) -> Scenario2Setup:
        return Scenario2Setup(
            self.vocab, self.dim, self.hidden, self.layers, self.length, self.batch, self.lr, self.warmup,
            decay if decay is not None else self.steps, self.smoothing, self.seed,
        )

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


# section -> keys, used both to read files and to write them back
_SECTIONS = {
    "experiment": ["scenario", "seed", "steps", "hot_start_steps"],
    "model": ["vocab", "dim", "hidden", "layers", "length", "batch"],
    "train": ["lr", "warmup", "smoothing", "mask_fraction", "lam", "gamma"],
    "link": ["preset", "bandwidth_bits_per_s", "latency_s", "jitter"],
    "codec": ["forward", "backward", "start_step"],
    "timing": ["t_g", "t_d", "t_enc", "t_dec", "n"],
}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(name: str, text: str):
    kind = _TYPES[name]
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text.strip()


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    values = {}
    for section in cp.sections():
        if section == "codec_cost":
            values["codec_cost"] = {k.upper(): float(v) for k, v in cp[section].items()}
            continue
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            name = "link" if key == "preset" else key
            values[name] = _convert(name, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, "link" if key == "preset" else key)
            if value is not None:
                lines.append(f"{key} = {value}")
        lines.append("")
    if cfg.codec_cost:
        lines.append("[codec_cost]")
        lines += [f"{k} = {v}" for k, v in sorted(cfg.codec_cost.items())]
        lines.append("")
    return "\n".join(lines)


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed, "version": __version__}
