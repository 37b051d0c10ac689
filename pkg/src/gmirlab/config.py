"""Experiment configuration: a sectioned TOML file with the reference defaults.

Every key is optional; anything omitted takes the default shown in
``presets/default.toml``.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DEFAULT_SPLIT, DomainPair, DomainSpec, make_domain_pair
from .net import ConfigurationError, ModelConfig
from .strategies import KINDS, StrategyConfig
from .trainer import TrainConfig

SCRATCH_RUNS = ("scratch-clear", "scratch-adverse", "scratch-all")
SWEEP_KEYS = ("d_fraction", "k", "n_resample")
PRESETS = ("default", "fast", "sweep-d", "sweep-k", "sweep-n")
# sensitivity grids: the default recipe with one GMIR knob varied
SWEEP_PRESETS = {
    "sweep-d": ("d_fraction", "[0.2, 0.5, 1.0]"),
    "sweep-k": ("k", "[0.01, 0.05, 0.2]"),
    "sweep-n": ("n_resample", "[2, 5, 10, 20, 40]"),
}


@dataclass(frozen=True)
class DataSection:
    generator: str = "two-moons"
    old_size: int = 3631
    new_size: int = 3365
    split: tuple[float, float, float] = DEFAULT_SPLIT
    seed: int = 0
    sigma: float = 0.15
    rotation_deg: float = 30.0
    sigma_scale: float = 1.5
    offset: tuple[float, float] = (0.0, 0.0)

    def specs(self, run_seed: int) -> tuple[DomainSpec, DomainSpec]:
        """Domain recipes for one experiment seed.

        Old and new domain seeds are derived from ``(data.seed, run_seed)`` so
        different experiment seeds see independent draws.
        """
        s_old, s_new = np.random.SeedSequence([self.seed, run_seed]).generate_state(2)
        old = DomainSpec(self.generator, self.old_size, int(s_old), 0.0, (0.0, 0.0), self.sigma,
                         "old", 0)
        new = DomainSpec(self.generator, self.new_size, int(s_new),
                         float(np.deg2rad(self.rotation_deg)), self.offset,
                         self.sigma * self.sigma_scale, "new", self.old_size)
        return old, new

    def pair(self, run_seed: int) -> DomainPair:
        old, new = self.specs(run_seed)
        return make_domain_pair(old, new, self.split, split_seed=self.seed * 7919 + run_seed)


@dataclass(frozen=True)
class PhaseSection:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 0.01
    eval_every: int = 1


@dataclass(frozen=True)
class SweepSection:
    strategy: str = "gmir"
    param: str = "n_resample"
    values: tuple = (2, 5, 10, 20, 40)
    base: Optional[StrategyConfig] = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"
    runs: tuple[str, ...] = SCRATCH_RUNS
    threads: int = 1
    pretrained_checkpoint: Optional[str] = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PhaseSection = field(default_factory=PhaseSection)
    finetune: PhaseSection = field(default_factory=PhaseSection)
    strategies: tuple[StrategyConfig, ...] = ()
    sweep: Optional[SweepSection] = None
    strategy_defaults: dict = field(default_factory=dict)

    def train_config(self, phase: str, seed: int, strategy: Optional[StrategyConfig] = None
                     ) -> TrainConfig:
        sec = self.pretrain if phase == "pretrain" else self.finetune
        return TrainConfig(self.model, sec.epochs, sec.batch_size, sec.lr, seed, strategy,
                           sec.eval_every, self.threads)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       threads: Optional[int] = None, strategy: Optional[str] = None
                       ) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(int(seed),))
        if out is not None:
            cfg = dataclasses.replace(cfg, out=str(out))
        if threads is not None:
            cfg = dataclasses.replace(cfg, threads=int(threads))
        if strategy is not None:
            cfg = dataclasses.replace(cfg, strategies=(find_strategy(cfg, strategy),))
        return cfg

    def to_dict(self) -> dict:
        def conv(v):
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)
                        if getattr(v, f.name) is not None}
            if isinstance(v, (tuple, list)):
                return [conv(x) for x in v]
            return v
        return conv(self)


def find_strategy(cfg: ExperimentConfig, name: str) -> StrategyConfig:
    for s in cfg.strategies:
        if s.label == name or s.kind == name:
            return s
    if name in KINDS:
        return _strategy({"kind": name}, cfg.strategy_defaults, f"--strategy {name}")
    raise ConfigurationError(f"unknown strategy {name!r}")


def _section(cls, raw: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigurationError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{where}] {exc}") from None


def _strategy(raw: dict, defaults: dict, where: str) -> StrategyConfig:
    merged = {**defaults, **raw}
    if "kind" not in merged:
        raise ConfigurationError(f"{where}: every strategy needs a kind")
    return _section(StrategyConfig, merged, where)


def parse_config(doc: dict[str, Any]) -> ExperimentConfig:
    doc = dict(doc)
    top = doc.pop("experiment", {})
    data = _section(DataSection, doc.pop("data", {}), "data")
    model_raw = doc.pop("model", {})
    model = _section(ModelConfig, model_raw, "model")
    pre = _section(PhaseSection, doc.pop("pretrain", {}), "pretrain")
    fine = _section(PhaseSection, doc.pop("finetune", {}), "finetune")
    defaults = doc.pop("strategy_defaults", {})
    strategies = tuple(_strategy(s, defaults, f"[[strategies]] #{i + 1}")
                       for i, s in enumerate(doc.pop("strategies", [])))
    labels = [s.label for s in strategies]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("strategy labels must be unique; set name = ... to disambiguate")
    sweep = None
    if "sweep" in doc:
        sweep = _parse_sweep(doc.pop("sweep"), defaults)
    if doc:
        raise ConfigurationError(f"unknown sections: {', '.join(sorted(doc))}")
    runs = tuple(top.pop("runs", SCRATCH_RUNS))
    bad = set(runs) - set(SCRATCH_RUNS)
    if bad:
        raise ConfigurationError(f"[experiment] runs: unknown scratch runs {sorted(bad)}")
    exp = _section(ExperimentConfig, top, "experiment")
    return dataclasses.replace(exp, runs=runs, data=data, model=model, pretrain=pre, finetune=fine,
                               strategies=strategies, sweep=sweep,
                               strategy_defaults=dict(defaults))


def _parse_sweep(raw: dict, defaults: dict) -> SweepSection:
    raw = dict(raw)
    strategy = raw.pop("strategy", "gmir")
    if strategy not in KINDS:
        raise ConfigurationError(f"[sweep] unknown strategy {strategy!r}")
    grid = {k: v for k, v in raw.items() if k in SWEEP_KEYS}
    other = set(raw) - set(SWEEP_KEYS)
    if other:
        raise ConfigurationError(f"[sweep] unknown keys: {', '.join(sorted(other))}")
    if len(grid) != 1:
        raise ConfigurationError(
            f"[sweep] must vary exactly one of {', '.join(SWEEP_KEYS)}; got {sorted(grid) or 'none'}")
    (param, values), = grid.items()
    if not isinstance(values, list) or not values:
        raise ConfigurationError(f"[sweep] {param} must be a nonempty list")
    for v in values:
        _strategy({"kind": strategy, param: v}, defaults, f"[sweep] {param}={v}")
    return SweepSection(strategy, param, tuple(values), _strategy({"kind": strategy}, defaults, "[sweep]"))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return parse_config(doc)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if name in SWEEP_PRESETS:
        param, values = SWEEP_PRESETS[name]
        base = preset_text("default").replace('out = "runs/default"', f'out = "runs/{name}"')
        return base + f"\n[sweep]\nstrategy = \"gmir\"\n{param} = {values}\n"
    return resources.files("gmirlab").joinpath("presets", f"{name}.toml").read_text()


def load_preset(name: str) -> ExperimentConfig:
    return parse_config(tomllib.loads(preset_text(name)))


def sweep_strategies(cfg: ExperimentConfig) -> list[StrategyConfig]:
    """One strategy config per grid point, labelled ``kind[param=value]``."""
    if cfg.sweep is None:
        raise ConfigurationError("config has no [sweep] section")
    sw = cfg.sweep
    base = next((s for s in cfg.strategies if s.kind == sw.strategy),
                sw.base or StrategyConfig(sw.strategy))
    return [dataclasses.replace(base, **{sw.param: v}, name=f"{sw.strategy}[{sw.param}={v}]")
            for v in sw.values]
