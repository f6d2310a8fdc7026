"""Run configuration stored as an INI file.

Sections mirror the types: ``[FlowConfig]``, ``[TrainConfig]``,
``[Companding]`` (``enabled``, ``mu``), ``[Paths]`` (``manifest``,
``checkpoint``, ``out_dir``) and ``[Run]`` (``seed``). Relative paths are
resolved against the config file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from pathlib import Path

from .audio import DEFAULT_MU
from .errors import ConfigError
from .flow import FlowConfig
from .training import TrainConfig


@dataclasses.dataclass(frozen=True)
class RunConfig:
    flow: FlowConfig = FlowConfig()
    train: TrainConfig = TrainConfig()
    companding: bool = True
    mu: float = DEFAULT_MU
    manifest: Path | None = None
    checkpoint: Path | None = None
    out_dir: Path | None = None
    seed: int = 0

    def __post_init__(self):
        if self.companding and not self.mu > 0:
            raise ConfigError(f"mu must be positive when companding is enabled, got {self.mu}")

    @property
    def model_mu(self) -> float | None:
        return self.mu if self.companding else None

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def validate_paths(self) -> None:
        for name in ("manifest", "checkpoint"):
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{name} path does not exist: {p}")

    def override(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _coerce(kind: type, raw: str, where: str):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from exc


def _section_to(cls, parser: configparser.ConfigParser, section: str, skip=()):
    if not parser.has_section(section):
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in parser.items(section):
        if key not in fields or key in skip:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = getattr(cls(), key)
        kwargs[key] = _coerce(type(default), raw, f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def load_run_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    known = {"FlowConfig", "TrainConfig", "Companding", "Paths", "Run"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    flow = _section_to(FlowConfig, parser, "FlowConfig")
    train = _section_to(TrainConfig, parser, "TrainConfig", skip=("seed",))
    comp = parser["Companding"] if parser.has_section("Companding") else {}
    paths = parser["Paths"] if parser.has_section("Paths") else {}
    run = parser["Run"] if parser.has_section("Run") else {}

    def _path(key):
        raw = paths.get(key, "").strip() if paths else ""
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else (path.parent / p)

    return RunConfig(
        flow=flow,
        train=train,
        companding=_coerce(bool, comp.get("enabled", "true"), "[Companding] enabled"),
        mu=_coerce(float, comp.get("mu", str(DEFAULT_MU)), "[Companding] mu"),
        manifest=_path("manifest"),
        checkpoint=_path("checkpoint"),
        out_dir=_path("out_dir"),
        seed=_coerce(int, run.get("seed", "0"), "[Run] seed"),
    )


def write_run_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    """Write ``cfg`` with absolute paths so it reloads identically from anywhere."""
    parser = configparser.ConfigParser()
    parser["FlowConfig"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in dataclasses.asdict(cfg.flow).items()}
    parser["TrainConfig"] = {
        k: repr(v) if isinstance(v, float) else str(v)
        for k, v in dataclasses.asdict(cfg.train).items()
        if k != "seed"
    }
    parser["Companding"] = {"enabled": str(cfg.companding).lower(), "mu": repr(cfg.mu)}
    parser["Paths"] = {
        k: str(Path(getattr(cfg, k)).resolve()) if getattr(cfg, k) is not None else ""
        for k in ("manifest", "checkpoint", "out_dir")
    }
    parser["Run"] = {"seed": str(cfg.seed)}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
