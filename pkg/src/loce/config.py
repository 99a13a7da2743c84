"""Experiment configuration files (TOML).

Layout::

    [world]            # WorldSpec fields
    [train]            # TrainConfig fields
    [output]
    dir = "runs/demo"
    [[ablation]]       # optional, one table per grid entry
    name = "ce"
    ebl_enabled = false
    mfs_enabled = false
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .trainer import VARIANTS, TrainConfig, config_digest, variant_config, variant_name
from .world import WorldSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


GRID_PRESETS = {
    "components": ("ce", "ebl", "mfs", "loce"),
    "all": tuple(VARIANTS),
}


@dataclass
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("runs/default")
    ablation: list[tuple[str, TrainConfig]] = field(default_factory=list)

    @property
    def digest(self) -> str:
        return config_digest(self.world, self.train)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(
            replace(self.world, seed=seed),
            replace(self.train, seed=seed),
            self.output_dir,
            [(name, replace(cfg, seed=seed)) for name, cfg in self.ablation],
        )

    def runs(self) -> list[tuple[str, TrainConfig]]:
        """Grid entries, or the single configured run when no grid is given."""
        if self.ablation:
            return list(self.ablation)
        return [(variant_name(self.train), self.train)]


def parse_ablate(spec: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """``--ablate`` value: a preset name or a comma list of variant names."""
    names = GRID_PRESETS.get(spec)
    if names is None:
        names = tuple(n.strip() for n in spec.split(",") if n.strip())
    unknown = [n for n in names if n not in VARIANTS]
    if unknown or not names:
        raise ConfigError(
            f"unknown ablation variant(s) {unknown or spec!r}; choose from {sorted(VARIANTS)} or {sorted(GRID_PRESETS)}"
        )
    return [(n, variant_config(base, n)) for n in names]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    extra = set(raw) - {"world", "train", "output", "ablation"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    try:
        world = WorldSpec.from_dict(raw.get("world", {}))
        train = TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(raw.get("output", {}).get("dir", "runs/default"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    grid = []
    for i, entry in enumerate(raw.get("ablation", [])):
        entry = dict(entry)
        name = entry.pop("name", None)
        if name in VARIANTS and not entry:
            grid.append((name, variant_config(train, name)))
            continue
        try:
            cfg = replace(train, **entry)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"ablation entry {i}: {exc}") from exc
        grid.append((name or variant_name(cfg), cfg))
    names = [n for n, _ in grid]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate ablation names: {names}")
    return ExperimentConfig(world, train, out, grid)


def config_to_toml(cfg: ExperimentConfig) -> str:
    """Serialize back to TOML (used for provenance snapshots next to artifacts)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = ["[world]"]
    lines += [f"{k} = {fmt(v)}" for k, v in cfg.world.to_dict().items()]
    lines += ["", "[train]"]
    lines += [f"{k} = {fmt(v)}" for k, v in cfg.train.to_dict().items() if v is not None]
    lines += ["", "[output]", f'dir = "{cfg.output_dir.as_posix()}"']
    for name, run in cfg.ablation:
        lines += ["", "[[ablation]]", f'name = "{name}"']
        base = cfg.train.to_dict()
        lines += [f"{k} = {fmt(v)}" for k, v in run.to_dict().items() if base[k] != v and v is not None]
    return "\n".join(lines) + "\n"
