"""Experiment configuration: TOML sections mirroring the library dataclasses.

A config file may hold any of the sections below; every key is optional and
unknown keys are rejected so typos never pass silently::

    [purification]   # PurificationConfig
    k = 20
    gamma = 0.0

    [dataset]        # evaluation set: generator parameters, or files = "dir/*.xyz"
    clouds_per_class = 25

    [attack]
    epsilon = 0.05

    [oracle]
    model = "toy.npz"

    [toy]            # train-toy settings; [toy.dataset] is the training set
    epochs = 100

    [baselines]
    sor_sigma = 1.1

    [experiment]
    repeats = 1
"""
from __future__ import annotations

import dataclasses
import glob
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ConfigError, DataError, PWavePError
from ..pcgeom import load_cloud
from ..saliency import PurificationConfig
from .data import CLASSES, Dataset, generate_synthetic_dataset


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple = CLASSES
    points_per_cloud: int = 256
    clouds_per_class: int = 25
    noise: float = 0.0
    seed: int = 2
    deform: float = 0.2
    rotate: bool = True
    torus_minor: float = 0.1
    files: Optional[str] = None

    def load(self) -> Dataset:
        if self.files:
            return load_file_dataset(self.files)
        return generate_synthetic_dataset(
            self.classes, self.points_per_cloud, self.clouds_per_class, self.noise,
            self.seed, self.deform, self.rotate, self.torus_minor,
        )


@dataclass(frozen=True)
class AttackSettings:
    epsilon: float = 0.05
    steps: int = 20
    step_size: Optional[float] = None
    added_fraction: float = 0.1
    cd_weight: float = 1.0
    band_index: int = 10
    band_count: int = 10
    energy: float = 2.0
    seed: int = 0


@dataclass(frozen=True)
class OracleSettings:
    model: Optional[str] = None
    mode: str = "analytic"
    zo_directions: int = 64
    zo_smoothing: float = 1e-3
    timeout: float = 30.0


@dataclass(frozen=True)
class ToySettings:
    epochs: int = 100
    widths: tuple = (64, 32)
    activation: str = "relu"
    lr: float = 2e-3
    batch_size: int = 32
    jitter: float = 0.0
    seed: int = 0
    dataset: DatasetSpec = DatasetSpec(clouds_per_class=100, seed=1)


@dataclass(frozen=True)
class BaselineSettings:
    sor_k: int = 20
    sor_sigma: float = 1.1
    ror_radius: float = 0.15
    ror_min_neighbors: int = 4
    lowpass_cutoff: float = 0.67


@dataclass(frozen=True)
class ExperimentSettings:
    repeats: int = 1
    seed: int = 0
    band_clouds: int = 50
    band_points: int = 256
    emd_solver: str = "hungarian-exact"


@dataclass(frozen=True)
class ExperimentSpec:
    purification: PurificationConfig = PurificationConfig()
    dataset: DatasetSpec = DatasetSpec()
    attack: AttackSettings = AttackSettings()
    oracle: OracleSettings = OracleSettings()
    toy: ToySettings = ToySettings()
    baselines: BaselineSettings = BaselineSettings()
    experiment: ExperimentSettings = ExperimentSettings()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, table: dict) -> "ExperimentSpec":
        return _build(cls(), table, "")

    def replace(self, **sections) -> "ExperimentSpec":
        return dataclasses.replace(self, **sections)


def _build(default, table: dict, where: str):
    """Copy of ``default`` with the keys of ``table`` replaced, recursing into nested sections."""
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in dataclasses.fields(default)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where or 'top level'}]")
    kwargs = {}
    for name, value in table.items():
        current = getattr(default, name)
        sub = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(default, **kwargs)
    except PWavePError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in [{where}]: {exc}") from exc


def load_config(path) -> ExperimentSpec:
    try:
        with open(path, "rb") as fh:
            table = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentSpec.from_dict(table)


def load_file_dataset(pattern: str) -> Dataset:
    """Clouds matching a glob; labels come from a sibling labels.csv (file,label) when present."""
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise DataError(f"no files match {pattern!r}")
    labels = {}
    names = ()
    label_file = Path(paths[0]).parent / "labels.csv"
    if label_file.exists():
        lines = label_file.read_text().splitlines()
        for line in lines[1:]:
            if line.strip():
                name, lab = line.split(",")[:2]
                labels[name] = int(lab)
        classes_file = label_file.with_name("classes.txt")
        if classes_file.exists():
            names = tuple(classes_file.read_text().split())
    clouds = []
    for p in paths:
        cloud = load_cloud(p)
        lab = labels.get(Path(p).name)
        clouds.append(cloud if lab is None else dataclasses.replace(cloud, label=lab))
    return Dataset(tuple(clouds), names)


__all__ = [
    "AttackSettings", "BaselineSettings", "DatasetSpec", "ExperimentSettings", "ExperimentSpec",
    "OracleSettings", "ToySettings", "load_config", "load_file_dataset",
]
