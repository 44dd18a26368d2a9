"""Run configuration: a TOML file merged with command-line overrides.

Example::

    seed = 0
    models = ["lstm-baseline", "transenc-cultd-sir"]
    experiment = "e2020"

    [paths]
    data = "data/OxCGRT_latest.csv"
    culture = "data/hofstede.csv"
    out = "runs/e2020"

    [train]
    max_epochs = 1000
    patience = 20

    [features]
    lookback = 21

    [model.transenc-cultd-sir]
    positional_encoding = false
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .features import FeatureConfig
from .models import MODEL_KINDS
from .nn.training import TrainConfig


@dataclass(frozen=True)
class Paths:
    data: str | None = None
    culture: str | None = None
    out: str = "out"
    snapshot: str | None = None
    checkpoints: str | None = None

    @property
    def snapshot_path(self) -> str:
        return self.snapshot or os.path.join(self.out, "snapshot.json")

    @property
    def checkpoint_dir(self) -> str:
        return self.checkpoints or os.path.join(self.out, "checkpoints")


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    models: tuple[str, ...] = MODEL_KINDS
    experiment: str | None = None
    experiment_dates: dict | None = None  # custom train/eval ranges
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model_hparams: dict = field(default_factory=dict)
    region: str | None = None
    horizon: int = 30

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = list(self.models)
        return d


def _build(cls, table: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**table)


def load_config(path: str | None = None, **overrides) -> RunConfig:
    """Read ``path`` (if given) and apply non-None keyword overrides.

    Recognized overrides: ``seed``, ``models``, ``experiment``, ``region``,
    ``horizon``, ``out``, ``data``, ``culture``, ``snapshot``, ``max_epochs``.
    """
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as f:
            raw = tomllib.load(f)

    paths = _build(Paths, dict(raw.get("paths", {})), "paths")
    train = _build(TrainConfig, dict(raw.get("train", {})), "train")
    features = _build(FeatureConfig, dict(raw.get("features", {})), "features")
    model_hparams = {k: dict(v) for k, v in raw.get("model", {}).items()}
    bad = set(model_hparams) - set(MODEL_KINDS)
    if bad:
        raise ValueError(f"unknown model sections {sorted(bad)}")

    experiment = raw.get("experiment")
    experiment_dates = None
    if isinstance(experiment, dict):
        experiment_dates = dict(experiment)
        experiment = experiment_dates.pop("name", "custom")

    cfg = RunConfig(
        paths=paths,
        seed=int(raw.get("seed", 0)),
        models=tuple(raw.get("models", MODEL_KINDS)),
        experiment=experiment,
        experiment_dates=experiment_dates,
        train=train,
        features=features,
        model_hparams=model_hparams,
        region=raw.get("region"),
        horizon=int(raw.get("horizon", 30)),
    )

    o = {k: v for k, v in overrides.items() if v is not None}
    path_over = {k: o.pop(k) for k in ("out", "data", "culture", "snapshot") if k in o}
    if path_over:
        cfg = replace(cfg, paths=replace(cfg.paths, **path_over))
    if "max_epochs" in o:
        cfg = replace(cfg, train=replace(cfg.train, max_epochs=int(o.pop("max_epochs"))))
    if "models" in o:
        o["models"] = tuple(o["models"])
    cfg = replace(cfg, **o)
    # one seed drives both initialization and training order
    cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    unknown = [m for m in cfg.models if m not in MODEL_KINDS]
    if unknown:
        raise ValueError(f"unknown model kinds {unknown}; choose from {', '.join(MODEL_KINDS)}")
    return cfg
