"""Pipeline configuration: defaults, (de)serialization, JSON/TOML loading."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .extraction import DEFAULT_K
from .losses import HeatmapParams, LossWeights
from .synthetic import ShapeSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_test: int = 50
    shape: ShapeSpec = field(default_factory=ShapeSpec)


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = "data"
    output: str = "runs"
    seed: int = 0
    k: int = DEFAULT_K
    unit: str = "px"
    asd_mode: str = "landmarks"
    fps_fraction: float = 0.25
    weights: LossWeights = field(default_factory=LossWeights)
    heatmap: HeatmapParams = field(default_factory=HeatmapParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k: must be >= 1")
        if self.unit not in ("px", "mm"):
            raise ConfigError("unit: must be 'px' or 'mm'")
        if self.asd_mode not in ("landmarks", "contour"):
            raise ConfigError("asd_mode: must be 'landmarks' or 'contour'")
        if not 0 < self.fps_fraction <= 1:
            raise ConfigError("fps_fraction: must lie in (0, 1]")

    def train_config(self, **overrides) -> TrainConfig:
        """Training config carrying this pipeline's seed, loss weights and heatmap params."""
        return replace(self.train, seed=self.seed, weights=self.weights, heatmap=self.heatmap, **overrides)

    def to_dict(self) -> dict:
        t = asdict(self.train)
        for k in ("weights", "heatmap", "seed"):
            t.pop(k)
        return {
            "dataset": self.dataset,
            "output": self.output,
            "seed": self.seed,
            "k": self.k,
            "unit": self.unit,
            "asd_mode": self.asd_mode,
            "fps_fraction": self.fps_fraction,
            "weights": asdict(self.weights),
            "heatmap": asdict(self.heatmap),
            "train": t,
            "data": {"n_train": self.data.n_train, "n_test": self.data.n_test,
                     "shape": self.data.shape.to_dict()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        _check_keys("", d, {f.name for f in fields(cls)})
        try:
            kw = {k: d[k] for k in ("dataset", "output", "seed", "k", "unit", "asd_mode", "fps_fraction") if k in d}
            if "weights" in d:
                _check_keys("weights", d["weights"], {f.name for f in fields(LossWeights)})
                kw["weights"] = LossWeights(**d["weights"])
            if "heatmap" in d:
                _check_keys("heatmap", d["heatmap"], {f.name for f in fields(HeatmapParams)})
                kw["heatmap"] = HeatmapParams(**d["heatmap"])
            if "train" in d:
                t = dict(d["train"])
                _check_keys("train", t, {f.name for f in fields(TrainConfig)} - {"weights", "heatmap", "seed"})
                if "augmentation" in t:
                    a = dict(t["augmentation"])
                    _check_keys("train.augmentation", a, {f.name for f in fields(AugmentConfig)})
                    if "scale_range" in a:
                        a["scale_range"] = tuple(a["scale_range"])
                    t["augmentation"] = AugmentConfig(**a)
                if "channels" in t:
                    t["channels"] = tuple(t["channels"])
                kw["train"] = TrainConfig(**t)
            if "data" in d:
                dd = dict(d["data"])
                _check_keys("data", dd, {"n_train", "n_test", "shape"})
                if "shape" in dd:
                    dd["shape"] = ShapeSpec.from_dict(dd["shape"])
                kw["data"] = DataConfig(**dd)
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _check_keys(where: str, d: dict, allowed: set):
    extra = set(d) - allowed
    if extra:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"{prefix}{sorted(extra)[0]}: unknown config key")


def load_config(path) -> PipelineConfig:
    """Read a JSON (``.json``) or TOML (anything else) pipeline config."""
    import tomli

    path = Path(path)
    try:
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else tomli.loads(text)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return PipelineConfig.from_dict(data)
