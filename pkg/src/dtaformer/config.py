"""Flat dotted-key ``key = value`` configuration files.

Every recognised key and its default lives in ``DEFAULTS``; unknown keys are
rejected. Stage keys follow ``model.stage<i>.<field>`` for i = 1..model.stages.
"""
import os
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError
from .training import TrainConfig
from .wnet import ModelConfig, StageConfig

MAX_STAGES = 4

DEFAULTS = {
    "seed": 0,
    "data.root": "data",
    "data.train_split": "train",
    "data.eval_split": "eval",
    "data.points_per_block": 4096,
    "data.channels": "x,y,z,mir,nir,green",
    "data.class_names": "road,building,grass,tree,soil,powerline",
    "data.normalize": True,
    "model.stages": 2,
    "model.arch": "wnet",
    "model.lts": "learned",
    "model.dta": "wca",
    "model.gfe": True,
    "model.gfe.point": True,
    "model.gfe.channel": True,
    "model.itr": "wca_map",
    "model.knn_k": 16,
    "train.epochs": 200,
    "train.batch_size": 8,
    "train.lr": 0.1,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.checkpoint_every": 10,
    "eval.batch_size": 8,
}
for _i, _w in zip(range(1, MAX_STAGES + 1), (64, 128, 256, 512)):
    DEFAULTS[f"model.stage{_i}.width"] = _w
    DEFAULTS[f"model.stage{_i}.ratio"] = 0.25
    DEFAULTS[f"model.stage{_i}.temperature"] = 1.0


def _coerce(key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}", key=key) from None
    return raw


def parse_config(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}", key=key)
        values[key] = _coerce(key, value, DEFAULTS[key])
    return values


class Config(dict):
    """Resolved configuration: defaults overlaid with file values and overrides."""

    @classmethod
    def load(cls, path=None, overrides=None, env=None):
        cfg = cls(DEFAULTS)
        if path is not None:
            cfg.update(parse_config(Path(path).read_text(encoding="utf-8"), str(path)))
        env = os.environ if env is None else env
        if env.get("DTA_DATA_ROOT"):
            cfg["data.root"] = env["DTA_DATA_ROOT"]
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}", key=key)
            cfg[key] = _coerce(key, str(value), DEFAULTS[key]) if isinstance(value, str) else value
        return cfg

    @classmethod
    def from_echo(cls, text):
        cfg = cls(DEFAULTS)
        cfg.update(parse_config(text, "<echo>"))
        return cfg

    def echo(self):
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in sorted(self))

    def dataset_spec(self):
        ppb = self["data.points_per_block"]
        return DatasetSpec(ppb if ppb > 0 else None, _split_list(self["data.channels"]),
                           _split_list(self["data.class_names"]))

    def model_config(self):
        n = self["model.stages"]
        if not 1 <= n <= MAX_STAGES:
            raise ConfigError(f"model.stages must be in [1, {MAX_STAGES}]", key="model.stages")
        spec = self.dataset_spec()
        stages = [StageConfig(self[f"model.stage{i}.width"], self[f"model.stage{i}.ratio"],
                              self[f"model.stage{i}.temperature"]) for i in range(1, n + 1)]
        return ModelConfig(
            in_channels=spec.num_channels, num_classes=spec.num_classes, stages=stages,
            arch=self["model.arch"], lts=self["model.lts"], dta=self["model.dta"],
            gfe=self["model.gfe"], gfe_point=self["model.gfe.point"],
            gfe_channel=self["model.gfe.channel"], itr=self["model.itr"],
            knn_k=self["model.knn_k"])

    def train_config(self):
        return TrainConfig(self["train.epochs"], self["train.batch_size"], self["train.lr"],
                           self["train.momentum"], self["train.weight_decay"],
                           self["train.checkpoint_every"])


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _split_list(s):
    return [p.strip() for p in str(s).split(",") if p.strip()]
