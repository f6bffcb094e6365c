"""Pipeline tunables and their plain-text ``key = value`` file format."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Tuple

import numpy as np

SECTION = "pipeline"


@dataclass
class PipelineConfig:
    # dense features
    step: int = 4
    n_scales: int = 4
    scale_factor: float = float(np.sqrt(2.0))
    support: int = 16
    pca_dim: int = 80
    pca_samples: int = 200_000
    # vocabulary
    vocab_k: int = 64
    vocab_samples: int = 500_000
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-4
    # encoding
    pyramid: Tuple[int, ...] = (1, 2, 4)
    cell_size: int = 4
    table_dtype: str = "float32"
    ssr_alpha: float = 0.5
    per_block_norm: bool = False
    # classifier
    l2_reg_alpha: float = 1e-5
    epochs: int = 10
    hard_negative_epochs: int = 2
    background_per_frame: int = 4
    hard_negative_pool_per_frame: int = 8
    background_label: str = "background"
    # proposals (map units are scale-ambiguous: always configure base_eps)
    base_eps: float = 0.01
    color_weight: float = 0.5
    min_pts: int = 10
    min_visible_points: int = 15
    min_box: float = 20.0
    iou_thresh: float = 0.5
    # aggregation
    prob_floor: float = 1e-9
    # run control
    frame_stride: int = 1
    workers: int = 1
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        positive = ("step", "n_scales", "scale_factor", "support", "pca_dim", "pca_samples",
                    "vocab_k", "vocab_samples", "kmeans_max_iter", "cell_size", "ssr_alpha",
                    "l2_reg_alpha", "base_eps", "min_pts", "min_visible_points",
                    "prob_floor", "frame_stride", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"config value {name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "hard_negative_epochs", "background_per_frame",
                     "hard_negative_pool_per_frame", "color_weight", "min_box"):
            if getattr(self, name) < 0:
                raise ValueError(f"config value {name} must be non-negative")
        if not 0 < self.iou_thresh <= 1:
            raise ValueError("iou_thresh must lie in (0, 1]")
        if not 0 <= self.ssr_alpha <= 1:
            raise ValueError("ssr_alpha must lie in [0, 1]")
        if self.table_dtype not in ("float32", "float64"):
            raise ValueError("table_dtype must be float32 or float64")
        if not self.pyramid or any(p not in (1, 2, 4) for p in self.pyramid):
            raise ValueError("pyramid levels must be drawn from 1, 2, 4")
        return self

    @property
    def descriptor_dim(self) -> int:
        return self.vocab_k * self.pca_dim * sum(p * p for p in self.pyramid)

    def with_overrides(self, pairs: Iterable[str]) -> "PipelineConfig":
        d = asdict(self)
        for pair in pairs:
            if "=" not in pair:
                raise ValueError(f"override {pair!r} is not key=value")
            k, v = (s.strip() for s in pair.split("=", 1))
            if k not in d:
                raise ValueError(f"unknown config key {k!r}")
            d[k] = _parse(k, v)
        return PipelineConfig(**d).validate()


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse(key: str, text: str):
    t = _TYPES[key]
    if t == "Tuple[int, ...]":
        return tuple(int(x) for x in text.replace(" ", "").strip("()").split(",") if x)
    if t == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: not a boolean: {text!r}")
    if t == "int":
        return int(text)
    if t == "float":
        return float(text)
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path) -> PipelineConfig:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValueError(f"{path}: cannot parse config ({exc})") from exc
    if not cp.has_section(SECTION):
        raise ValueError(f"{path}: missing [{SECTION}] section")
    pairs = [f"{k}={v}" for k, v in cp.items(SECTION)]
    try:
        return PipelineConfig().with_overrides(pairs)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def save_config(cfg: PipelineConfig, path) -> None:
    cp = configparser.ConfigParser()
    cp[SECTION] = {k: _format(v) for k, v in asdict(cfg).items()}
    with open(path, "w") as fh:
        cp.write(fh)
