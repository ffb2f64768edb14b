"""Runtime configuration: YAML file plus command-line overrides.

Every threshold has a documented default (see PipelineConfig and IcpParams);
a config file only needs the values it wants to change:

    scene: scene.yaml
    calibration: calib.yaml
    pipeline:
      match_threshold_m: 0.5
      join_window_us: 500000
    icp:
      reject_threshold: 0.1
    recognizers:
      face: inproc
      gesture: tcp://127.0.0.1:7601
    gateway_port: 8765
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .pipeline import PipelineConfig
from .pointcloud import IcpParams


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    scene: str | None = None
    calibration: str | None = None
    store: str | None = None
    script: str | None = None
    events_out: str | None = None
    gateway_port: int | None = None
    face_recognizer: str = "inproc"      # "inproc" | "none" | tcp://host:port
    gesture_recognizer: str = "inproc"
    pipeline: PipelineConfig = dataclasses.field(default_factory=PipelineConfig)
    icp: IcpParams = dataclasses.field(default_factory=IcpParams)


def _build(cls, doc: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return cls(**doc)


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if doc is None:
        return AppConfig()
    if not isinstance(doc, dict):
        raise ConfigError("config file must be a mapping")
    recognizers = doc.pop("recognizers", {})
    pipeline_doc = doc.pop("pipeline", {})
    icp_doc = doc.pop("icp", {})
    cfg = _build(AppConfig, {
        **doc,
        "pipeline": _build(PipelineConfig, pipeline_doc, "pipeline"),
        "icp": _build(IcpParams, icp_doc, "icp"),
    }, "config")
    if "face" in recognizers:
        cfg.face_recognizer = str(recognizers["face"])
    if "gesture" in recognizers:
        cfg.gesture_recognizer = str(recognizers["gesture"])
    return cfg


def override(cfg: AppConfig, **kwargs) -> AppConfig:
    """Apply non-None command-line overrides onto a loaded config."""
    for key, value in kwargs.items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"no config field {key!r}")
        setattr(cfg, key, value)
    return cfg
