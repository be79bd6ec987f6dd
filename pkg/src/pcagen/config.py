"""Pipeline configuration: one JSON file with a block per stage.

Validated against the embedded schema on load. The top-level seed is the
default for every stage block that does not set its own, so one value
controls the whole run unless deliberately overridden.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .codec import CodecConfig
from .conditioning import ConditioningParams
from .control import ControlTrainConfig
from .diffusion import DiffusionTrainConfig
from .errors import ConfigError, MissingFile, SchemaError
from .metrics import EvalConfig
from .preprocess import PreprocessConfig

PIPELINE_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "data_dir": {"type": "string"},
                "work_dir": {"type": "string"},
                "checkpoints_dir": {"type": "string"},
            },
        },
        "preprocess": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "target_resolution": {"type": "integer", "minimum": 16},
                "clamp": {"type": "boolean"},
                "crop_to_prostate": {"type": "boolean"},
                "crop_margin": {"type": "number", "minimum": 0},
            },
        },
        "conditioning": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "edge_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "boost_factor": {"type": "number", "minimum": 1},
                "outline_thickness": {"type": "integer", "minimum": 1},
                "prostate_outline_value": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "lesion_outline_value": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "soft_sigma": {"type": "number", "exclusiveMinimum": 0},
                "prostate_dilation": {"type": "integer", "minimum": 0},
            },
        },
        "codec": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "downsample_factor": {"type": "integer", "minimum": 1},
                "latent_channels": {"type": "integer", "minimum": 1},
                "base_width": {"type": "integer", "minimum": 1},
                "train_steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "identity_codec": {"type": "boolean"},
            },
        },
        "base": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": {"type": "integer", "minimum": 1},
                "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "base_width": {"type": "integer", "minimum": 1},
                "channel_mults": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                    "minItems": 1,
                },
                "time_dim": {"type": "integer", "minimum": 2},
            },
        },
        "control": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": {"type": "integer", "minimum": 1},
                "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "embed_width": {"type": "integer", "minimum": 1},
                "conditioning_mode": {"enum": ["simple", "full", "soft_edge"]},
            },
        },
        "evaluate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "extractor": {"enum": ["pixels", "randconv"]},
                "post_process": {"type": "boolean"},
                "pairing": {"enum": ["index", "random"]},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
    },
}


@dataclass
class PipelineConfig:
    seed: int = 0
    data_dir: Path = Path("data")
    work_dir: Path = Path("work")
    checkpoints_dir: Path = Path("checkpoints")
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    conditioning_overrides: dict = field(default_factory=dict)
    codec: CodecConfig = field(default_factory=CodecConfig)
    base: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    control: ControlTrainConfig = field(default_factory=ControlTrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def conditioning_params(self, resolution: int) -> ConditioningParams:
        return ConditioningParams.for_resolution(resolution, **self.conditioning_overrides)


def _with_seed(block: dict, seed: int) -> dict:
    out = dict(block)
    out.setdefault("seed", seed)
    return out


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from e
    try:
        jsonschema.validate(doc, PIPELINE_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{path}: at {where}: {e.message}") from e
    seed = int(doc.get("seed", 0))
    paths = doc.get("paths", {})
    try:
        cfg = PipelineConfig(
            seed=seed,
            data_dir=Path(paths.get("data_dir", "data")),
            work_dir=Path(paths.get("work_dir", "work")),
            checkpoints_dir=Path(paths.get("checkpoints_dir", "checkpoints")),
            preprocess=PreprocessConfig(**doc.get("preprocess", {})),
            conditioning_overrides=dict(doc.get("conditioning", {})),
            codec=CodecConfig(**_with_seed(doc.get("codec", {}), seed)),
            base=DiffusionTrainConfig(**_with_seed(doc.get("base", {}), seed)),
            control=ControlTrainConfig(**_with_seed(doc.get("control", {}), seed)),
            evaluate=EvalConfig(**_with_seed(doc.get("evaluate", {}), seed)),
        )
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e
    # materialize conditioning overrides once so bad values fail at load time
    cfg.conditioning_params(max(16, cfg.preprocess.target_resolution))
    return cfg
