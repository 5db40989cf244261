""" Schemas for validation
Uses Schema for the run configuration (reported as JSON-pointer paths) and pandera
for manifest tables.
"""
from dataclasses import dataclass, field
from typing import Any, Optional

import pandera as pa
from schema import And, Or, Schema, SchemaError, Use
from schema import Optional as schema_Optional

from hybridca.core.entity_model import LABEL_ARITY
from hybridca.core.errors import ConfigError
from hybridca.evaluation.crossval import Arm, EvalConfig
from hybridca.nn.model import ModelSpec
from hybridca.training.procedures import FinetuneConfig, PretrainConfig

#########################################################################
# MANIFEST TABLES
#########################################################################

check_binary_label = pa.Check.isin(
    [0.0, 1.0],
    title="Check proxy labels are binary",
    error="Proxy labels must be 0 or 1",
)


def manifest_schema(kind: str) -> pa.DataFrameSchema:
    """Column layout: sample_id, patient_id, tensor_path, label_0 .. label_{k-1}."""
    columns = {
        "sample_id": pa.Column(str),
        "patient_id": pa.Column(str),
        "tensor_path": pa.Column(str),
    }
    for i in range(LABEL_ARITY[kind]):
        columns[f"label_{i}"] = pa.Column(
            float, checks=[check_binary_label] if kind == "proxy" else [], coerce=True
        )
    return pa.DataFrameSchema(columns=columns, strict=True, ordered=True)


#########################################################################
# RUN CONFIGURATION
#########################################################################

INT_AT_LEAST_1 = And(int, lambda v: not isinstance(v, bool) and v >= 1, error="must be an integer >= 1")
INT_AT_LEAST_0 = And(int, lambda v: not isinstance(v, bool) and v >= 0, error="must be an integer >= 0")
POSITIVE = And(Or(int, float), Use(float), lambda v: v > 0, error="must be a positive number")
NON_NEGATIVE = And(Or(int, float), Use(float), lambda v: v >= 0, error="must be a number >= 0")
RATE = And(Or(int, float), Use(float), lambda v: 0 <= v < 1, error="must be in [0, 1)")
ATTENTION_KIND = Or("none", "transformer", "hopfield", error="must be one of none, transformer, hopfield")

stage_section = {
    "channels": INT_AT_LEAST_1,
    schema_Optional("kernel"): INT_AT_LEAST_1,
    schema_Optional("stride"): INT_AT_LEAST_1,
    schema_Optional("padding"): INT_AT_LEAST_0,
}

model_section = {
    schema_Optional("backbone"): {
        schema_Optional("stages"): [stage_section],
        schema_Optional("in_channels"): INT_AT_LEAST_1,
        schema_Optional("image_size"): And([INT_AT_LEAST_1], lambda v: len(v) == 2, error="must be [h, w]"),
        schema_Optional("projection"): INT_AT_LEAST_1,
        schema_Optional("activation"): Or("relu", "none", error="must be relu or none"),
        schema_Optional("label"): str,
    },
    schema_Optional("attention_kind"): ATTENTION_KIND,
    schema_Optional("encoder_layers"): INT_AT_LEAST_1,
    schema_Optional("decoder_layers"): INT_AT_LEAST_1,
    schema_Optional("heads"): INT_AT_LEAST_1,
    schema_Optional("d"): INT_AT_LEAST_1,
    schema_Optional("m"): INT_AT_LEAST_1,
    schema_Optional("beta"): Or(None, POSITIVE),
    schema_Optional("n_steps"): INT_AT_LEAST_1,
    schema_Optional("dropout"): RATE,
    schema_Optional("head_kind"): Or("pretrain_15", "severity_2", error="must be pretrain_15 or severity_2"),
    schema_Optional("max_entities"): INT_AT_LEAST_1,
}

pretrain_section = {
    schema_Optional("optimizer"): Or("adamw", error="pre-training uses adamw"),
    schema_Optional("lr"): POSITIVE,
    schema_Optional("weight_decay"): NON_NEGATIVE,
    schema_Optional("epochs"): INT_AT_LEAST_1,
    schema_Optional("batch_size"): INT_AT_LEAST_1,
    schema_Optional("seed"): INT_AT_LEAST_0,
    schema_Optional("betas"): And([RATE], lambda v: len(v) == 2, error="must be [beta1, beta2]"),
    schema_Optional("eps"): POSITIVE,
    schema_Optional("val_fraction"): RATE,
}

finetune_section = {
    schema_Optional("optimizer"): Or("sgd", error="fine-tuning uses sgd"),
    schema_Optional("lr"): POSITIVE,
    schema_Optional("momentum"): RATE,
    schema_Optional("weight_decay"): NON_NEGATIVE,
    schema_Optional("epochs"): INT_AT_LEAST_1,
    schema_Optional("lr_decay"): And(POSITIVE, lambda v: v <= 1, error="must be in (0, 1]"),
    schema_Optional("lr_decay_every"): INT_AT_LEAST_1,
    schema_Optional("dropout"): RATE,
    schema_Optional("loss_beta"): POSITIVE,
    schema_Optional("batch_size"): INT_AT_LEAST_1,
    schema_Optional("seed"): INT_AT_LEAST_0,
}

data_source_section = {
    schema_Optional("manifest"): str,
    schema_Optional("seed"): INT_AT_LEAST_0,
    schema_Optional("n"): INT_AT_LEAST_1,
    schema_Optional("noise_sd"): NON_NEGATIVE,
}

eval_section = {
    schema_Optional("k"): And(int, lambda v: not isinstance(v, bool) and v >= 2, error="must be an integer >= 2"),
    schema_Optional("seeds"): And([INT_AT_LEAST_0], len, error="must be a non-empty list of seeds"),
    schema_Optional("arms"): [
        {
            "name": str,
            "attention_kind": ATTENTION_KIND,
            schema_Optional("pretrained"): bool,
        }
    ],
}

run_config = {
    schema_Optional("model"): model_section,
    schema_Optional("pretrain"): pretrain_section,
    schema_Optional("finetune"): finetune_section,
    schema_Optional("data"): {
        schema_Optional("proxy"): data_source_section,
        schema_Optional("target"): data_source_section,
    },
    schema_Optional("eval"): eval_section,
    schema_Optional("out_dir"): Or(None, str),
}


def _key_name(key: Any) -> str:
    return key.schema if isinstance(key, schema_Optional) else key


def validate_with_pointer(spec: Any, value: Any, pointer: str = "") -> Any:
    """Validate ``value`` against a nested schema, raising ConfigError at the offending path.

    Mappings reject unknown keys; a ``[item]`` list schema validates every element.
    Leaves are validated with ``schema.Schema``.
    """
    if isinstance(spec, dict):
        if not isinstance(value, dict):
            raise ConfigError(pointer, f"expected a mapping, got {type(value).__name__}")
        keys = {_key_name(k): k for k in spec}
        for name in value:
            if name not in keys:
                raise ConfigError(f"{pointer}/{name}", "unknown key")
        validated = dict()
        for name, key in keys.items():
            if name in value:
                validated[name] = validate_with_pointer(spec[key], value[name], f"{pointer}/{name}")
            elif not isinstance(key, schema_Optional):
                raise ConfigError(f"{pointer}/{name}", "missing required key")
        return validated
    if isinstance(spec, list) and len(spec) == 1 and isinstance(spec[0], dict):
        if not isinstance(value, list):
            raise ConfigError(pointer, f"expected a list, got {type(value).__name__}")
        return [validate_with_pointer(spec[0], item, f"{pointer}/{i}") for i, item in enumerate(value)]
    try:
        return Schema(spec).validate(value)
    except SchemaError as exc:
        raise ConfigError(pointer, str(exc.code).splitlines()[-1]) from exc


#########################################################################
# RESOLVED CONFIGURATION
#########################################################################


@dataclass(frozen=True)
class DataSource:
    manifest: Optional[str] = None
    """ Manifest path; when absent the synthetic generator is used """
    seed: int = 0
    n: int = 500
    noise_sd: float = 0.0


@dataclass(frozen=True)
class DataConfig:
    proxy: DataSource = field(default_factory=lambda: DataSource(seed=1, n=500))
    target: DataSource = field(default_factory=lambda: DataSource(seed=2, n=94, noise_sd=0.05))


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: Optional[str] = None


def validate_run_config(doc: Optional[dict]) -> RunConfig:
    doc = validate_with_pointer(run_config, doc if doc is not None else {})
    try:
        model = ModelSpec.from_dict(doc.get("model", {}))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("/model", str(exc)) from exc

    pretrain = dict(doc.get("pretrain", {}))
    if "betas" in pretrain:
        pretrain["betas"] = tuple(pretrain["betas"])
    data = doc.get("data", {})
    defaults = DataConfig()
    evaluation = dict(doc.get("eval", {}))
    if "seeds" in evaluation:
        evaluation["seeds"] = tuple(evaluation["seeds"])
    if "arms" in evaluation:
        names = [arm["name"] for arm in evaluation["arms"]]
        if len(set(names)) != len(names):
            raise ConfigError("/eval/arms", f"arm names must be unique, got {names}")
        evaluation["arms"] = tuple(Arm(**arm) for arm in evaluation["arms"])

    return RunConfig(
        model=model,
        pretrain=PretrainConfig(**pretrain),
        finetune=FinetuneConfig(**doc.get("finetune", {})),
        data=DataConfig(
            proxy=_merge_source(defaults.proxy, data.get("proxy", {})),
            target=_merge_source(defaults.target, data.get("target", {})),
        ),
        eval=EvalConfig(**evaluation),
        out_dir=doc.get("out_dir"),
    )


def _merge_source(default: DataSource, section: dict) -> DataSource:
    return DataSource(**(vars(default) | section))
