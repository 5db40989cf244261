""" Model assembly (baseline CNN, HCT, HCH), initialisation, head transplant and checkpoint IO.

All three architectures share one weight naming scheme. The Transformer and the
Hopfield variant use identical names and shapes, so a single checkpoint drives
either attention kind.
"""
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
import json
import math
from pathlib import Path
from typing import Literal, Mapping, Optional

import numpy as np
from loguru import logger as log

from hybridca.core.autodiff import Tensor, add, matmul, mean, relu, reshape, sigmoid
from hybridca.core.errors import ConfigError, ContractError, DimensionError
from hybridca.core.files.tensor_file import load_tensor, save_tensor
from hybridca.nn.attention import (
    DecoderLayer,
    EncoderLayer,
    FeedForward,
    LayerNormParams,
    MultiHeadWeights,
    decoder_forward,
    encoder_forward,
    positional_encoding,
    transformer_mixer,
)
from hybridca.nn.backbone import BackboneSpec, StageSpec, backbone_forward, global_average_pool
from hybridca.nn.hopfield import hopfield_mixer

CHECKPOINT_SCHEMA_VERSION = 1
IRQ_INIT_SD = 0.02

AttentionKind = Literal["none", "transformer", "hopfield"]
HeadKind = Literal["pretrain_15", "severity_2"]
Phase = Literal["random", "pretrained", "finetuned"]

HEAD_OUTPUTS: dict[str, int] = {"pretrain_15": 15, "severity_2": 2}


@dataclass(frozen=True)
class ModelSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    attention_kind: AttentionKind = "transformer"
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    d: int = 64
    m: int = 4
    """ Number of image representation queries """
    beta: Optional[float] = None
    """ Hopfield inverse temperature, None means 1/sqrt(d/heads) """
    n_steps: int = 1
    dropout: float = 0.1
    head_kind: HeadKind = "pretrain_15"
    max_entities: int = 256
    """ Rows of the positional encoding table """

    def __post_init__(self):
        if self.attention_kind not in ("none", "transformer", "hopfield"):
            raise ConfigError("/model/attention_kind", f"unknown value '{self.attention_kind}'")
        if self.head_kind not in HEAD_OUTPUTS:
            raise ConfigError("/model/head_kind", f"unknown value '{self.head_kind}'")
        if self.d != self.backbone.projection:
            raise ConfigError(
                "/model/d",
                f"must equal the backbone projection width {self.backbone.projection}",
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("/model/dropout", "must be in [0, 1)")
        if not self.hybrid:
            return
        for name in ("encoder_layers", "decoder_layers", "heads", "m", "n_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"/model/{name}", "must be at least 1")
        if self.d % self.heads != 0:
            raise ConfigError("/model/heads", f"must divide d = {self.d}")
        if self.d % 2 != 0:
            raise ConfigError("/model/d", "must be even for the positional encoding")
        if self.beta is not None and not self.beta > 0:
            raise ConfigError("/model/beta", "must be positive")
        if self.backbone.n_entities > self.max_entities:
            raise ConfigError(
                "/model/max_entities",
                f"backbone yields {self.backbone.n_entities} entities, more than {self.max_entities}",
            )

    @property
    def hybrid(self) -> bool:
        return self.attention_kind != "none"

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def n_outputs(self) -> int:
        return HEAD_OUTPUTS[self.head_kind]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        doc = dict(doc)
        backbone = dict(doc.pop("backbone", {}))
        if "stages" in backbone:
            backbone["stages"] = tuple(StageSpec(**stage) for stage in backbone["stages"])
        if "image_size" in backbone:
            backbone["image_size"] = tuple(backbone["image_size"])
        return cls(backbone=BackboneSpec(**backbone), **doc)


@dataclass(frozen=True)
class ParamInfo:
    shape: tuple[int, ...]
    init: Literal["glorot", "zeros", "ones", "irq"]
    fan_in: int = 0
    fan_out: int = 0


@dataclass
class Checkpoint:
    spec: ModelSpec
    weights: dict[str, np.ndarray]
    seed: int
    phase: Phase = "random"

    def __post_init__(self):
        expected = parameter_registry(self.spec)
        missing = expected.keys() - self.weights.keys()
        extra = self.weights.keys() - expected.keys()
        if missing or extra:
            raise ContractError(
                f"Checkpoint weights do not match spec: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, info in expected.items():
            if self.weights[name].shape != info.shape:
                raise DimensionError(
                    f"Weight '{name}' has shape {self.weights[name].shape}, spec needs {info.shape}"
                )

    def constants(self) -> dict[str, Tensor]:
        return {name: Tensor(value) for name, value in self.weights.items()}


#########################################################################
# PARAMETER REGISTRY
#########################################################################


def _glorot(shape: tuple[int, ...]) -> ParamInfo:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return ParamInfo(shape, "glorot", fan_in=shape[1] * receptive, fan_out=shape[0] * receptive)
    return ParamInfo(shape, "glorot", fan_in=shape[0], fan_out=shape[1])


def _attention_block(prefix: str, spec: ModelSpec) -> dict[str, ParamInfo]:
    d, d_head = spec.d, spec.d_head
    registry = dict()
    for h in range(spec.heads):
        for name in ("W_Q", "W_K", "W_V"):
            registry[f"{prefix}.head{h}.{name}"] = _glorot((d, d_head))
    registry[f"{prefix}.W_O"] = _glorot((spec.heads * d_head, d))
    return registry


def _ffn_block(prefix: str, spec: ModelSpec) -> dict[str, ParamInfo]:
    hidden = 4 * spec.d
    return {
        f"{prefix}.W1": _glorot((spec.d, hidden)),
        f"{prefix}.b1": ParamInfo((hidden,), "zeros"),
        f"{prefix}.W2": _glorot((hidden, spec.d)),
        f"{prefix}.b2": ParamInfo((spec.d,), "zeros"),
    }


def _norm_block(prefix: str, spec: ModelSpec) -> dict[str, ParamInfo]:
    return {
        f"{prefix}.gain": ParamInfo((spec.d,), "ones"),
        f"{prefix}.bias": ParamInfo((spec.d,), "zeros"),
    }


def head_registry(spec: ModelSpec) -> dict[str, ParamInfo]:
    d, out = spec.d, spec.n_outputs
    return {
        "head.hidden.weight": _glorot((d, d)),
        "head.hidden.bias": ParamInfo((d,), "zeros"),
        "head.output.weight": _glorot((d, out)),
        "head.output.bias": ParamInfo((out,), "zeros"),
    }


def parameter_registry(spec: ModelSpec) -> dict[str, ParamInfo]:
    """Every named weight of the architecture in a fixed order."""
    registry: dict[str, ParamInfo] = dict()
    for name, shape in spec.backbone.parameter_shapes().items():
        registry[name] = _glorot(shape) if len(shape) == 4 else ParamInfo(shape, "zeros")
    if spec.hybrid:
        registry["irq"] = ParamInfo((spec.m, spec.d), "irq")
        for layer in range(spec.encoder_layers):
            prefix = f"encoder.{layer}"
            registry |= _attention_block(f"{prefix}.self_attn", spec)
            registry |= _ffn_block(f"{prefix}.ffn", spec)
            for j in (1, 2):
                registry |= _norm_block(f"{prefix}.norm{j}", spec)
        for layer in range(spec.decoder_layers):
            prefix = f"decoder.{layer}"
            registry |= _attention_block(f"{prefix}.self_attn", spec)
            registry |= _attention_block(f"{prefix}.cross_attn", spec)
            registry |= _ffn_block(f"{prefix}.ffn", spec)
            for j in (1, 2, 3):
                registry |= _norm_block(f"{prefix}.norm{j}", spec)
    registry |= head_registry(spec)
    return registry


def glorot_bound(info: ParamInfo) -> float:
    return math.sqrt(6.0 / (info.fan_in + info.fan_out))


def _draw(info: ParamInfo, rng: np.random.Generator) -> np.ndarray:
    match info.init:
        case "glorot":
            bound = glorot_bound(info)
            return rng.uniform(-bound, bound, size=info.shape)
        case "irq":
            return rng.normal(0.0, IRQ_INIT_SD, size=info.shape)
        case "ones":
            return np.ones(info.shape)
        case _:
            return np.zeros(info.shape)


#########################################################################
# OPERATIONS
#########################################################################


def init(spec: ModelSpec, seed: int) -> Checkpoint:
    rng = np.random.default_rng(seed)
    weights = {name: _draw(info, rng) for name, info in parameter_registry(spec).items()}
    log.debug(
        f"Initialised {spec.attention_kind}/{spec.head_kind} model with {len(weights)} tensors (seed {seed})"
    )
    return Checkpoint(spec=spec, weights=weights, seed=seed, phase="random")


def transplant(ckpt: Checkpoint, new_head: HeadKind, seed: int) -> Checkpoint:
    """Copy every non-head weight and draw a fresh head for ``new_head``."""
    spec = replace(ckpt.spec, head_kind=new_head)
    rng = np.random.default_rng(seed)
    weights = {
        name: value.copy() for name, value in ckpt.weights.items() if not name.startswith("head.")
    }
    weights |= {name: _draw(info, rng) for name, info in head_registry(spec).items()}
    phase = "random" if ckpt.phase == "random" else "pretrained"
    return Checkpoint(spec=spec, weights=weights, seed=seed, phase=phase)


@lru_cache(maxsize=8)
def _positional_table(n: int, d: int):
    return positional_encoding(n, d)


def _mixer(spec: ModelSpec):
    if spec.attention_kind == "hopfield":
        return hopfield_mixer(beta=spec.beta, n_steps=spec.n_steps)
    return transformer_mixer


def _encoder_layers(spec: ModelSpec, params: Mapping[str, Tensor], rate: float) -> list[EncoderLayer]:
    mixer = _mixer(spec)
    return [
        EncoderLayer(
            self_attention=MultiHeadWeights.from_params(params, f"encoder.{i}.self_attn", spec.heads),
            ffn=FeedForward.from_params(params, f"encoder.{i}.ffn"),
            norm1=LayerNormParams.from_params(params, f"encoder.{i}.norm1"),
            norm2=LayerNormParams.from_params(params, f"encoder.{i}.norm2"),
            dropout_rate=rate,
            mixer=mixer,
        )
        for i in range(spec.encoder_layers)
    ]


def _decoder_layers(spec: ModelSpec, params: Mapping[str, Tensor], rate: float) -> list[DecoderLayer]:
    mixer = _mixer(spec)
    return [
        DecoderLayer(
            self_attention=MultiHeadWeights.from_params(params, f"decoder.{i}.self_attn", spec.heads),
            cross_attention=MultiHeadWeights.from_params(params, f"decoder.{i}.cross_attn", spec.heads),
            ffn=FeedForward.from_params(params, f"decoder.{i}.ffn"),
            norm1=LayerNormParams.from_params(params, f"decoder.{i}.norm1"),
            norm2=LayerNormParams.from_params(params, f"decoder.{i}.norm2"),
            norm3=LayerNormParams.from_params(params, f"decoder.{i}.norm3"),
            dropout_rate=rate,
            mixer=mixer,
        )
        for i in range(spec.decoder_layers)
    ]


def forward_with(
    spec: ModelSpec,
    params: Mapping[str, Tensor],
    image: Tensor,
    rng: Optional[np.random.Generator] = None,
    train_mode: bool = False,
    dropout_rate: Optional[float] = None,
) -> Tensor:
    """Forward pass over explicit weight tensors (graph leaves during training).

    ``image`` is [c, h, w] or [B, c, h, w]; the output is [n_out] or [B, n_out].
    Dropout runs only when ``train_mode`` is set and ``rng`` is given.
    """
    if image.ndim not in (3, 4):
        raise DimensionError(f"Image must be [c, h, w] or [B, c, h, w], got {image.shape}")
    single = image.ndim == 3
    x = reshape(image, (1, *image.shape)) if single else image
    rate = spec.dropout if dropout_rate is None else dropout_rate
    rng = rng if train_mode else None

    entities = backbone_forward(x, spec.backbone, params)
    if spec.hybrid:
        pe = _positional_table(spec.max_entities, spec.d)
        memory = encoder_forward(entities, _encoder_layers(spec, params, rate), pe, rng)
        queries = decoder_forward(params["irq"], memory, _decoder_layers(spec, params, rate), rng)
        pooled = mean(queries, axis=-2)
    else:
        pooled = global_average_pool(entities)

    hidden = relu(add(matmul(pooled, params["head.hidden.weight"]), params["head.hidden.bias"]))
    out = add(matmul(hidden, params["head.output.weight"]), params["head.output.bias"])
    if spec.head_kind == "pretrain_15":
        out = sigmoid(out)
    return reshape(out, (spec.n_outputs,)) if single else out


def forward(
    ckpt: Checkpoint,
    image: Tensor,
    rng: Optional[np.random.Generator] = None,
    train_mode: bool = False,
) -> Tensor:
    return forward_with(ckpt.spec, ckpt.constants(), image, rng=rng, train_mode=train_mode)


#########################################################################
# CHECKPOINT IO
#########################################################################


def save_checkpoint(ckpt: Checkpoint, directory: Path) -> Path:
    """Write ``spec.json`` plus one tensor file per named weight under ``weights/``."""
    directory = Path(directory)
    (directory / "weights").mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "seed": ckpt.seed,
        "phase": ckpt.phase,
        "spec": ckpt.spec.to_dict(),
        "weights": list(ckpt.weights),
    }
    (directory / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name, value in ckpt.weights.items():
        save_tensor(value, directory / "weights" / f"{name}.hcat")
    log.info(f"Saved {ckpt.phase} checkpoint to {directory}")
    return directory


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / "spec.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"No checkpoint spec found at {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ContractError(
            f"Unsupported checkpoint schema version {meta.get('schema_version')} in {meta_path}"
        )
    weights = {
        name: load_tensor(directory / "weights" / f"{name}.hcat").numpy()
        for name in meta["weights"]
    }
    return Checkpoint(
        spec=ModelSpec.from_dict(meta["spec"]),
        weights=weights,
        seed=meta["seed"],
        phase=meta["phase"],
    )
