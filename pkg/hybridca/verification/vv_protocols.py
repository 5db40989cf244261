from dataclasses import replace
from pathlib import Path
from typing import Optional, Union

import yaml
from loguru import logger as log

from hybridca.core.check_model import ValidationProtocol
from hybridca.nn.model import ModelSpec, parameter_registry
from hybridca.verification.checks import (
    PRIMITIVE_CASES,
    check_attention_gradient,
    check_backbone_gradient,
    check_hopfield_attention_equivalence,
    check_hopfield_energy_descent,
    check_hopfield_gradient,
    check_model_gradient,
    check_primitive_gradient,
)

CONFIG = {
    "gradient": {"tolerance": 1e-4, "step": 1e-5},
    "Hopfield-check_hopfield_energy_descent": {"trials": 20},
    "Hopfield-check_hopfield_attention_equivalence": {"tolerance": 1e-12},
    "Models-check_model_gradient": {"window": 16},
}

ATTENTION_BLOCKS = [
    ("multi_head", "queries"),
    ("multi_head", "memory"),
    ("encoder", "memory"),
    ("decoder", "queries"),
    ("decoder", "memory"),
]


def _model_targets(spec: ModelSpec) -> list[str]:
    """Input image plus one representative weight per model part present in ``spec``."""
    names = parameter_registry(spec)
    wanted = [
        "backbone.stage0.kernel",
        "backbone.projection.kernel",
        "irq",
        "encoder.0.self_attn.head0.W_Q",
        "decoder.0.cross_attn.head0.W_K",
        "decoder.0.ffn.W1",
        "head.hidden.weight",
        "head.output.weight",
        "head.output.bias",
    ]
    return ["image"] + [name for name in wanted if name in names]


def validate_gradients(
    spec: ModelSpec,
    seed: int = 0,
    tolerance: Optional[float] = None,
    config_path: Path = None,
    run_args: dict = None,
    report_args: dict = None,
    protocol_args: dict = None,
    defer_run: bool = False,
) -> Union[ValidationProtocol, ValidationProtocol.Report]:
    """Gradient verification of every primitive, block and model variant.

    Model checks run once for each attention kind on ``spec`` (none, transformer, hopfield).
    """
    if config_path is not None:
        with open(config_path, "r") as f:
            config = CONFIG | yaml.safe_load(f)
    else:
        config = CONFIG
    run_args = run_args if run_args is not None else dict()
    report_args = report_args if report_args is not None else dict()
    protocol_args = protocol_args if protocol_args is not None else dict()

    gradient = config["gradient"]
    if tolerance is not None:
        gradient = gradient | {"tolerance": tolerance}
    vp = ValidationProtocol(**protocol_args)
    with vp.component_start(name="Primitives", description="Every differentiable operation on random inputs"):
        with vp.payload(payloads=[{"op": op, "seed": seed} for op in PRIMITIVE_CASES]):
            vp.add(check_primitive_gradient, config=gradient)

    with vp.component_start(name="Attention", description="Multi-head attention, encoder and decoder stacks"):
        with vp.payload(
            payloads=[{"block": block, "wrt": wrt, "seed": seed} for block, wrt in ATTENTION_BLOCKS]
        ):
            vp.add(check_attention_gradient, config=gradient)

    with vp.component_start(name="Hopfield", description="Hopfield retrieval and Hopfield attention layers"):
        with vp.payload(
            payloads=[
                {"block": "update", "wrt": "state", "n_steps": 1, "seed": seed},
                {"block": "layer", "wrt": "queries", "n_steps": 1, "seed": seed},
                {"block": "layer", "wrt": "memory", "n_steps": 3, "seed": seed},
                {"block": "multi_head", "wrt": "queries", "n_steps": 2, "seed": seed},
                {"block": "encoder", "wrt": "memory", "n_steps": 1, "seed": seed},
                {"block": "decoder", "wrt": "memory", "n_steps": 1, "seed": seed},
            ]
        ):
            vp.add(check_hopfield_gradient, config=gradient)
        with vp.payload(payloads=[{"n_patterns": n, "seed": seed} for n in (1, 2, 10)]):
            vp.add(
                check_hopfield_energy_descent,
                config=config["Hopfield-check_hopfield_energy_descent"],
                description="Retrieval never increases the energy",
            )
        vp.add(
            check_hopfield_attention_equivalence,
            payloads={"seed": seed},
            config=config["Hopfield-check_hopfield_attention_equivalence"],
        )

    with vp.component_start(name="Backbone", description="Convolution stages and entity vectorisation"):
        with vp.payload(
            payloads=[
                {"block": "conv2d", "wrt": "image", "seed": seed},
                {"block": "conv2d", "wrt": "kernel", "seed": seed},
                {"block": "conv2d", "wrt": "bias", "seed": seed},
                {"block": "vectorize", "wrt": "feature_map", "seed": seed},
                {"block": "backbone", "wrt": "image", "seed": seed},
            ]
        ):
            vp.add(check_backbone_gradient, config=gradient)

    with vp.component_start(name="Models", description="Full forward pass without dropout"):
        for kind in ("none", "transformer", "hopfield"):
            variant = replace(spec, attention_kind=kind)
            with vp.component_start(name=kind, description=f"{kind} attention"):
                with vp.payload(
                    payloads=[
                        {"spec": variant, "wrt": name, "seed": seed} for name in _model_targets(variant)
                    ]
                ):
                    vp.add(check_model_gradient, config=gradient | config["Models-check_model_gradient"])

    log.info(f"Queued gradient verification protocol:\n{vp.queued_checks()}")
    if defer_run:
        return vp

    vp.run(**run_args)
    return vp.report(**report_args)
