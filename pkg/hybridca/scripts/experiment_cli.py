from dataclasses import asdict, replace
import functools
import json
from pathlib import Path
from typing import Optional

import click
from loguru import logger

from hybridca.config.interface import DEFAULT_CONFIG, load_run_config
from hybridca.config.schemas import DataSource, RunConfig
from hybridca.core.check_model import FlagCode, write_flag_table
from hybridca.core.entity_model import CLASS_NAMES, Dataset
from hybridca.core.errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    InvariantViolation,
    MergeError,
    ParameterError,
)
from hybridca.core.loaders import load_manifest
from hybridca.core.post_processing import write_report
from hybridca.data.synthetic import synth_proxy, synth_target
from hybridca.evaluation.crossval import Arm, crossval as run_crossval, holdout_split, write_crossval_outputs
from hybridca.evaluation.metrics import multilabel_auc
from hybridca.nn.model import Checkpoint, load_checkpoint, save_checkpoint
from hybridca.training.procedures import pretrain as run_pretrain, predict
from hybridca.verification.vv_protocols import validate_gradients


DOMAIN_ERRORS = (ContractError, DataError, DimensionError, FormatError, InvariantViolation, MergeError, ParameterError)


class ConfigClickError(click.ClickException):
    """Run configuration problems exit like usage errors."""

    exit_code = 2


def handle_errors(fcn):
    """ConfigError exits with 2, other domain errors with 1, both without a traceback."""

    @functools.wraps(fcn)
    def wrapper(*args, **kwargs):
        try:
            return fcn(*args, **kwargs)
        except ConfigError as e:
            raise ConfigClickError(str(e)) from e
        except DOMAIN_ERRORS as e:
            raise click.ClickException(f"{type(e).__name__}: {e}") from e

    return wrapper


def _config_selection(config: Optional[Path]):
    return config if config is not None else DEFAULT_CONFIG


config_option = click.option(
    "--config",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Run configuration (YAML or JSON). Defaults to the packaged toy configuration.",
)
seed_option = click.option("--seed", type=click.INT, default=None, help="Overrides the training, fine-tuning and evaluation seeds; dataset seeds stay as configured")
out_dir_option = click.option(
    "--out-dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Output root. Defaults to the configuration's out_dir, then $HCA_OUT",
)


def load_source(source: DataSource, kind: str, geometry: tuple[int, int, int]) -> Dataset:
    if source.manifest is not None:
        return load_manifest(Path(source.manifest))
    if kind == "proxy":
        return synth_proxy(source.seed, source.n, geometry=geometry)
    return synth_target(source.seed, source.n, geometry=geometry, noise_sd=source.noise_sd)


def _geometry(run: RunConfig) -> tuple[int, int, int]:
    backbone = run.model.backbone
    return (backbone.in_channels, *backbone.image_size)


def pretrain_and_save(run: RunConfig, attention_kind: str, seed: int, proxy: Dataset, out: Path) -> Checkpoint:
    """Pre-train on a patient-grouped split of ``proxy``; writes checkpoint, loss.csv and auc.json into ``out``."""
    spec = replace(run.model, attention_kind=attention_kind, head_kind="pretrain_15")
    cfg = replace(run.pretrain, seed=seed)
    train_ids, val_ids = holdout_split(
        list(zip(proxy.sample_ids, proxy.patient_ids)), cfg.val_fraction, seed
    )
    val = proxy.subset(val_ids)
    ckpt, trace = run_pretrain(spec, proxy.subset(train_ids), cfg, val=val)

    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "checkpoint")
    trace.write_csv(out / "loss.csv")
    if len(val):
        table = multilabel_auc(predict(ckpt, val.images()), val.labels(), CLASS_NAMES)
        (out / "auc.json").write_text(json.dumps(table, indent=2))
        logger.info(f"Pre-training mean AUC on {len(val)} held-out samples: {table['mean']}")
    return ckpt


@click.command()
@config_option
@seed_option
@out_dir_option
@handle_errors
def pretrain(config, seed, out_dir):
    """Pre-train the configured model on the proxy dataset."""
    run = load_run_config(_config_selection(config), seed=seed, out_dir=out_dir)
    proxy = load_source(run.data.proxy, "proxy", _geometry(run))
    out = Path(run.out_dir) / "pretrain" / run.model.attention_kind / f"seed_{run.pretrain.seed}"
    pretrain_and_save(run, run.model.attention_kind, run.pretrain.seed, proxy, out)
    click.echo(f"Wrote pre-trained checkpoint to '{out / 'checkpoint'}'")


@click.command()
@config_option
@seed_option
@out_dir_option
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Folds run in parallel worker processes")
@click.option(
    "--pretrained",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    default=None,
    help="Existing pre-trained checkpoint, used by pre-trained arms of the same attention kind",
)
@handle_errors
def crossval(config, seed, out_dir, jobs, pretrained):
    """Fine-tune and cross-validate every experiment arm for every evaluation seed."""
    run = load_run_config(_config_selection(config), seed=seed, out_dir=out_dir)
    arms = run.eval.arms or (Arm(name=run.model.attention_kind, attention_kind=run.model.attention_kind),)
    target = load_source(run.data.target, "target", _geometry(run))
    given = load_checkpoint(pretrained) if pretrained is not None else None

    proxy: Optional[Dataset] = None
    checkpoints: dict[tuple[str, int], Checkpoint] = dict()
    for arm in arms:
        for eval_seed in run.eval.seeds:
            start = None
            if arm.pretrained:
                if given is not None and given.spec.attention_kind == arm.attention_kind:
                    start = given
                elif (arm.attention_kind, eval_seed) in checkpoints:
                    start = checkpoints[(arm.attention_kind, eval_seed)]
                else:
                    if proxy is None:
                        proxy = load_source(run.data.proxy, "proxy", _geometry(run))
                    start = pretrain_and_save(
                        run,
                        arm.attention_kind,
                        eval_seed,
                        proxy,
                        Path(run.out_dir) / "pretrain" / arm.attention_kind / f"seed_{eval_seed}",
                    )
                    checkpoints[(arm.attention_kind, eval_seed)] = start

            logger.info(f"Cross-validating arm '{arm.name}' (seed {eval_seed})")
            spec = replace(run.model, attention_kind=arm.attention_kind)
            result = run_crossval(
                spec,
                target,
                start,
                replace(run.finetune, seed=eval_seed),
                k=run.eval.k,
                seed=eval_seed,
                jobs=jobs,
            )
            out = Path(run.out_dir) / "crossval" / arm.name / f"seed_{eval_seed}"
            write_crossval_outputs(
                result,
                out,
                run_meta={
                    "label": arm.name,
                    "block": run.model.backbone.label,
                    "arm": asdict(arm),
                    "seed": eval_seed,
                    "k": run.eval.k,
                    "n_samples": len(target),
                    "config": str(_config_selection(config)),
                },
            )
            click.echo(
                f"{arm.name} seed {eval_seed}: mae {result.aggregate['mae'].mean:.4f} "
                f"mse {result.aggregate['mse'].mean:.4f} -> '{out}'"
            )


@click.command("grad-check")
@config_option
@seed_option
@out_dir_option
@click.option("--tolerance", type=click.FloatRange(min=0, min_open=True), default=1e-4, show_default=True)
@click.option("--run-components", type=click.STRING, default=None, help="Comma separated components to run. Defaults to all.")
@click.option("--skip-components", type=click.STRING, default=None, help="Comma separated components to skip.")
@handle_errors
def grad_check(config, seed, out_dir, tolerance, run_components, skip_components):
    """Compare reverse-mode gradients with central differences; exit 1 if any exceeds the tolerance."""
    run = load_run_config(_config_selection(config), seed=seed, out_dir=out_dir)
    vp = validate_gradients(
        run.model,
        seed=seed if seed is not None else 0,
        tolerance=tolerance,
        protocol_args={
            "run_components": run_components.split(",") if run_components is not None else None,
            "skip_components": skip_components.split(",") if skip_components is not None else None,
        },
        defer_run=True,
    )
    vp.run()
    df = vp.report()["flag_table"]
    output = write_flag_table(df, Path(run.out_dir) / "grad_check" / "report.tsv")
    click.echo(f"Writing results to '{output}'")

    worst = vp.worst_code()
    if worst == FlagCode.INFO:
        logger.warning("No gradient checks ran; check --run-components / --skip-components")
    failed = df.loc[df["code_level"] >= FlagCode.RED.value]
    click.echo(f"{len(df.loc[df['code'] != FlagCode.SKIPPED])} checks run, {len(failed)} above tolerance")
    if worst >= FlagCode.RED:
        raise click.ClickException(
            "Gradient checks above tolerance:\n" + "\n".join(failed["message"])
        )


@click.command()
@click.option(
    "--in",
    "inputs",
    type=click.Path(exists=True, path_type=Path),
    multiple=True,
    required=True,
    help="Cross-validation output directory or aggregate.json; repeatable",
)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Markdown table output")
@handle_errors
def report(inputs, out):
    """Merge aggregate reports into one markdown table, one block per backbone."""
    output = write_report(inputs, out)
    click.echo(f"Wrote report to '{output}'")
