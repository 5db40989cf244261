""" Functions that parse configuration files """
from dataclasses import replace
import functools
from importlib import resources
import os
from pathlib import Path
from typing import Optional, Union

import yaml
from loguru import logger as log

from hybridca.config.schemas import RunConfig, validate_run_config
from hybridca.core.errors import ConfigError

ConfigVersion = tuple[str, str]
""" Denotes a specific prepackaged configuration file with (<name>,<version>), e.g. ("toy","Latest") """

ConfigSelection = Union[ConfigVersion, Path]
""" Specifies a configuration file, either prepackaged or by direct local path """

DEFAULT_CONFIG: ConfigVersion = ("toy", "Latest")
OUT_DIR_ENV = "HCA_OUT"
FALLBACK_OUT_DIR = "hca_out"


@functools.cache  # Allows repeated usage of this function without actually loading from file more than once
def load_config(config: ConfigSelection) -> dict:
    """Load a YAML (or JSON) configuration file. Allows loading from either:
      - A prepackaged configuration file using a tuple of ('config_name','config_version') (e.g. ('toy','Latest'))
      - A configuration file supplied as a Path object

    :param config: Configuration file to load
    :type config: Union[tuple[str,str], Path]
    :return: A dictionary of the full configuration
    :rtype: dict
    """
    match config:
        case tuple():
            conf_name, conf_version = config
            resource = resources.files("hybridca.config") / f"{conf_name}_v{conf_version}.yaml"
            if not resource.is_file():
                raise ConfigError("", f"no packaged configuration {conf_name}_v{conf_version}.yaml")
            log.info(f"Loading config (relative to package): {resource}")
            conf_full = yaml.safe_load(resource.read_text())
        case Path():
            log.info(f"Loading config (direct path): {config}")
            if not config.is_file():
                raise ConfigError("", f"configuration file {config} does not exist")
            try:
                with config.open() as f:
                    conf_full = yaml.safe_load(f)
            except yaml.YAMLError as exc:
                raise ConfigError("", f"{config} is not valid YAML/JSON: {exc}") from exc
        case _:
            raise TypeError(f"Unsupported config selection: {config!r}")

    log.debug(f"Final config loaded: {conf_full}")
    return conf_full if conf_full is not None else dict()


def resolve_out_dir(cli_value: Optional[Path], config_value: Optional[str]) -> Path:
    """--out-dir beats the config's out_dir, which beats $HCA_OUT, which beats ./hca_out"""
    if cli_value is not None:
        return Path(cli_value)
    if config_value:
        return Path(config_value)
    return Path(os.environ.get(OUT_DIR_ENV, FALLBACK_OUT_DIR))


def load_run_config(
    config: ConfigSelection = DEFAULT_CONFIG,
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
) -> RunConfig:
    """Validated run configuration; ``seed`` overrides the pretrain, finetune and eval seeds.

    Data source seeds are left alone so every run sees the same cohort.
    """
    run = validate_run_config(load_config(config))
    if seed is not None:
        run = replace(
            run,
            pretrain=replace(run.pretrain, seed=seed),
            finetune=replace(run.finetune, seed=seed),
            eval=replace(run.eval, seeds=(seed,)),
        )
    run = replace(run, out_dir=str(resolve_out_dir(out_dir, run.out_dir)))
    log.debug(f"Resolved run configuration: {run}")
    return run
