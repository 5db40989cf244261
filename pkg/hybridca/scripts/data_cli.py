import json
from pathlib import Path
import shutil

import click
from loguru import logger

from hybridca.core.loaders import MANIFEST_NAME, TENSOR_DIR, write_manifest
from hybridca.data.synthetic import generator_meta, synth_proxy, synth_target

META_NAME = "dataset_meta.json"


def _clear_outputs(out: Path):
    """Remove only what a previous synth-data run wrote."""
    for name in (MANIFEST_NAME, META_NAME):
        (out / name).unlink(missing_ok=True)
    if (out / TENSOR_DIR).is_dir():
        shutil.rmtree(out / TENSOR_DIR)


@click.command("synth-data")
@click.option("--kind", type=click.Choice(["proxy", "target"]), required=True, help="Multi-label proxy set or severity target set")
@click.option("--seed", type=click.INT, default=0, show_default=True)
@click.option("--n", "n_samples", type=click.IntRange(min=1), required=True, help="Number of samples")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory")
@click.option("--image-size", type=click.IntRange(min=4), default=32, show_default=True, help="Square image side")
@click.option("--noise-sd", type=click.FloatRange(min=0), default=0.0, show_default=True, help="Target score noise as a fraction of each score range")
@click.option("--force", is_flag=True, help="Overwrite a previous dataset in a non-empty output directory")
def synth_data(kind, seed, n_samples, out, image_size, noise_sd, force):
    """Generate a synthetic dataset: manifest, tensor files and dataset_meta.json."""
    if out.exists() and any(out.iterdir()):
        if not force:
            raise click.ClickException(f"Output directory '{out}' is not empty, use --force to overwrite")
        logger.warning(f"Overwriting dataset in {out}")
        _clear_outputs(out)

    geometry = (1, image_size, image_size)
    if kind == "proxy":
        dataset = synth_proxy(seed, n_samples, geometry=geometry)
    else:
        dataset = synth_target(seed, n_samples, geometry=geometry, noise_sd=noise_sd)

    manifest = write_manifest(dataset, out)
    meta = generator_meta(kind, seed, n_samples, geometry, noise_sd, dataset.score_ranges)
    (out / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))
    click.echo(f"Wrote {len(dataset)} {kind} samples to '{manifest}'")
