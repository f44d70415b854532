"""Operator CLI: one subcommand per pipeline stage.

All checkpoint/basis/port options also read SLGAN_-prefixed environment
variables (SLGAN_CHECKPOINT, SLGAN_BASIS, SLGAN_DATASET, SLGAN_HOST,
SLGAN_PORT, SLGAN_UI_DIR, SLGAN_THREADS).
"""
from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from .blendshape import (
    CONSTRAINT_VARIANTS,
    ParameterVector,
    build_sparse_basis,
    clamp_normalized,
    interpolate_parameters,
    read_basis,
    write_basis,
)
from .engine import InferenceEngine
from .synth import (
    build_landmark_difference_matrix,
    generate_dataset,
    image_to_png_bytes,
    load_manifest,
    load_png_image,
    manifest_hash,
)

CHECKPOINT_OPT = click.option(
    "--checkpoint", envvar="SLGAN_CHECKPOINT", required=True, type=click.Path(exists=True)
)
BASIS_OPT = click.option(
    "--basis", envvar="SLGAN_BASIS", required=True, type=click.Path(exists=True)
)


@click.group()
def main():
    """Slider-driven face deformation editing."""


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--identities", default=50, show_default=True)
@click.option("--per-identity", default=40, show_default=True)
@click.option("--paired-fraction", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=64, show_default=True)
@click.option("--params", "n_params", default=8, show_default=True)
@click.option("--dist", default="uniform", type=click.Choice(["uniform", "truncated_gaussian"]))
def gen_data(out, identities, per_identity, paired_fraction, seed, size, n_params, dist):
    """Render a synthetic ground-truth dataset."""
    manifest = generate_dataset(
        out, identities, per_identity, paired_fraction, seed,
        size=(size, size), n_params=n_params, param_dist=dist,
    )
    click.echo(f"manifest: {manifest}")
    click.echo(f"hash: {manifest_hash(manifest)}")


@main.command("build-basis")
@click.option("--dataset", envvar="SLGAN_DATASET", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--components", default=8, show_default=True)
@click.option("--sparsity", default=1e-3, show_default=True)
@click.option("--variant", default="abs_max_one", type=click.Choice(list(CONSTRAINT_VARIANTS)))
@click.option("--max-iters", default=500, show_default=True)
@click.option("--tol", default=1e-8, show_default=True)
@click.option("--kind", default="expression", show_default=True)
def build_basis(dataset, out, components, sparsity, variant, max_iters, tol, kind):
    """Build a sparse blendshape basis from a dataset's landmark differences."""
    D = build_landmark_difference_matrix(dataset)
    basis, _, trace = build_sparse_basis(
        D, h=components, sparsity_weight=sparsity, variant=variant,
        max_iters=max_iters, tol=tol, basis_kind=kind,
    )
    write_basis(basis, out)
    click.echo(f"basis written: {out} (objective {trace[0]:.6g} -> {trace[-1]:.6g}, "
               f"{len(trace) - 1} iterations)")
    if basis.degenerate:
        click.echo("warning: degenerate all-zero difference data", err=True)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--resume", type=click.Path(exists=True))
def train_cmd(config_path, out, resume):
    """Run the two-phase training loop from a TOML config."""
    from .trainer import TrainConfig, train

    config = TrainConfig.from_file(config_path)
    result = train(config, out, resume=resume)
    if result.aborted:
        raise click.ClickException(f"training aborted: {result.abort_reason}")
    click.echo(f"checkpoint: {result.checkpoint_path}")
    click.echo(f"metrics: {result.metrics_path}")


@main.command("train-embedder")
@click.option("--out", required=True, type=click.Path())
@click.option("--identities", default=24, show_default=True)
@click.option("--per-identity", default=24, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=8, show_default=True)
def train_embedder(out, identities, per_identity, seed, epochs):
    """Pretrain the convolutional identity embedder on synthetic faces."""
    import torch

    from .networks import pretrain_conv_embedder

    model = pretrain_conv_embedder(
        n_identities=identities, per_identity=per_identity, seed=seed, epochs=epochs
    )
    torch.save(model.state_dict(), out)
    click.echo(f"embedder weights: {out}")


def _parse_param_options(n, params, param, zero):
    vec = np.zeros(n)
    if params:
        values = [float(v) for v in params.split(",")]
        if len(values) != n:
            raise click.ClickException(f"--params needs {n} comma-separated values")
        vec = np.asarray(values)
    for item in param:
        key, _, value = item.partition("=")
        try:
            idx = int(key)
            vec[idx] = float(value)
        except (ValueError, IndexError):
            raise click.ClickException(f"bad --param {item!r} (use k=v with 0 <= k < {n})")
    if zero:
        vec = np.zeros(n)
    return vec


def _write_image(path, image):
    Path(path).write_bytes(image_to_png_bytes(image))


@main.command("edit")
@CHECKPOINT_OPT
@BASIS_OPT
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--params", default="", help="comma-separated full vector")
@click.option("--param", multiple=True, help="single slider k=v (repeatable)")
@click.option("--zero", is_flag=True, help="neutralize: all parameters zero")
@click.option("--sweep", type=int, default=None, help="sweep one parameter index")
@click.option("--steps", default=11, show_default=True)
def edit_cmd(checkpoint, basis, image_path, out, params, param, zero, sweep, steps):
    """Edit one image to target slider values (or sweep one slider)."""
    engine = InferenceEngine.from_files(checkpoint, basis)
    image = load_png_image(image_path)
    vec = _parse_param_options(engine.n_params, params, param, zero)
    if sweep is None:
        result = engine.edit(image, vec)
        _write_image(out, result.image)
        click.echo(f"wrote {out}")
        return
    if not 0 <= sweep < engine.n_params:
        raise click.ClickException(f"--sweep index out of range 0..{engine.n_params - 1}")
    stem = Path(out)
    for i, value in enumerate(np.linspace(-1.0, 1.0, steps)):
        vec_i = vec.copy()
        vec_i[sweep] = value
        result = engine.edit(image, vec_i)
        path = stem.with_name(f"{stem.stem}_{i:03d}{stem.suffix or '.png'}")
        _write_image(path, result.image)
    click.echo(f"wrote {steps} sweep images next to {out}")


@main.command("transfer")
@CHECKPOINT_OPT
@BASIS_OPT
@click.option("--source", required=True, type=click.Path(exists=True))
@click.option("--target", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--interpolate", "interp_steps", type=int, default=None)
@click.option("--param-track", type=click.Path(exists=True),
              help="JSON-lines file of parameter vectors; emits one frame each")
def transfer_cmd(checkpoint, basis, source, target, out, interp_steps, param_track):
    """Transfer the target image's regressed expression onto the source."""
    engine = InferenceEngine.from_files(checkpoint, basis)
    src = load_png_image(source)
    stem = Path(out)
    if param_track:
        lines = Path(param_track).read_text().splitlines()
        for i, line in enumerate(lines):
            vec = np.asarray(json.loads(line), dtype=float)
            result = engine.edit(src, vec)
            _write_image(stem.with_name(f"{stem.stem}_{i:04d}{stem.suffix or '.png'}"), result.image)
        click.echo(f"wrote {len(lines)} frames")
        return
    if target is None:
        raise click.ClickException("provide --target or --param-track")
    trg = load_png_image(target)
    p_trg = clamp_normalized(ParameterVector(engine.regress(trg)))
    if interp_steps is None:
        result = engine.edit(src, p_trg.values)
        _write_image(out, result.image)
        click.echo(f"wrote {out}")
        return
    p_src = clamp_normalized(ParameterVector(engine.regress(src)))
    for i in range(interp_steps):
        a = 1.0 - i / max(interp_steps - 1, 1)  # a=1 shows the source expression
        p = interpolate_parameters(p_src, p_trg, a)
        result = engine.edit(src, p.values)
        _write_image(stem.with_name(f"{stem.stem}_{i:03d}{stem.suffix or '.png'}"), result.image)
    click.echo(f"wrote {interp_steps} interpolation frames")


@main.command("eval")
@CHECKPOINT_OPT
@BASIS_OPT
@click.option("--dataset", envvar="SLGAN_DATASET", required=True, type=click.Path(exists=True))
@click.option("--mode", default="vs_truth",
              type=click.Choice(["vs_truth", "consistency", "transfer", "neutralize"]))
@click.option("--out", type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--limit", default=0, show_default=True, help="cap record count (0 = all)")
@click.option("--grids", type=click.Path(), help="directory for contact sheets")
def eval_cmd(checkpoint, basis, dataset, mode, out, seed, limit, grids):
    """Quantitative evaluation; emits an EvalReport as JSON."""
    from . import evaluation as ev

    engine = InferenceEngine.from_files(checkpoint, basis)
    _, records = load_manifest(dataset)
    if limit:
        records = records[:limit]
    if mode in ("vs_truth", "consistency"):
        report = ev.regression_error_report(engine, records, mode=mode, seed=seed)
    elif mode == "transfer":
        half = len(records) // 2
        report = ev.transfer_harness(
            engine, records[:half], records[half : 2 * half],
            out_dir=Path(grids) if grids else None,
        )
    else:
        report = ev.neutralize(engine, records, out_dir=Path(grids) if grids else None)
    text = report.to_json()
    if out:
        Path(out).write_text(text + "\n")
    click.echo(text)


@main.command("serve")
@CHECKPOINT_OPT
@BASIS_OPT
@click.option("--host", envvar="SLGAN_HOST", default="127.0.0.1", show_default=True)
@click.option("--port", envvar="SLGAN_PORT", default=8321, show_default=True, type=int)
@click.option("--dataset", envvar="SLGAN_DATASET", type=click.Path(exists=True))
@click.option("--ui-dir", envvar="SLGAN_UI_DIR", type=click.Path(exists=True))
def serve_cmd(checkpoint, basis, host, port, dataset, ui_dir):
    """Serve the HTTP inference API (and the slider UI when --ui-dir is set)."""
    import uvicorn

    from .service import create_app

    engine = InferenceEngine.from_files(checkpoint, basis)
    app = create_app(engine, dataset_manifest=dataset, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
