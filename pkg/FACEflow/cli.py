"""
Command line interface of FACEflow.

Commands: train, reenact, evaluate, benchmark, param-count and synth-data. Commands that write an
output directory build it next to its destination and move it into place only when they succeed.
Exit codes: 0 on success, 1 when a command fails, 2 on usage errors.
"""
import functools
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import click
import torch

from FACEflow import __version__
from FACEflow.app import create_app, load_dataset, load_reenactor, prepare_pose_oracle
from FACEflow.config import Config, RunConfig, resolve_output_dir
from FACEflow.modules.dataset import IMAGE_EXTENSIONS, generate_synthetic_dataset, image_to_tensor, ingest, \
    read_frame, write_frame
from FACEflow.modules.errors import InsufficientDataError
from FACEflow.modules.generator import canonical_arch, scaled_arch
from FACEflow.modules.hypernet import BlockType, default_assignment, param_breakdown
from FACEflow.modules.metrics import build_cross_pairs, build_large_pose_benchmark, evaluate_cross, evaluate_self, \
    self_reenactment_frechet
from FACEflow.modules.plots import pose_difference_plot
from FACEflow.modules.results import format_summary, store_records_in_db, summarize_records, write_benchmark, \
    write_records, write_summary


def _is_within(path, directory):
    path, directory = Path(path).resolve(), Path(directory).resolve()
    return path == directory or directory in path.parents


def check_destination(destination, **inputs):
    """
    Refuses an output directory that overlaps one of the command's inputs.

    :param destination: Output directory of the command.
    :param inputs: Input paths by option name; ``None`` values are ignored.
    :raises ValueError: If the destination is, contains or lies inside an input.
    """
    destination = Path(destination).resolve()
    for option, path in inputs.items():
        if path is None:
            continue
        path = Path(path).resolve()
        if _is_within(path, destination) or _is_within(destination, path):
            raise ValueError(f'Output directory {destination} overlaps --{option.replace("_", "-")} {path}; '
                             f'choose another output directory')


@contextmanager
def staged_directory(destination, keep_existing=False):
    """
    Yields a staging directory that replaces ``destination`` only if the block succeeds.

    With ``keep_existing`` the staging directory starts as a copy of ``destination``.
    """
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f'.{destination.name}-', dir=destination.parent))
    try:
        if keep_existing and destination.is_dir():
            shutil.copytree(destination, staging, dirs_exist_ok=True)
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if destination.exists():
        shutil.rmtree(destination)
    os.replace(staging, destination)


def handle_errors(command):
    """Turns runtime failures into a one-line message and exit code 1."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ValueError, RuntimeError, OSError) as e:
            logging.debug('Command failed', exc_info=True)
            click.echo(f'Error: {e}', err=True)
            sys.exit(1)
    return wrapper


def _list_frames(path):
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    return [path]


@click.group()
@click.version_option(__version__)
@click.option('--verbose', is_flag=True, help='Log debug messages.')
def cli(verbose):
    """FACEflow: one-shot face reenactment with a generator-steering hypernetwork."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=Config.LOG_FORMAT)


@cli.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help='YAML run config; configuration defaults when omitted.')
@click.option('--output', type=click.Path(file_okay=False), help='Run directory.')
@click.option('--resume', 'resume_from', type=click.Path(exists=True, file_okay=False),
              help='Checkpoint to continue training from.')
@click.option('--no-progress', is_flag=True, help='Hide progress bars.')
@handle_errors
def train(config_path, output, resume_from, no_progress):
    """Run the training curriculum of a run config."""
    run_config = RunConfig.load(config_path) if config_path else RunConfig.defaults()
    destination = resolve_output_dir(output or run_config.output_dir, default_name=run_config.name)
    in_place = resume_from is not None and _is_within(resume_from, destination)
    if not in_place:
        check_destination(destination, config=config_path, resume=resume_from)
    app = create_app(run_config.with_output_dir(destination))
    # Resuming inside the run directory continues that run: its checkpoints and log are kept
    with staged_directory(destination, keep_existing=in_place) as staging:
        final = app.train(str(staging), resume_from=resume_from, progress=not no_progress)
    click.echo(f'Final checkpoint: {destination / Path(final).name}')


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--source', required=True, type=click.Path(exists=True, dir_okay=False), help='The one source frame.')
@click.option('--target', required=True, type=click.Path(exists=True), help='Target frame or directory of frames.')
@click.option('--output', type=click.Path(file_okay=False), help='Directory for the reenacted frames.')
@click.option('--inversion', is_flag=True, help='Also write the plain inversion of the source.')
@handle_errors
@torch.no_grad()
def reenact(checkpoint, source, target, output, inversion):
    """Reenact one source frame with the pose of every target frame."""
    destination = resolve_output_dir(output, default_name='reenacted')
    check_destination(destination, checkpoint=checkpoint, source=source, target=target)
    model, _ = load_reenactor(checkpoint)
    source_image = image_to_tensor(read_frame(source))
    targets = _list_frames(target)
    if not targets:
        raise ValueError(f'No target frames in {target}')
    with staged_directory(destination) as staging:
        for path in targets:
            image = model.reenact(source_image, image_to_tensor(read_frame(path)))[0]
            write_frame(image, staging / f'{path.stem}.png')
        if inversion:
            write_frame(model.reconstruct(source_image)[0], staging / 'inversion.png')
    click.echo(f'Wrote {len(targets)} reenacted frames to {destination}')


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--dataset', 'dataset_path', type=click.Path(exists=True, file_okay=False),
              help="Evaluation frames; the checkpoint's training dataset when omitted.")
@click.option('--protocol', type=click.Choice(['self', 'cross', 'both']), default='both', show_default=True)
@click.option('--output', type=click.Path(file_okay=False), help='Report directory.')
@click.option('--include-source', is_flag=True, help='Also reenact the source frame of each video (self protocol).')
@click.option('--per-video', default=5, show_default=True, help='Cross pairs per video.')
@handle_errors
def evaluate(checkpoint, dataset_path, protocol, output, include_source, per_video):
    """Evaluate a checkpoint with the self and/or cross reenactment protocol."""
    destination = resolve_output_dir(output, default_name='evaluation')
    check_destination(destination, checkpoint=checkpoint, dataset=dataset_path)
    model, run_config = load_reenactor(checkpoint)
    dataset = ingest(dataset_path) if dataset_path else load_dataset(run_config)
    prepare_pose_oracle(model, dataset, calibrate=False)

    run = Path(checkpoint).resolve().name
    with staged_directory(destination) as staging:
        for name in (['self', 'cross'] if protocol == 'both' else [protocol]):
            if name == 'self':
                records = evaluate_self(model, dataset, include_source=include_source, progress=True)
            else:
                records = evaluate_cross(model, build_cross_pairs(dataset, per_video), dataset, progress=True)
            summary = summarize_records(records)
            if name == 'self':
                try:
                    summary['frechet'] = self_reenactment_frechet(model, dataset, include_source=include_source)
                except InsufficientDataError as e:
                    logging.warning(f'Skipping the Fréchet score: {e}')
            write_records(staging / f'{name}_records.tsv', records)
            write_summary(staging / f'{name}_summary.tsv', summary)
            store_records_in_db(str(staging / 'results.db'), records, run, name)
            click.echo(f'{name} protocol ({len(records)} records)\n{format_summary(summary)}')


@cli.command()
@click.option('--dataset', 'dataset_path', required=True, type=click.Path(exists=True, file_okay=False))
@click.option('--checkpoint', type=click.Path(exists=True, file_okay=False),
              help='Estimate poses with this model when the dataset has no pose metadata.')
@click.option('--threshold', default=15.0, show_default=True, help='Minimum pose distance in degrees (exclusive).')
@click.option('--per-video', default=5, show_default=True, help='Maximum pairs per video.')
@click.option('--output', type=click.Path(file_okay=False), help='Benchmark directory.')
@handle_errors
@torch.no_grad()
def benchmark(dataset_path, checkpoint, threshold, per_video, output):
    """Select large-pose source/target pairs from a dataset."""
    destination = resolve_output_dir(output, default_name='benchmark')
    check_destination(destination, dataset=dataset_path, checkpoint=checkpoint)
    dataset = ingest(dataset_path)
    pose_of = dataset.pose_params
    if checkpoint:
        model, _ = load_reenactor(checkpoint, dataset)

        def pose_of(ref):
            return model.encoders.extract_pose_params(dataset.load(ref)).row(0)

    selected = build_large_pose_benchmark(dataset, pose_of, threshold, per_video)
    with staged_directory(destination) as staging:
        write_benchmark(staging / 'pairs.tsv', selected)
        if selected.pairs:
            pose_difference_plot(selected, pose_of, staging / 'pose_differences.png')
    click.echo(f'Selected {len(selected.pairs)} pairs, written to {destination}')


@cli.command('param-count')
@click.option('--arch', 'arch_name', default='canonical', show_default=True,
              help='"canonical" or an output resolution such as 32.')
@click.option('--channel-cap', default=512, show_default=True)
@click.option('--shared-hidden', default=128, show_default=True)
@click.option('--specific-hidden', default=256, show_default=True)
@handle_errors
def param_count_command(arch_name, channel_cap, shared_hidden, specific_hidden):
    """Print the hypernetwork parameter counts with and without shared blocks."""
    if arch_name == 'canonical':
        arch = canonical_arch()
    elif arch_name.isdigit():
        arch = scaled_arch(int(arch_name), channel_cap)
    else:
        raise click.BadParameter(f'"{arch_name}" is neither "canonical" nor a resolution', param_hint='--arch')
    assignment = default_assignment(arch)
    counts = {sharing: param_breakdown(assignment, arch, sharing, shared_hidden=shared_hidden,
                                       specific_hidden=specific_hidden) for sharing in (True, False)}
    click.echo(f'{arch.output_resolution}x{arch.output_resolution} generator, {len(arch.conv_layers)} controlled layers '
               f'({len(assignment.indices(BlockType.SHARED))} shared, '
               f'{len(assignment.indices(BlockType.LAYER_SPECIFIC))} layer-specific)')
    click.echo(f'{"sharing":<10}{"shared blocks":>16}{"heads":>16}{"specific":>16}{"total":>16}')
    for sharing, count in counts.items():
        click.echo(f'{"on" if sharing else "off":<10}{count.shared_blocks:>16,}{count.shared_heads:>16,}'
                   f'{count.specific_blocks:>16,}{count.total:>16,}')
    click.echo(f'shared: {counts[True].total:.3e}  unshared: {counts[False].total:.3e}  '
               f'ratio: {counts[False].total / counts[True].total:.2f}')


@cli.command('synth-data')
@click.option('--output', type=click.Path(file_okay=False), help='Dataset directory.')
@click.option('--ids', default=10, show_default=True, type=click.IntRange(min=1))
@click.option('--frames', default=20, show_default=True, type=click.IntRange(min=1))
@click.option('--resolution', default=32, show_default=True, type=click.IntRange(min=8))
@click.option('--seed', default=7, show_default=True)
@click.option('--expression-dim', default=50, show_default=True, type=click.IntRange(min=1))
@click.option('--shape-dim', default=8, show_default=True, type=click.IntRange(min=1))
@handle_errors
def synth_data(output, ids, frames, resolution, seed, expression_dim, shape_dim):
    """Write a synthetic dataset with ground-truth pose parameters."""
    dataset = generate_synthetic_dataset(ids, frames, resolution, seed, expression_dim, shape_dim)
    destination = resolve_output_dir(output, default_name='synthetic')
    with staged_directory(destination) as staging:
        dataset.save(str(staging))
    click.echo(f'Wrote {len(dataset)} frames of {ids} identities to {destination}')
