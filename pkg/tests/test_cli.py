import os

import pytest
from click.testing import CliRunner

from FACEflow.cli import cli
from FACEflow.modules.dataset import ingest
from FACEflow.modules.results import read_records, read_training_log


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    monkeypatch.delenv('FACEFLOW_OUTPUT_DIR', raising=False)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def frames(runner, tmp_path):
    result = runner.invoke(cli, ['synth-data', '--output', str(tmp_path / 'frames'), '--ids', '3', '--frames', '4',
                                 '--resolution', '8', '--expression-dim', '4', '--shape-dim', '2'])
    assert result.exit_code == 0, result.output
    return tmp_path / 'frames'


@pytest.fixture
def checkpoint(runner, tiny_run_config, tmp_path):
    config_path = tmp_path / 'tiny.yaml'
    tiny_run_config.dump(str(config_path))
    result = runner.invoke(cli, ['train', '--config', str(config_path), '--output', str(tmp_path / 'run'),
                                 '--no-progress'])
    assert result.exit_code == 0, result.output
    return tmp_path / 'run' / 'checkpoint-phase3'


def test_param_count_of_canonical_generator(runner):
    result = runner.invoke(cli, ['param-count'])
    assert result.exit_code == 0
    assert '300,529,280' in result.output
    assert '1,108,984,448' in result.output
    assert 'ratio: 3.69' in result.output


def test_param_count_of_scaled_generator(runner):
    result = runner.invoke(cli, ['param-count', '--arch', '32', '--channel-cap', '64'])
    assert result.exit_code == 0
    assert '32x32 generator, 7 controlled layers' in result.output


def test_usage_errors_exit_with_two(runner):
    assert runner.invoke(cli, ['param-count', '--arch', 'huge']).exit_code == 2
    assert runner.invoke(cli, ['distill']).exit_code == 2
    assert runner.invoke(cli, ['synth-data', '--ids', '0']).exit_code == 2


def test_synthetic_dataset_is_written(frames):
    dataset = ingest(str(frames))
    assert dataset.identity_ids == ['id000', 'id001', 'id002']
    assert len(dataset) == 12
    assert not [name for name in os.listdir(frames.parent) if name.startswith('.')]


def test_failures_exit_with_one(runner, tmp_path):
    (tmp_path / 'empty').mkdir()
    result = runner.invoke(cli, ['benchmark', '--dataset', str(tmp_path / 'empty'),
                                 '--output', str(tmp_path / 'benchmark')])
    assert result.exit_code == 1
    assert 'Error:' in result.output
    assert not (tmp_path / 'benchmark').exists()

    result = runner.invoke(cli, ['reenact', '--checkpoint', str(tmp_path / 'empty'), '--source', __file__,
                                 '--target', __file__, '--output', str(tmp_path / 'out')])
    assert result.exit_code == 1
    assert not (tmp_path / 'out').exists()


def test_benchmark_writes_pairs(runner, frames, tmp_path):
    result = runner.invoke(cli, ['benchmark', '--dataset', str(frames), '--threshold', '0',
                                 '--per-video', '2', '--output', str(tmp_path / 'benchmark')])
    assert result.exit_code == 0, result.output
    lines = (tmp_path / 'benchmark' / 'pairs.tsv').read_text().splitlines()
    assert len(lines) == 1 + 3 * 2
    assert (tmp_path / 'benchmark' / 'pose_differences.png').is_file()


def test_train_writes_run_directory(checkpoint):
    run = checkpoint.parent
    for name in ('checkpoint-phase1', 'checkpoint-phase2', 'checkpoint-phase3', 'training_log.tsv',
                 'run_config.yaml', 'loss_curve.png'):
        assert (run / name).exists()


def test_reenact_writes_one_frame_per_target(runner, checkpoint, frames, tmp_path):
    result = runner.invoke(cli, ['reenact', '--checkpoint', str(checkpoint),
                                 '--source', str(frames / 'id000' / '0000.png'),
                                 '--target', str(frames / 'id001'), '--output', str(tmp_path / 'out'),
                                 '--inversion'])
    assert result.exit_code == 0, result.output
    assert sorted(os.listdir(tmp_path / 'out')) == ['0000.png', '0001.png', '0002.png', '0003.png',
                                                   'inversion.png']


def test_evaluate_writes_reports(runner, checkpoint, tmp_path):
    result = runner.invoke(cli, ['evaluate', '--checkpoint', str(checkpoint), '--protocol', 'self',
                                 '--output', str(tmp_path / 'evaluation')])
    assert result.exit_code == 0, result.output
    records = read_records(str(tmp_path / 'evaluation' / 'self_records.tsv'))
    assert {record.video for record in records} == {'id000', 'id001', 'id002'}
    assert (tmp_path / 'evaluation' / 'self_summary.tsv').is_file()
    assert (tmp_path / 'evaluation' / 'results.db').is_file()
    assert 'self protocol' in result.output


def test_output_base_directory_keeps_inputs(runner, monkeypatch, tmp_path):
    monkeypatch.setenv('FACEFLOW_OUTPUT_DIR', str(tmp_path / 'out'))
    result = runner.invoke(cli, ['synth-data', '--ids', '3', '--frames', '4', '--resolution', '8',
                                 '--expression-dim', '4', '--shape-dim', '2'])
    assert result.exit_code == 0, result.output
    dataset_path = tmp_path / 'out' / 'synthetic'
    result = runner.invoke(cli, ['benchmark', '--dataset', str(dataset_path), '--threshold', '0'])
    assert result.exit_code == 0, result.output
    assert len(ingest(str(dataset_path))) == 12
    assert (tmp_path / 'out' / 'benchmark' / 'pairs.tsv').is_file()

    result = runner.invoke(cli, ['benchmark', '--dataset', str(tmp_path / 'out'), '--threshold', '0'])
    assert result.exit_code == 1
    assert 'overlaps --dataset' in result.output
    assert len(ingest(str(dataset_path))) == 12


def test_overlapping_output_is_refused(runner, frames, checkpoint, tmp_path):
    result = runner.invoke(cli, ['benchmark', '--dataset', str(frames), '--output', str(frames)])
    assert result.exit_code == 1
    assert 'overlaps --dataset' in result.output
    assert len(ingest(str(frames))) == 12

    run = checkpoint.parent
    result = runner.invoke(cli, ['evaluate', '--checkpoint', str(checkpoint), '--output', str(run)])
    assert result.exit_code == 1
    assert 'overlaps --checkpoint' in result.output
    assert checkpoint.is_dir()

    result = runner.invoke(cli, ['reenact', '--checkpoint', str(checkpoint),
                                 '--source', str(frames / 'id000' / '0000.png'),
                                 '--target', str(frames / 'id001'), '--output', str(frames / 'id001' / 'out')])
    assert result.exit_code == 1
    assert 'overlaps --target' in result.output
    assert not (frames / 'id001' / 'out').exists()


def test_resume_inside_run_directory_keeps_the_run(runner, checkpoint, tmp_path):
    run = checkpoint.parent
    result = runner.invoke(cli, ['train', '--config', str(tmp_path / 'tiny.yaml'), '--output', str(run),
                                 '--resume', str(run / 'checkpoint-phase1'), '--no-progress'])
    assert result.exit_code == 0, result.output
    for phase in (1, 2, 3):
        assert (run / f'checkpoint-phase{phase}').is_dir()
    log = read_training_log(str(run / 'training_log.tsv'))
    assert log['step'] == [1, 2, 3, 4, 5, 6]
    assert log['phase'] == [1, 1, 2, 2, 3, 3]


def test_evaluate_summary_has_frechet_score(runner, checkpoint, tmp_path):
    result = runner.invoke(cli, ['evaluate', '--checkpoint', str(checkpoint), '--protocol', 'self',
                                 '--output', str(tmp_path / 'evaluation')])
    assert result.exit_code == 0, result.output
    rows = (tmp_path / 'evaluation' / 'self_summary.tsv').read_text().splitlines()
    frechet = next(row.split('\t') for row in rows if row.startswith('frechet'))
    assert float(frechet[1]) >= 0.0
    assert frechet[2] == '9'
