"""
This module contains functions for generating the training and benchmark plots.

Functions:
- loss_curve_plot: total loss per step with a moving average, one color per phase.
- pose_difference_plot: histograms of the yaw, pitch and roll differences of benchmark pairs.
"""
import matplotlib

# Set a matplotlib backend
matplotlib.use('Agg')

import matplotlib.pyplot as plt
import numpy as np

from FACEflow.modules.encoders import wrap_degrees

plt.rcParams.update({'font.size': 12})


def _set_plot_styling(ax, title, xlabel, ylabel):
    """Sets the common styling for all plots."""
    ax.set_title(title, wrap=True, pad=12)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.spines['top'].set_visible(False)
    ax.spines['right'].set_visible(False)


def _save_plot(fig, path):
    """Writes a figure as PNG and closes it."""
    fig.tight_layout()
    fig.savefig(path, format='png', dpi=100)
    plt.close(fig)
    return path


def moving_average(values, window):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return values
    window = max(1, min(window, len(values)))
    cumulative = np.cumsum(np.insert(values, 0, 0.0))
    head = cumulative[1:window] / np.arange(1, window)
    return np.concatenate([head, (cumulative[window:] - cumulative[:-window]) / window])


def loss_curve_plot(log, path, window=10):
    """
    Plots the total training loss of a training log.

    :param log: Training log columns as returned by ``read_training_log``.
    :type log: dict[str, list]
    :param path: Output PNG path.
    :type path: str
    :param window: Moving-average window in steps.
    :type window: int
    :return: ``path``.
    :rtype: str
    """
    fig, ax = plt.subplots(figsize=(10, 5))
    steps, totals, phases = (np.asarray(log.get(key, [])) for key in ('step', 'total', 'phase'))
    for phase in sorted(set(phases.tolist())):
        mask = phases == phase
        ax.plot(steps[mask], totals[mask], alpha=0.3, label=f'phase {phase}')
    ax.plot(steps, moving_average(totals, window), color='black', label=f'{window}-step average')
    if len(steps):
        ax.legend()
    _set_plot_styling(ax, 'Training loss', 'Step', 'Total loss')
    return _save_plot(fig, path)


def pose_difference_plot(benchmark, pose_of, path, bins=20):
    """
    Plots histograms of the absolute yaw, pitch and roll differences of benchmark pairs.

    :param benchmark: Selected pairs.
    :type benchmark: PairBenchmark
    :param pose_of: Maps a frame ref to its pose parameters.
    :param path: Output PNG path.
    :return: ``path``.
    :rtype: str
    """
    differences = np.zeros((len(benchmark.pairs), 3))
    for row, pair in enumerate(benchmark.pairs):
        delta = wrap_degrees(pose_of(pair.source).euler.double() - pose_of(pair.target).euler.double())
        differences[row] = delta.abs().numpy()

    fig, axes = plt.subplots(1, 3, figsize=(15, 4.5), sharey=True)
    for column, (ax, angle) in enumerate(zip(axes, ('Yaw', 'Pitch', 'Roll'))):
        ax.hist(differences[:, column], bins=bins, range=(0, 180))
        _set_plot_styling(ax, f'{angle} difference', 'Degrees', 'Pairs' if column == 0 else '')
    return _save_plot(fig, path)
