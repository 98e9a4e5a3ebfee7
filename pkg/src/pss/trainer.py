"""Sequential task training with drift-triggered splitting.

One task's lifecycle: open its output node, snapshot the hidden
weights, train with minibatch SGD whose loss gradient enters only at
that output, then at every epoch end run a splitting round and escalate
the drift threshold. The freeze scope decides how much of the old
network may move:

``hybrid`` (default)
    everything trains until the first split of the task, then only the
    current generation keeps training;
``full_truncated``
    everything structurally present trains for the whole task;
``pss_only``
    only the current generation trains from the first step on. Old
    generations never move, so earlier tasks' logits stay bit-identical.

The baseline runner trains the same architecture with splitting
disabled and everything trainable, which is plain multi-head
fine-tuning and forgets accordingly.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import RunReport, multiclass_accuracy, task_accuracy
from .numerics import (
    backward_truncated,
    init_velocity,
    pad_velocity,
    selected_bce,
    sgd_step,
)
from .plasticity import FREEZE_SCOPES, PlasticNetwork

log = logging.getLogger(__name__)

SCOPE_CHOICES = ("hybrid",) + FREEZE_SCOPES


def rng_for(seed, *key):
    """Independent generator derived from the master seed and a key path."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


@dataclass
class TrainerConfig:
    """Hyperparameters for one lifelong run. Defaults follow the
    two-hidden-layer 312/128 setup; sigma and delta must provide one
    value per hidden layer (or a scalar for all)."""

    hidden_sizes: tuple = (312, 128)
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs_per_task: int = 5
    sigma: tuple = (0.3, 0.25)
    delta: tuple = (0.0015, 0.25)
    freeze_scope: str = "hybrid"
    split_init: str = "drifted"
    magnitude_freeze_threshold: float = 0.0
    leaky_slope: float = 0.01
    seed: int = 0
    splitting_enabled: bool = True
    split_on_first_task: bool = False

    def validate(self):
        if not self.hidden_sizes or any(int(h) < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be non-empty positive ints")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ValueError("batch_size and epochs_per_task must be >= 1")
        if self.freeze_scope not in SCOPE_CHOICES:
            raise ValueError(f"freeze_scope must be one of {SCOPE_CHOICES}")
        if self.split_init not in ("drifted", "reverted"):
            raise ValueError("split_init must be 'drifted' or 'reverted'")
        if self.magnitude_freeze_threshold < 0:
            raise ValueError("magnitude_freeze_threshold must be >= 0")
        return self

    def to_dict(self):
        def plain(v):
            if isinstance(v, tuple):
                return list(v)
            return v
        return {k: plain(v) for k, v in self.__dict__.items()}


@dataclass
class TaskReport:
    """Per-task training record."""

    task: int
    epoch_losses: list = field(default_factory=list)
    splits_per_epoch: list = field(default_factory=list)
    split_count: int = 0
    filler_count: int = 0
    hidden_sizes_after: list = field(default_factory=list)
    parameter_count_after: int = 0


def _initial_scope(config):
    return "full_truncated" if config.freeze_scope == "hybrid" \
        else config.freeze_scope


def train_task(net, task_data, config, task_index=None):
    """Train one binary task end to end on an already-built network."""
    config.validate()
    if task_index is None:
        task_index = net.task + 1
    started = time.perf_counter()
    net.grow_output(task_index)
    net.take_snapshot()
    net.attach_schedule(config.sigma, config.delta)
    net.set_structural_freeze(_initial_scope(config))
    if config.magnitude_freeze_threshold > 0:
        frozen = net.freeze_small_weights(config.magnitude_freeze_threshold)
        log.debug("task %d: %d small weights frozen", task_index, frozen)
    velocity = init_velocity(net.layers)
    out_index = net.current_output_index()
    shuffle_rng = rng_for(config.seed, 1, task_index)
    n = len(task_data)
    report = TaskReport(task=task_index)

    rounds_active = config.splitting_enabled and (
        task_index > 0 or config.split_on_first_task)

    for epoch in range(config.epochs_per_task):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = task_data.x[idx], task_data.y[idx]
            trace = net.trace(xb)
            loss_sum += selected_bce(trace.output, [out_index], yb) * len(idx)
            grads = backward_truncated(net.layers, trace, yb, [out_index])
            velocity = sgd_step(net.layers, grads, config.learning_rate,
                                config.momentum, velocity)
        report.epoch_losses.append(loss_sum / n)

        if rounds_active:
            round_report = net.splitting_round(epoch, config.split_init)
            report.splits_per_epoch.append(round_report.total_splits)
            if round_report.total_splits:
                report.split_count += round_report.total_splits
                report.filler_count += round_report.total_fillers
                velocity = pad_velocity(velocity, net.layers)
                for tag in round_report.splits:
                    velocity[tag.layer].weights[tag.index, :] = 0.0
                    velocity[tag.layer].bias[tag.index] = 0.0
                if config.freeze_scope == "hybrid":
                    net.set_structural_freeze("pss_only")
                log.info("task %d epoch %d: %d splits, %d fillers",
                         task_index, epoch, round_report.total_splits,
                         round_report.total_fillers)
        else:
            report.splits_per_epoch.append(0)
        net.schedule.escalate()

    report.hidden_sizes_after = net.hidden_sizes()
    report.parameter_count_after = net.parameter_count()
    log.info("task %d done in %.2fs: sizes %s, final loss %.4f",
             task_index, time.perf_counter() - started,
             report.hidden_sizes_after, report.epoch_losses[-1])
    return report


def evaluate_boundary(net, stream, upto):
    """Binary accuracy of every task trained so far, plus multiclass."""
    row = [task_accuracy(net, stream.tasks[j].test, j) for j in range(upto + 1)]
    mc = multiclass_accuracy(net, stream.pool_x, stream.pool_y)
    return row, mc


def run_lifelong(stream, config, mode="pss"):
    """Train every task in the stream in order; returns (net, report)."""
    config.validate()
    if not len(stream):
        raise ValueError("empty task stream")
    n_features = stream.tasks[0].train.x.shape[1]
    net = PlasticNetwork.new(n_features, list(config.hidden_sizes),
                             rng_for(config.seed, 0), config.leaky_slope)
    report = RunReport(mode=mode, seed=config.seed, config=config.to_dict())
    for task in stream:
        task_report = train_task(net, task.train, config, task.index)
        problems = net.check_masks()
        if problems:
            raise AssertionError(
                f"mask invariants violated after task {task.index}: {problems}")
        row, mc = evaluate_boundary(net, stream, task.index)
        report.accuracy_matrix.append(row)
        report.multiclass.append(mc)
        report.hidden_sizes.append(task_report.hidden_sizes_after)
        report.parameter_counts.append(task_report.parameter_count_after)
        report.split_counts.append(task_report.split_count)
        report.filler_counts.append(task_report.filler_count)
        report.epoch_losses.append(task_report.epoch_losses)
    return net, report


def run_baseline_finetune(stream, config):
    """Same architecture, no splitting, nothing frozen: the forgetful
    baseline every lifelong method is measured against."""
    baseline_cfg = replace(config, splitting_enabled=False,
                           freeze_scope="full_truncated")
    return run_lifelong(stream, baseline_cfg, mode="baseline-finetune")
