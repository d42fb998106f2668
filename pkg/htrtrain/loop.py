"""Training loop with epoch-boundary curvature metrics."""
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from adcore.autodiff import cross_entropy, forward_loss, gradient
from dataio.datasets import BatchPlan, batches, probe_set
from hesslens.exceptions import DivergenceError
from hessops.operators import hessian_op, layer_hessian_op
from nnmodels.networks import build
from spectral.lanczos import extreme_eigenvalues
from spectral.trace import hutchinson_trace

from .checkpoints import Checkpoint, save_checkpoint
from .optim import sgd_step
from .regularizer import htr_penalty_gradient, select_layers, step_seed

logger = logging.getLogger(__name__)

# Positional readers rely on this prefix; new columns go into TAIL_COLUMNS.
BASE_COLUMNS = [
    'epoch', 'train_loss', 'train_acc', 'test_loss', 'test_acc',
    'lambda_max_full', 'trace_full', 'trace_stderr',
]
TAIL_COLUMNS = ['lambda_min_full', 'trace_layer_sum', 'closest_layer', 'wall_clock', 'config_hash', 'seed']


def layer_columns(num_layers):
    columns = []
    for l in range(num_layers):
        columns += [f'lambda_max_l{l}', f'trace_l{l}', f'trace_stderr_l{l}']
    return columns


@dataclass
class RunLog:
    config_hash: str
    seed: int
    num_layers: int
    records: list = field(default_factory=list)

    @property
    def columns(self):
        return BASE_COLUMNS + layer_columns(self.num_layers) + TAIL_COLUMNS

    def append(self, record):
        if self.records and record['epoch'] <= self.records[-1]['epoch']:
            raise ValueError(f'epoch {record["epoch"]} does not follow {self.records[-1]["epoch"]}')
        record = dict(record, config_hash=self.config_hash, seed=self.seed)
        self.records.append(record)

    def column(self, name):
        return [record.get(name) for record in self.records]

    def to_csv(self, path):
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(self.columns)
            for record in self.records:
                writer.writerow([_cell(record.get(column)) for column in self.columns])
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline='') as handle:
            rows = list(csv.DictReader(handle))
        num_layers = sum(1 for name in (rows[0] if rows else {}) if name.startswith('lambda_max_l'))
        log = cls(config_hash=rows[0]['config_hash'] if rows else '', seed=int(rows[0]['seed']) if rows else 0,
                  num_layers=num_layers)
        for row in rows:
            log.records.append({key: _parse(key, value) for key, value in row.items()})
        return log


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return format(value, '.17g')
    return value


def _parse(key, value):
    if key == 'config_hash':
        return value
    if value == '':
        return None
    if key in ('epoch', 'seed', 'closest_layer'):
        return int(value)
    return float(value)


def wall_clock_ratio(htr_log, baseline_log):
    """Mean and standard error of per-epoch wall-clock ratios HTR / baseline over shared epochs."""
    baseline = {r['epoch']: r['wall_clock'] for r in baseline_log.records if r['epoch'] > 0 and r.get('wall_clock')}
    ratios = [
        r['wall_clock'] / baseline[r['epoch']]
        for r in htr_log.records
        if r['epoch'] in baseline and r.get('wall_clock') is not None
    ]
    if not ratios:
        raise ValueError('the two run logs share no timed epochs')
    ratios = np.asarray(ratios)
    stderr = float(np.std(ratios, ddof=1) / math.sqrt(len(ratios))) if len(ratios) > 1 else 0.0
    return float(np.mean(ratios)), stderr


def evaluate(params, registry, dataset, running=None):
    """Eval-mode mean loss and accuracy over ``dataset``."""
    if dataset is None or len(dataset) == 0:
        return None, None
    function = registry.function(running=running, training=False)
    with torch.no_grad():
        logits = function(params.values, dataset.inputs)
        loss = float(cross_entropy(logits, dataset.labels))
        accuracy = float((logits.argmax(dim=1) == dataset.labels).double().mean())
    return loss, accuracy


def curvature_metrics(params, registry, probe, running, config):
    """λ_max, λ_min and Hutchinson traces of the full Hessian and every layer block."""
    seed = config.seed
    full = hessian_op(params, registry, probe, running=running)
    low, high = extreme_eigenvalues(full, config.metric_lanczos_steps, seed)
    metrics = {'lambda_max_full': high, 'lambda_min_full': low}
    if config.metric_probes:
        estimate = hutchinson_trace(full, n=config.metric_probes, seed=seed)
        metrics.update(trace_full=estimate.mean, trace_stderr=estimate.stderr)

    layer_sum, layer_max = 0.0, []
    for l in range(registry.num_layers):
        op = layer_hessian_op(params, registry, l, probe, running=running)
        layer_max.append(extreme_eigenvalues(op, config.metric_lanczos_steps, seed)[1])
        metrics[f'lambda_max_l{l}'] = layer_max[-1]
        if config.metric_probes:
            estimate = hutchinson_trace(op, n=config.metric_probes, seed=seed)
            metrics[f'trace_l{l}'] = estimate.mean
            metrics[f'trace_stderr_l{l}'] = estimate.stderr
            layer_sum += estimate.mean
    if config.metric_probes:
        metrics['trace_layer_sum'] = layer_sum
    metrics['closest_layer'] = int(np.argmin([abs(m - high) for m in layer_max]))
    return metrics


def epoch_record(epoch, params, registry, running, probe, train_ds, test_ds, config, wall_clock):
    train_loss, train_acc = evaluate(params, registry, train_ds, running)
    test_loss, test_acc = evaluate(params, registry, test_ds, running)
    record = {
        'epoch': epoch,
        'train_loss': train_loss,
        'train_acc': train_acc,
        'test_loss': test_loss,
        'test_acc': test_acc,
        'wall_clock': wall_clock,
    }
    record.update(curvature_metrics(params, registry, probe, running, config))
    logger.info(
        'epoch %d: train loss %.4f acc %.3f, lambda_max %.4g, trace %s',
        epoch, train_loss, train_acc, record['lambda_max_full'],
        'n/a' if record.get('trace_full') is None else format(record['trace_full'], '.4g'),
    )
    return record


@dataclass
class TrainingResult:
    run_log: RunLog
    checkpoint: Checkpoint


def train(config, spec, train_ds, test_ds=None, out_dir=None):
    """
    SGD with momentum and optional layerwise trace regularization.

    Every ``htr_frequency``-th step (counted globally, from 1) adds
    ``htr_gamma`` times the trace penalty gradient on the current minibatch.
    Metrics are logged before training (epoch 0) and after every epoch.
    """
    config = config.validate()
    config_hash = config.config_hash()
    if config.htr_gamma > 0 and config.htr_frequency == 0:
        logger.warning('htr_gamma=%g has no effect with htr_frequency=0', config.htr_gamma)

    params, registry = build(spec, config.seed)
    running = registry.initial_running_stats()
    buffers = torch.zeros(params.dim, dtype=params.values.dtype)
    selection = select_layers(registry, config.htr_layers) if config.htr_active else ()
    probe = probe_set(train_ds, config.probe_set_size, seed=config.seed)
    run_log = RunLog(config_hash=config_hash, seed=config.seed, num_layers=registry.num_layers)
    checkpoint_dir = Path(out_dir) / 'checkpoints' if out_dir is not None else None

    pool = None if config.strict_determinism else ThreadPoolExecutor(max_workers=1)
    pending = []

    def log_epoch(epoch, wall_clock):
        snapshot, stats = params.snapshot(), running.copy()
        args = (epoch, snapshot, registry, stats, probe, train_ds, test_ds, config, wall_clock)
        if pool is None:
            run_log.append(epoch_record(*args))
        else:
            pending.append(pool.submit(epoch_record, *args))

    try:
        log_epoch(0, None)
        step = 0
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            for batch in batches(train_ds, BatchPlan(config.batch_size, config.seed, epoch)):
                step += 1
                function = registry.function(running=running, training=True)
                tape = forward_loss(function, params, batch)
                loss = tape.value()
                if not math.isfinite(loss) or loss > config.divergence_threshold:
                    logger.error('training diverged at step %d with loss %s', step, loss)
                    raise DivergenceError(step, loss, config.divergence_threshold)
                grad = gradient(tape).values
                if config.htr_active and step % config.htr_frequency == 0:
                    penalty = htr_penalty_gradient(
                        params, registry, batch, selection,
                        probes=config.htr_probes,
                        seed=step_seed(config.seed, step),
                        running=running,
                        layer_weights=config.htr_layer_weights,
                    )
                    grad = grad + config.htr_gamma * penalty.values
                params, buffers = sgd_step(params, grad, buffers, config, step)
            log_epoch(epoch, time.perf_counter() - started)
            if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(
                    Checkpoint(spec, params.snapshot(), buffers.clone(), epoch, config.seed, running.copy()),
                    checkpoint_dir / f'epoch_{epoch:04d}.hlns',
                )
        for future in pending:
            run_log.append(future.result())
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    final = Checkpoint(spec, params.snapshot(), buffers.clone(), config.epochs, config.seed, running.copy())
    if out_dir is not None:
        save_checkpoint(final, Path(out_dir) / 'final.hlns')
        run_log.to_csv(Path(out_dir) / 'runlog.csv')
    return TrainingResult(run_log=run_log, checkpoint=final)
