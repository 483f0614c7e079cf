"""Experiment loop: train, shed degenerate weights every batch, top up at
update-interval boundaries, and record a RunTrace."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import blocks, pruning
from .analysis import shed_attribution
from .config import ExperimentConfig
from .data import Dataset, blob_split, idx_dataset
from .engine import NetworkSpec, OptimizerState, ParamStore, backward, forward, sgd_step, softmax_cross_entropy
from .formats import Snapshot, snapshot_of
from .schedules import RunClock, keep_ratio_value, lr_value
from .trace import RunTrace, TraceRow

log = logging.getLogger(__name__)

# independent RNG streams derived from the run seed
_STREAM_INIT, _STREAM_RANDOM_PRUNE, _STREAM_PRETRAIN, _STREAM_BATCHES = range(4)


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; ``trace`` holds every row up to and including a diagnostic row."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class RunResult:
    config: ExperimentConfig
    trace: RunTrace
    mask: object
    params: ParamStore

    @property
    def snapshot(self) -> Snapshot:
        return snapshot_of(self.mask)

    @property
    def weights(self) -> dict:
        return {k: v.astype(np.float32) for k, v in self.params.items()}


def _rng(seed, stream):
    return np.random.Generator(np.random.PCG64([seed, stream]))


def load_data(cfg: ExperimentConfig):
    if cfg.dataset == "synthetic_blobs":
        return blob_split(cfg.num_classes, cfg.input_shape, cfg.train_samples, cfg.eval_samples,
                          cfg.noise, cfg.data_seed)
    train = idx_dataset(cfg.train_images, cfg.train_labels, cfg.norm_mean, cfg.norm_std, cfg.input_shape)
    if cfg.eval_images is None:
        return train, Dataset(train.x[:0], train.y[:0])
    return train, idx_dataset(cfg.eval_images, cfg.eval_labels, cfg.norm_mean, cfg.norm_std, cfg.input_shape)


class BatchStream:
    """Fixed-size batches; the dataset is reshuffled at every epoch and wraps if short."""

    def __init__(self, data: Dataset, batch_size: int, batches_per_epoch: int, rng):
        self.data, self.bs, self.bpe, self.rng = data, batch_size, batches_per_epoch, rng
        self._epoch, self._perm = -1, None

    def batch(self, step: int):
        epoch, j = divmod(step, self.bpe)
        while self._epoch < epoch:
            self._perm = self.rng.permutation(len(self.data))
            self._epoch += 1
        idx = self._perm[(j * self.bs + np.arange(self.bs)) % len(self.data)]
        return self.data.x[idx], self.data.y[idx]


def evaluate(net: NetworkSpec, params: ParamStore, mask, data: Dataset, batch_size: int = 1024) -> float:
    """Top-1 accuracy with pruned weights zeroed; ties go to the lowest class index."""
    if len(data) == 0:
        return float("nan")
    if mask is not None:
        params = params.copy()
        mask.apply(params)
    correct = 0
    for lo in range(0, len(data), batch_size):
        logits, _ = forward(net, params, data.x[lo : lo + batch_size], training=False)
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == data.y[lo : lo + batch_size]))
    return correct / len(data)


def pretrain(cfg: ExperimentConfig, net, params, data: Dataset, bpe: int):
    """Dense training before pruning starts, so the pruned network is a trained one."""
    if cfg.pretrain_epochs == 0:
        return
    opt = OptimizerState.for_params(params, cfg.pretrain_momentum, cfg.weight_decay)
    stream = BatchStream(data, cfg.batch_size, bpe, _rng(cfg.seed, _STREAM_PRETRAIN))
    for step in range(cfg.pretrain_epochs * bpe):
        x, y = stream.batch(step)
        logits, cache = forward(net, params, x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        sgd_step(params, backward(cache, dlogits), opt, None, cfg.pretrain_lr)
        if (step + 1) % bpe == 0:
            log.info("pretrain epoch %d loss %.4f", (step + 1) // bpe, loss)


class _Pruner:
    """Binds the configured method to a mask state."""

    def __init__(self, cfg: ExperimentConfig, params: ParamStore):
        self.cfg = cfg
        self.rng = _rng(cfg.seed, _STREAM_RANDOM_PRUNE)
        if cfg.method == "block_gmp":
            self.partition = blocks.build_partition(params)
            self.mask = blocks.BlockMaskState.fresh(self.partition, cfg.initial_threshold)
        else:
            self.mask = pruning.MaskState.fresh(params, cfg.initial_threshold)

    def shed(self, params, opt):
        if self.cfg.method == "block_gmp":
            return blocks.detect_degenerate_blocks(params, self.mask, opt)
        return pruning.detect_degenerate(params, self.mask, opt)

    def topup(self, params, r, opt):
        if self.cfg.method == "gmp":
            return pruning.gmp_topup(params, self.mask, r, opt)
        if self.cfg.method == "random":
            return pruning.random_topup(params, self.mask, r, self.rng, opt)
        return blocks.block_gmp_topup(params, self.mask, r, opt)

    def decay(self, params):
        if not self.cfg.selective_decay:
            return None
        return blocks.selective_decay(self.mask, params, self.cfg.selective_decay_base,
                                      self.cfg.selective_decay_cutoff)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run one pruning experiment; fully deterministic given the config."""
    cfg = cfg.replace().validate()
    net = cfg.network
    train, held_out = load_data(cfg)
    bpe = cfg.batches_per_epoch or math.ceil(len(train) / cfg.batch_size)
    params = net.init_params(_rng(cfg.seed, _STREAM_INIT))
    pretrain(cfg, net, params, train, bpe)

    opt = OptimizerState.for_params(params, cfg.momentum, cfg.weight_decay)
    pruner = _Pruner(cfg, params)
    mask = pruner.mask
    lr_spec, keep_spec = cfg.lr_spec(), cfg.keep_spec()
    total_steps = cfg.total_epochs * bpe
    eval_period = cfg.eval_every_epochs * bpe
    stream = BatchStream(train, cfg.batch_size, bpe, _rng(cfg.seed, _STREAM_BATCHES))
    trace = RunTrace()

    def row(step, lr, target, loss, acc, eval_acc):
        trace.append(TraceRow(step, step / bpe, lr, target, pruning.keep_ratio(mask),
                              mask.explicitly_pruned, mask.shed, loss, acc, eval_acc), mask.threshold)

    x0, y0 = stream.batch(0)
    logits, _ = forward(net, params, x0, training=False)
    loss0, _ = softmax_cross_entropy(logits, y0)
    acc0 = float(np.mean(np.argmax(logits, axis=1) == y0))
    row(0, lr_spec.rate_for_epoch(0), 1.0, loss0, acc0, evaluate(net, params, mask, held_out))

    losses, accs, prev = [], [], 0
    for step in range(total_steps):
        lr = lr_value(lr_spec, RunClock(bpe, cfg.total_epochs, cfg.cycle_length, cfg.num_cycles, step))
        x, y = stream.batch(step)
        logits, cache = forward(net, params, x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        if not math.isfinite(loss):
            row(step + 1, lr, float("nan"), loss, float("nan"), None)
            raise TrainingDiverged(f"non-finite loss at step {step}", trace)
        losses.append(loss)
        accs.append(float(np.mean(np.argmax(logits, axis=1) == y)))
        sgd_step(params, backward(cache, dlogits), opt, mask, lr, pruner.decay(params))
        done = step + 1
        boundary = done % cfg.update_interval == 0 or done == total_steps
        if cfg.degenerate_check == "batch" or boundary:
            pruner.shed(params, opt)
        if not boundary:
            continue
        target = keep_ratio_value(keep_spec, done / bpe)
        pruner.topup(params, target, opt)
        eval_acc = None
        if done // eval_period > prev // eval_period or done == total_steps:
            eval_acc = evaluate(net, params, mask, held_out)
        row(done, lr, target, float(np.mean(losses)), float(np.mean(accs)), eval_acc)
        losses, accs, prev = [], [], done
        log.debug("step %d t=%.3f r=%.4f rho=%.4f shed=%d", done, done / bpe, target,
                  pruning.keep_ratio(mask), mask.shed)
    return RunResult(cfg, trace, mask, params)


def momentum_sweep(cfg: ExperimentConfig, momenta) -> dict:
    """Run ``cfg`` once per momentum value; everything else is held fixed."""
    momenta = list(momenta)
    if len(momenta) < 2:
        raise ValueError("a sweep needs at least two momentum values")
    if len(set(momenta)) != len(momenta):
        raise ValueError("duplicate momentum values")
    return {mu: run_experiment(cfg.replace(momentum=mu)) for mu in momenta}


SUMMARY_HEADER = ("momentum", "final_actual_keep", "explicit_cum", "shed_cum", "cascade_ratio", "final_eval_acc")


def sweep_summary(results: dict) -> list:
    """One row per momentum value, in :data:`SUMMARY_HEADER` order."""
    rows = []
    for mu, result in results.items():
        a = shed_attribution(result.trace)
        last = result.trace.rows[-1]
        rows.append((mu, last.actual_keep, a.explicit_total, a.shed_total, a.cascade_ratio, last.eval_acc))
    return rows
