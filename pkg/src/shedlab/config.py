"""Experiment configuration: a flat ``key = value`` text format.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Only ``layers`` and ``input_shape`` are required; everything else has a
default (batch 128, top-up every 100 batches, initial threshold 1e-4,
7-epoch cycles, 5 cycles).

``layers`` is a ``;``-separated list of ``dense(in,out)``,
``conv2d(in,out,kh,kw[,stride[,padding]])``, ``relu``, ``flatten`` and
``batchnorm(channels)``.
"""

import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .engine import BatchNorm, Conv2d, Dense, Flatten, NetworkSpec, ReLU, StructuralError
from .schedules import KeepRatioScheduleSpec, LrScheduleSpec


class ConfigError(ValueError):
    def __init__(self, key, message, line=None):
        self.key, self.line, self.message = key, line, message
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")


_LAYER_RE = re.compile(r"^\s*([a-z0-9_]+)\s*(?:\(([^)]*)\))?\s*$")
_LAYER_KINDS = {"dense": Dense, "conv2d": Conv2d, "relu": ReLU, "flatten": Flatten, "batchnorm": BatchNorm}


def parse_layers(text: str) -> tuple:
    layers = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        m = _LAYER_RE.match(part)
        if not m or m.group(1) not in _LAYER_KINDS:
            raise ValueError(f"cannot parse layer {part!r}")
        args = [int(a) for a in m.group(2).split(",")] if m.group(2) else []
        layers.append(_LAYER_KINDS[m.group(1)](*args))
    if not layers:
        raise ValueError("no layers")
    return tuple(layers)


def format_layers(layers) -> str:
    out = []
    for layer in layers:
        name = next(k for k, v in _LAYER_KINDS.items() if isinstance(layer, v))
        vals = [getattr(layer, f.name) for f in fields(layer) if f.type in ("int", int)]
        out.append(f"{name}({','.join(map(str, vals))})" if vals else name)
    return "; ".join(out)


def _ints(text):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _steps(text):
    """``11:1e-2, 23:1e-3, 35:1e-4`` or ``auto``."""
    if text.strip() == "auto":
        return "auto"
    pairs = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        bound, rate = item.split(":")
        pairs.append((int(bound), float(rate)))
    return tuple(pairs)


def _opt_str(text):
    return text.strip() or None


@dataclass
class ExperimentConfig:
    layers: tuple = ()
    input_shape: tuple = ()
    # data
    dataset: str = "synthetic_blobs"
    num_classes: int = 0  # 0: take from the network output
    train_samples: int = 4096
    eval_samples: int = 1024
    noise: float = 1.0
    data_seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    eval_images: Optional[str] = None
    eval_labels: Optional[str] = None
    norm_mean: float = 0.0
    norm_std: float = 1.0
    # clock
    total_epochs: int = -1  # -1: num_cycles * cycle_length
    cycle_length: int = 7
    num_cycles: int = 5
    batches_per_epoch: int = 0  # 0: ceil(train set / batch size)
    batch_size: int = 128
    # schedules
    lr_schedule: str = "three_step"
    lr_steps: object = "auto"
    keep_schedule: str = "linear"
    final_keep: float = 0.15
    tau: float = 3.0
    gate_epochs: int = 2
    # pruning
    method: str = "gmp"
    momentum: float = 0.9
    weight_decay: float = 0.0
    selective_decay: bool = False
    selective_decay_base: float = 1e-4
    selective_decay_cutoff: float = 1e-4
    update_interval: int = 100
    initial_threshold: float = 1e-4
    degenerate_check: str = "batch"
    # run
    seed: int = 0
    eval_every_epochs: int = 1
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-2
    pretrain_momentum: float = 0.9

    def __post_init__(self):
        if self.total_epochs == -1:
            self.total_epochs = self.num_cycles * self.cycle_length

    @property
    def network(self) -> NetworkSpec:
        return NetworkSpec(self.input_shape, self.layers)

    def lr_spec(self) -> LrScheduleSpec:
        if self.lr_schedule == "cyclic":
            if self.lr_steps == "auto":
                return LrScheduleSpec.cyclic(self.cycle_length)
            return LrScheduleSpec("cyclic", self.lr_steps, self.cycle_length)
        if self.lr_steps == "auto":
            return LrScheduleSpec.three_step(max(self.total_epochs, 1))
        return LrScheduleSpec("three_step", self.lr_steps)

    def keep_spec(self) -> KeepRatioScheduleSpec:
        return KeepRatioScheduleSpec(self.keep_schedule, self.final_keep, self.total_epochs,
                                     self.tau, self.cycle_length, self.gate_epochs)

    def validate(self) -> "ExperimentConfig":
        """Raise :class:`ConfigError` naming the first offending key."""
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        need(bool(self.layers), "layers", "required")
        need(bool(self.input_shape), "input_shape", "required")
        try:
            net = self.network
        except (StructuralError, TypeError) as exc:
            raise ConfigError("layers", str(exc)) from None
        need(len(net.output_shape) == 1, "layers", "network must end in a flat class-score vector")
        need(bool(net.prunable_names()), "layers", "network has no prunable layer")
        need(self.dataset in ("synthetic_blobs", "idx"), "dataset", "must be synthetic_blobs or idx")
        if self.num_classes == 0:
            self.num_classes = net.output_shape[0]
        need(self.num_classes == net.output_shape[0], "num_classes", "does not match network output")
        need(self.train_samples > 0, "train_samples", "must be positive")
        need(self.eval_samples >= 0, "eval_samples", "must be non-negative")
        need(self.noise >= 0, "noise", "must be non-negative")
        if self.dataset == "idx":
            for key in ("train_images", "train_labels"):
                need(getattr(self, key) is not None, key, "required for idx datasets")
            need((self.eval_images is None) == (self.eval_labels is None), "eval_labels",
                 "eval_images and eval_labels go together")
        need(self.norm_std > 0, "norm_std", "must be positive")
        need(self.total_epochs >= 0, "total_epochs", "must be non-negative")
        need(self.cycle_length > 0, "cycle_length", "must be positive")
        need(self.num_cycles > 0, "num_cycles", "must be positive")
        need(self.batches_per_epoch >= 0, "batches_per_epoch", "must be non-negative")
        need(self.batch_size > 0, "batch_size", "must be positive")
        need(self.lr_schedule in ("three_step", "cyclic"), "lr_schedule", "must be three_step or cyclic")
        need(self.keep_schedule in ("linear", "exponential", "cycle_gated_exponential"),
             "keep_schedule", "must be linear, exponential or cycle_gated_exponential")
        cyclic = self.lr_schedule == "cyclic" or self.keep_schedule == "cycle_gated_exponential"
        need(not cyclic or self.total_epochs == self.num_cycles * self.cycle_length, "total_epochs",
             "cyclic runs need total_epochs = num_cycles * cycle_length")
        try:
            lr = self.lr_spec()
        except ValueError as exc:
            raise ConfigError("lr_steps", str(exc)) from None
        need(lr.kind == "cyclic" or self.total_epochs == 0 or lr.steps[-1][0] >= self.total_epochs,
             "lr_steps", "three-step boundaries must cover total_epochs")
        need(0 < self.final_keep <= 1, "final_keep", "must lie in (0, 1]")
        need(self.tau > 0, "tau", "must be positive")
        need(0 < self.gate_epochs <= self.cycle_length, "gate_epochs", "must lie in [1, cycle_length]")
        need(self.method in ("gmp", "random", "block_gmp"), "method", "must be gmp, random or block_gmp")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        need(not self.selective_decay or self.method == "block_gmp", "selective_decay",
             "only applies to block_gmp")
        need(self.selective_decay_base >= 0, "selective_decay_base", "must be non-negative")
        need(self.selective_decay_cutoff >= 0, "selective_decay_cutoff", "must be non-negative")
        need(self.update_interval > 0, "update_interval", "must be positive")
        need(self.initial_threshold >= 0, "initial_threshold", "must be non-negative")
        need(self.degenerate_check in ("batch", "interval"), "degenerate_check", "must be batch or interval")
        need(self.eval_every_epochs > 0, "eval_every_epochs", "must be positive")
        need(self.pretrain_epochs >= 0, "pretrain_epochs", "must be non-negative")
        need(self.pretrain_lr > 0, "pretrain_lr", "must be positive")
        need(0 <= self.pretrain_momentum < 1, "pretrain_momentum", "must lie in [0, 1)")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_PARSERS = {
    "layers": parse_layers,
    "input_shape": _ints,
    "lr_steps": _steps,
    "train_images": _opt_str,
    "train_labels": _opt_str,
    "eval_images": _opt_str,
    "eval_labels": _opt_str,
}
for _f in fields(ExperimentConfig):
    if _f.name not in _PARSERS:
        _PARSERS[_f.name] = {int: int, float: float, str: str.strip, bool: _bool}[_f.type]


def parse_config_text(text: str) -> ExperimentConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, "expected key = value", lineno)
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in _PARSERS:
            raise ConfigError(key, "unknown key", lineno)
        if key in values:
            raise ConfigError(key, "duplicate key", lineno)
        try:
            values[key] = _PARSERS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, f"bad value {value!r}: {exc}", lineno) from None
        lines[key] = lineno
    cfg = ExperimentConfig(**values)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(exc.key, exc.message, lines.get(exc.key)) from None


def parse_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> str:
    """Render every key; ``parse_config_text(format_config(c)) == c``."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "layers":
            text = format_layers(v)
        elif f.name == "input_shape":
            text = ",".join(map(str, v))
        elif f.name == "lr_steps":
            text = v if v == "auto" else ", ".join(f"{b}:{r!r}" for b, r in v)
        elif v is None:
            text = ""
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v).lower() if isinstance(v, bool) else str(v)
        out.append(f"{f.name} = {text}")
    return "\n".join(out) + "\n"

