"""Learning-rate and keep-ratio schedules.

Everything here is a pure function of normalized training time ``t``
(batch index divided by batches per epoch), so ``floor(t)`` is the
zero-based epoch index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

THREE_STEP_DEFAULT = ((11, 1e-2), (23, 1e-3), (35, 1e-4))
CYCLIC_DEFAULT = ((3, 1e-2), (5, 1e-3), (7, 1e-4))


class DegenerateScheduleError(ValueError):
    """Raised when r_t - R_f vanishes and the normalized rate is undefined."""


def _check_steps(steps):
    if not steps:
        raise ValueError("schedule needs at least one (threshold, rate) pair")
    prev = 0
    for bound, rate in steps:
        if not rate > 0:
            raise ValueError(f"learning rate must be positive, got {rate}")
        if bound <= prev:
            raise ValueError(f"step boundaries must be strictly increasing, got {steps}")
        prev = bound


@dataclass(frozen=True)
class RunClock:
    batches_per_epoch: int
    total_epochs: int
    cycle_length: int = 7
    num_cycles: int = 5
    batch_index: int = 0

    def __post_init__(self):
        if self.batches_per_epoch <= 0 or self.total_epochs <= 0:
            raise ValueError("batches_per_epoch and total_epochs must be positive")
        if self.cycle_length <= 0 or self.num_cycles <= 0:
            raise ValueError("cycle_length and num_cycles must be positive")
        if self.batch_index < 0:
            raise ValueError("batch_index must be non-negative")

    @property
    def t(self) -> float:
        return self.batch_index / self.batches_per_epoch


@dataclass(frozen=True)
class LrScheduleSpec:
    """Piecewise-constant learning rate.

    ``steps`` is a tuple of ``(epoch_threshold, rate)`` pairs: ``rate``
    applies while the (cycle-local, for ``cyclic``) epoch index is below
    ``epoch_threshold`` and at or above the previous threshold.
    """

    kind: str = "three_step"
    steps: tuple = THREE_STEP_DEFAULT
    cycle_length: int = 7

    def __post_init__(self):
        if self.kind not in ("three_step", "cyclic"):
            raise ValueError(f"unknown learning-rate schedule {self.kind!r}")
        _check_steps(self.steps)
        if self.kind == "cyclic" and self.steps[-1][0] != self.cycle_length:
            raise ValueError("cyclic buckets must cover exactly one cycle")

    @classmethod
    def three_step(cls, total_epochs: int = 35) -> "LrScheduleSpec":
        """Three-step schedule with the 11/23/35 boundaries rescaled to ``total_epochs``."""
        if total_epochs == 35:
            return cls("three_step", THREE_STEP_DEFAULT)
        b1 = max(1, round(11 * total_epochs / 35))
        b2 = max(b1 + 1, round(23 * total_epochs / 35))
        b3 = max(b2 + 1, total_epochs)
        return cls("three_step", ((b1, 1e-2), (b2, 1e-3), (b3, 1e-4)))

    @classmethod
    def cyclic(cls, cycle_length: int = 7) -> "LrScheduleSpec":
        """Cyclic schedule with the 3/5/7 buckets rescaled to ``cycle_length`` (>= 3)."""
        if cycle_length == 7:
            return cls("cyclic", CYCLIC_DEFAULT, 7)
        if cycle_length < 3:
            raise ValueError("a cyclic schedule needs cycle_length >= 3")
        b1 = max(1, round(3 * cycle_length / 7))
        b2 = min(max(b1 + 1, round(5 * cycle_length / 7)), cycle_length - 1)
        return cls("cyclic", ((b1, 1e-2), (b2, 1e-3), (cycle_length, 1e-4)), cycle_length)

    def rate_for_epoch(self, epoch: int) -> float:
        if self.kind == "cyclic":
            epoch %= self.cycle_length
        for bound, rate in self.steps:
            if epoch < bound:
                return rate
        raise ValueError(f"epoch {epoch} beyond last schedule boundary {self.steps[-1][0]}")


def lr_value(spec: LrScheduleSpec, clock: RunClock) -> float:
    t = clock.t
    if not 0 <= t < clock.total_epochs:
        raise ValueError(f"t={t} outside [0, {clock.total_epochs})")
    return spec.rate_for_epoch(math.floor(t))


@dataclass(frozen=True)
class KeepRatioScheduleSpec:
    kind: str = "linear"
    final_keep: float = 0.15
    total_epochs: float = 35
    tau: float = 3.0
    cycle_length: int = 7
    gate_epochs: int = 2

    def __post_init__(self):
        if self.kind not in ("linear", "exponential", "cycle_gated_exponential"):
            raise ValueError(f"unknown keep-ratio schedule {self.kind!r}")
        if not 0 < self.final_keep <= 1:
            raise ValueError(f"final_keep must lie in (0, 1], got {self.final_keep}")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be non-negative")
        if self.kind != "linear" and not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.kind == "cycle_gated_exponential" and not 0 < self.gate_epochs <= self.cycle_length:
            raise ValueError("gate_epochs must lie in [1, cycle_length]")

    def effective_time(self, t: float) -> float:
        """Time spent with the gate open, i.e. in the first ``gate_epochs`` of each cycle."""
        if self.kind != "cycle_gated_exponential":
            return t
        cycles = math.floor(t / self.cycle_length)
        into_cycle = t - cycles * self.cycle_length
        return cycles * self.gate_epochs + min(into_cycle, self.gate_epochs)

    def gate_open(self, t: float) -> bool:
        if self.kind != "cycle_gated_exponential":
            return True
        return math.floor(t) % self.cycle_length < self.gate_epochs


def _check_time(spec: KeepRatioScheduleSpec, t: float):
    if not 0 <= t <= spec.total_epochs:
        raise ValueError(f"t={t} outside [0, {spec.total_epochs}]")


def keep_ratio_value(spec: KeepRatioScheduleSpec, t: float) -> float:
    """Target keep-ratio r_t in [R_f, 1]."""
    _check_time(spec, t)
    rf = spec.final_keep
    if spec.kind == "linear":
        if t == 0:
            return 1.0
        if t == spec.total_epochs:
            return rf
        return 1.0 - (1.0 - rf) * t / spec.total_epochs
    return rf + (1.0 - rf) * math.exp(-spec.effective_time(t) / spec.tau)


def normalized_pruning_rate(spec: KeepRatioScheduleSpec, t: float) -> float:
    """d/dt (r_t - R_f) / (r_t - R_f), evaluated analytically."""
    _check_time(spec, t)
    if keep_ratio_value(spec, t) == spec.final_keep:
        raise DegenerateScheduleError(f"r_t equals R_f at t={t}; normalized rate undefined")
    if spec.kind == "linear":
        if t >= spec.total_epochs:
            raise DegenerateScheduleError("linear schedule has a pole at t = T")
        return -1.0 / (spec.total_epochs - t)
    if spec.kind == "exponential":
        return -1.0 / spec.tau
    return -1.0 / spec.tau if spec.gate_open(t) else 0.0

