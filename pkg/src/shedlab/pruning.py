"""Unstructured mask lifecycle: degenerate-weight shedding and top-up pruning.

All prunable tensors are viewed as one flat vector in registration order
("global index"), which is also the tie-breaking order for rankings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import ParamStore, StructuralError

INITIAL_THRESHOLD = 1e-4


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple
    start: int
    stop: int


def build_layout(params: ParamStore) -> tuple:
    segs, start = [], 0
    for name in params.prunable:
        shape = params.tensors[name].shape
        size = int(np.prod(shape))
        segs.append(Segment(name, shape, start, start + size))
        start += size
    return tuple(segs)


def flat_prunable(params: ParamStore, layout) -> np.ndarray:
    """Concatenated copy of the prunable tensors in global-index order."""
    return np.concatenate([params.tensors[s.name].ravel() for s in layout])


def targets_to_prune(kept: int, total: int, r_target: float) -> int:
    """Smallest k with (kept - k) / total <= r_target."""
    if not 0 < r_target <= 1:
        raise ValueError(f"target keep-ratio must lie in (0, 1], got {r_target}")
    # decided with the same float division keep_ratio() uses, so rho <= r holds exactly afterwards
    k = min(max(math.ceil(kept - r_target * total), 0), kept)
    while k > 0 and (kept - k + 1) / total <= r_target:
        k -= 1
    while k < kept and (kept - k) / total > r_target:
        k += 1
    return k


class _MaskedLayout:
    """Shared weight-level bookkeeping for unstructured and block masks."""

    layout: tuple
    weight_kept: np.ndarray

    def mask_for(self, name: str) -> np.ndarray:
        for s in self.layout:
            if s.name == name:
                return self.weight_kept[s.start : s.stop].reshape(s.shape)
        raise KeyError(name)

    def as_dict(self) -> dict:
        """``{name: flat bool mask}`` in registration order."""
        return {s.name: self.weight_kept[s.start : s.stop].copy() for s in self.layout}

    def apply(self, params: ParamStore, opt=None):
        """Hard-zero pruned weights (and their velocities)."""
        for s in self.layout:
            pruned = ~self.weight_kept[s.start : s.stop].reshape(s.shape)
            params.tensors[s.name][pruned] = 0.0
            if opt is not None and s.name in opt.velocity:
                opt.velocity[s.name][pruned] = 0.0

    def _zero(self, params: ParamStore, idx: np.ndarray, opt=None):
        for s in self.layout:
            lo, hi = np.searchsorted(idx, [s.start, s.stop])
            if lo == hi:
                continue
            local = idx[lo:hi] - s.start
            params.tensors[s.name].reshape(-1)[local] = 0.0
            if opt is not None and s.name in opt.velocity:
                opt.velocity[s.name].reshape(-1)[local] = 0.0


@dataclass
class MaskState(_MaskedLayout):
    layout: tuple
    weight_kept: np.ndarray
    threshold: float = INITIAL_THRESHOLD
    explicitly_pruned: int = 0
    shed: int = 0
    max_pruned: float = 0.0

    @classmethod
    def fresh(cls, params: ParamStore, threshold: float = INITIAL_THRESHOLD) -> "MaskState":
        if threshold < 0:
            raise ValueError("threshold must be non-negative")
        layout = build_layout(params)
        n = layout[-1].stop if layout else 0
        return cls(layout, np.ones(n, dtype=bool), threshold)

    @property
    def total(self) -> int:
        return self.weight_kept.size

    @property
    def kept(self) -> int:
        return int(np.count_nonzero(self.weight_kept))

    def check(self, params: ParamStore):
        if build_layout(params) != self.layout:
            raise StructuralError("mask layout does not match parameter store")


def keep_ratio(mask) -> float:
    """Actual keep-ratio rho_t = K / N (block masks report the block ratio)."""
    return mask.kept / mask.total


def detect_degenerate(params: ParamStore, mask: MaskState, opt=None) -> np.ndarray:
    """Mask every kept weight with |w| < threshold; return their global indices."""
    if mask.threshold <= 0:
        return np.empty(0, dtype=np.int64)
    mags = np.abs(flat_prunable(params, mask.layout))
    idx = np.flatnonzero(mask.weight_kept & (mags < mask.threshold))
    if idx.size:
        mask.weight_kept[idx] = False
        mask.shed += idx.size
        mask._zero(params, idx, opt)
    return idx


def _select_smallest(values: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps ascending index order among equal values
    order = np.argsort(values[candidates], kind="stable")
    return candidates[order[:k]]


def gmp_topup(params: ParamStore, mask: MaskState, r_target: float, opt=None) -> np.ndarray:
    """Prune the globally smallest-magnitude kept weights down to ``r_target``.

    The threshold is then raised to the largest magnitude pruned so far.
    Returns the pruned global indices in ascending order.
    """
    k = targets_to_prune(mask.kept, mask.total, r_target)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    mags = np.abs(flat_prunable(params, mask.layout))
    chosen = np.sort(_select_smallest(mags, np.flatnonzero(mask.weight_kept), k))
    mask.max_pruned = max(mask.max_pruned, float(mags[chosen].max()))
    mask.threshold = max(mask.threshold, mask.max_pruned)
    mask.weight_kept[chosen] = False
    mask.explicitly_pruned += chosen.size
    mask._zero(params, chosen, opt)
    return chosen


def random_topup(params: ParamStore, mask: MaskState, r_target: float,
                 rng: np.random.Generator, opt=None) -> np.ndarray:
    """Like :func:`gmp_topup` but picks kept weights uniformly; the threshold is left alone."""
    k = targets_to_prune(mask.kept, mask.total, r_target)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    chosen = np.sort(rng.choice(np.flatnonzero(mask.weight_kept), size=k, replace=False))
    mask.weight_kept[chosen] = False
    mask.explicitly_pruned += chosen.size
    mask._zero(params, chosen, opt)
    return chosen
