"""Post-hoc measurements of shedding: mask IoU, kept-block L0 PMF,
exponential fits of keep-ratio traces and shed attribution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .blocks import BLOCK_SIZE, BlockPartition, block_l0_counts
from .engine import StructuralError

DEGENERATE_CUTOFF = 6e-3
FIT_GRID_POINTS = 200


class DegenerateFitError(ValueError):
    pass


def _kept_vectors(mask) -> dict:
    if hasattr(mask, "as_dict"):
        return mask.as_dict()
    if hasattr(mask, "masks"):
        return dict(mask.masks)
    return dict(mask)


def iou(mask_a, mask_b) -> float:
    """Intersection over union of two kept sets; 1.0 when both are empty.

    Accepts mask states, snapshots, or ``{name: bool array}`` mappings.
    """
    a, b = _kept_vectors(mask_a), _kept_vectors(mask_b)
    if list(a) != list(b) or any(np.shape(a[k]) != np.shape(b[k]) for k in a):
        raise StructuralError("masks have different tensor layouts")
    inter = union = 0
    for k in a:
        ka, kb = np.asarray(a[k], dtype=bool), np.asarray(b[k], dtype=bool)
        inter += int(np.count_nonzero(ka & kb))
        union += int(np.count_nonzero(ka | kb))
    return 1.0 if union == 0 else inter / union


def kept_block_l0_pmf(weights: np.ndarray, block_kept: np.ndarray, partition: BlockPartition,
                      cutoff: float = DEGENERATE_CUTOFF) -> np.ndarray:
    """Distribution of L0 norms (0..4) over kept blocks.

    ``weights`` is the flat prunable vector in the partition's global order.
    """
    block_kept = np.asarray(block_kept, dtype=bool)
    if not block_kept.any():
        raise ValueError("no kept blocks")
    l0 = block_l0_counts(np.asarray(weights, dtype=np.float64), partition, cutoff)[block_kept]
    counts = np.bincount(l0, minlength=BLOCK_SIZE + 1).astype(np.float64)
    return counts / counts.sum()


@dataclass(frozen=True)
class FitResult:
    asymptote: float
    tau: float
    initial: float
    residual_norm: float
    r_squared: float


def _loglinear(t, rho, r_inf):
    """Fit log(rho - r_inf) = a - t/tau; return (tau, initial, residual norm).

    Residuals in log space are weighted by (rho - r_inf) so the regression
    approximates least squares on rho itself instead of being dominated by
    samples sitting just above the asymptote.
    """
    gap = rho - r_inf
    slope, intercept = np.polyfit(t, np.log(gap), 1, w=gap)
    if not slope < 0:
        return None
    tau = -1.0 / slope
    model = r_inf + np.exp(intercept) * np.exp(-t / tau)
    return tau, r_inf + math.exp(intercept), float(np.linalg.norm(rho - model))


def fit_exponential(trace_or_t, rho=None) -> FitResult:
    """Fit rho(t) = R + (rho0 - R) exp(-t/tau).

    R is grid-searched over [0, min rho) and then refined locally; for each
    candidate R the decay is a straight-line fit of log(rho - R) against t,
    and the candidate with the smallest residual in rho space wins.
    """
    if rho is None:
        t = trace_or_t.column("t")
        rho = trace_or_t.column("actual_keep")
    else:
        t = trace_or_t
    t = np.asarray(t, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if t.size < 4:
        raise DegenerateFitError("need at least 4 samples")
    if np.ptp(rho) == 0:
        raise DegenerateFitError("keep-ratio trace is constant")
    lo = float(rho.min())
    grid = np.linspace(0.0, lo, FIT_GRID_POINTS, endpoint=False)

    def cost(r_inf):
        if not r_inf < lo:
            return np.inf
        fit = _loglinear(t, rho, r_inf)
        return np.inf if fit is None else fit[2]

    costs = np.array([cost(r) for r in grid])
    if not np.isfinite(costs).any():
        raise DegenerateFitError("trace is not decaying")
    best = int(np.argmin(costs))
    step = grid[1] - grid[0]
    candidates = [(costs[best], float(grid[best]))]
    a, b = max(0.0, grid[best] - step), min(lo * (1 - 1e-12), grid[best] + step)
    res = minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-12 * max(lo, 1e-300)})
    candidates.append((res.fun, float(res.x)))
    # a trace that has settled onto its asymptote puts the optimum inside the last
    # grid cell, arbitrarily close to min(rho); search that cell on a log scale
    if lo > 0:
        gap_cost = lambda g: cost(lo - math.exp(g))  # noqa: E731
        res = minimize_scalar(gap_cost, bounds=(math.log(lo) - 40.0, math.log(step)), method="bounded",
                              options={"xatol": 1e-10})
        candidates.append((res.fun, lo - math.exp(res.x)))
    r_inf = min(candidates)[1]
    tau, initial, resid = _loglinear(t, rho, r_inf)
    ss_tot = float(np.sum((rho - rho.mean()) ** 2))
    return FitResult(r_inf, tau, initial, resid, 1.0 - resid**2 / ss_tot)


@dataclass(frozen=True)
class ShedAttribution:
    explicit_delta: np.ndarray
    shed_delta: np.ndarray
    explicit_total: int
    shed_total: int
    cascade_ratio: float


def shed_attribution(trace) -> ShedAttribution:
    """Per-interval explicit/shed counts and the final shed-to-explicit ratio.

    The ratio is ``inf`` when weights were shed without any explicit pruning,
    and 0 when neither happened.
    """
    explicit = np.asarray(trace.column("explicit_cum"), dtype=np.int64)
    shed = np.asarray(trace.column("shed_cum"), dtype=np.int64)
    if explicit.size == 0:
        raise ValueError("empty trace")
    e_tot, s_tot = int(explicit[-1]), int(shed[-1])
    if e_tot:
        ratio = s_tot / e_tot
    else:
        ratio = math.inf if s_tot else 0.0
    return ShedAttribution(np.diff(explicit), np.diff(shed), e_tot, s_tot, ratio)
