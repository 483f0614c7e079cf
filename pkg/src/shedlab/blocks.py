"""4x1 semi-structured pruning.

A block is up to four weights that share an output channel and spatial
position and span adjacent input channels. Blocks are numbered by their
first global index, so block order is registration order then flat order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import NetworkSpec, ParamStore
from .pruning import (
    INITIAL_THRESHOLD,
    Segment,
    _MaskedLayout,
    _select_smallest,
    build_layout,
    flat_prunable,
    targets_to_prune,
)

BLOCK_SIZE = 4
# decay multiplier indexed by the L0 norm of a full-size block
DECAY_MULTIPLIERS = (0.0, 4.0, 2.0, 1.0, 0.0)


@dataclass(frozen=True)
class BlockPartition:
    layout: tuple
    block_of: np.ndarray  # global weight index -> block id
    sizes: np.ndarray  # elements per block
    first_index: np.ndarray  # first global weight index of each block
    tensor_blocks: tuple  # (name, first block, stop block) per tensor

    @property
    def num_blocks(self) -> int:
        return self.sizes.size

    def members(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.block_of == b)


def _block_keys(shape, offset):
    if len(shape) == 2:
        out, cin = shape
        o, i = np.indices(shape).reshape(2, -1)
        return offset + o * cin + (i // BLOCK_SIZE) * BLOCK_SIZE
    if len(shape) == 4:
        out, cin, kh, kw = shape
        o, i, y, x = np.indices(shape).reshape(4, -1)
        return offset + ((o * cin + (i // BLOCK_SIZE) * BLOCK_SIZE) * kh + y) * kw + x
    raise ValueError(f"cannot block a tensor of shape {shape}")


def build_partition(net) -> BlockPartition:
    """Partition the prunable weights of ``net`` into 4x1 blocks.

    ``net`` may be a :class:`NetworkSpec`, a :class:`ParamStore`, or an
    ordered ``{name: shape}`` mapping of the prunable tensors.
    """
    if isinstance(net, NetworkSpec):
        shapes = {n: net.param_shapes()[n] for n in net.prunable_names()}
    elif isinstance(net, ParamStore):
        shapes = {n: net.tensors[n].shape for n in net.prunable}
    else:
        shapes = dict(net)
    if not shapes:
        raise ValueError("network has no prunable tensors")
    layout, start = [], 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        layout.append(Segment(name, tuple(shape), start, start + size))
        start += size
    keys = np.concatenate([_block_keys(s.shape, s.start) for s in layout])
    first_index, block_of = np.unique(keys, return_inverse=True)
    sizes = np.bincount(block_of)
    tensor_blocks = tuple(
        (s.name, *map(int, np.searchsorted(first_index, [s.start, s.stop]))) for s in layout
    )
    return BlockPartition(tuple(layout), block_of, sizes, first_index, tensor_blocks)


def block_l2(values) -> float:
    return float(np.sqrt(np.sum(np.square(values))))


def block_l0(values, cutoff: float) -> int:
    """Number of elements with magnitude at or above ``cutoff``."""
    if cutoff < 0:
        raise ValueError("cutoff must be non-negative")
    return int(np.count_nonzero(np.abs(values) >= cutoff))


def block_norms(flat: np.ndarray, partition: BlockPartition) -> np.ndarray:
    return np.sqrt(np.bincount(partition.block_of, weights=flat * flat, minlength=partition.num_blocks))


def block_l0_counts(flat: np.ndarray, partition: BlockPartition, cutoff: float) -> np.ndarray:
    if cutoff < 0:
        raise ValueError("cutoff must be non-negative")
    hits = (np.abs(flat) >= cutoff).astype(np.int64)
    return np.bincount(partition.block_of, weights=hits, minlength=partition.num_blocks).astype(np.int64)


@dataclass
class BlockMaskState(_MaskedLayout):
    partition: BlockPartition
    block_kept: np.ndarray
    weight_kept: np.ndarray
    threshold: float = INITIAL_THRESHOLD
    explicitly_pruned: int = 0
    shed: int = 0
    max_pruned: float = 0.0

    @classmethod
    def fresh(cls, partition: BlockPartition, threshold: float = INITIAL_THRESHOLD) -> "BlockMaskState":
        return cls(partition, np.ones(partition.num_blocks, dtype=bool),
                   np.ones(partition.block_of.size, dtype=bool), threshold)

    @property
    def layout(self):
        return self.partition.layout

    @property
    def total(self) -> int:
        return self.block_kept.size

    @property
    def kept(self) -> int:
        return int(np.count_nonzero(self.block_kept))

    def block_dict(self) -> dict:
        """``{name: bool mask over that tensor's blocks}``."""
        return {name: self.block_kept[a:b].copy() for name, a, b in self.partition.tensor_blocks}

    def _drop(self, params, blocks, opt):
        self.block_kept[blocks] = False
        hit = np.isin(self.partition.block_of, blocks)
        idx = np.flatnonzero(hit & self.weight_kept)
        self.weight_kept[hit] = False
        self._zero(params, idx, opt)


def check_partition(params: ParamStore, partition: BlockPartition):
    if build_layout(params) != partition.layout:
        raise ValueError("block partition does not match parameter store")


def detect_degenerate_blocks(params: ParamStore, bmask: BlockMaskState, opt=None) -> np.ndarray:
    """Shed every kept block whose L2 norm is below the block threshold."""
    if bmask.threshold <= 0:
        return np.empty(0, dtype=np.int64)
    norms = block_norms(flat_prunable(params, bmask.layout), bmask.partition)
    blocks = np.flatnonzero(bmask.block_kept & (norms < bmask.threshold))
    if blocks.size:
        bmask.shed += blocks.size
        bmask._drop(params, blocks, opt)
    return blocks


def block_gmp_topup(params: ParamStore, bmask: BlockMaskState, r_target: float, opt=None) -> np.ndarray:
    """Prune the smallest-L2 kept blocks down to block keep-ratio ``r_target``."""
    k = targets_to_prune(bmask.kept, bmask.total, r_target)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    norms = block_norms(flat_prunable(params, bmask.layout), bmask.partition)
    chosen = np.sort(_select_smallest(norms, np.flatnonzero(bmask.block_kept), k))
    bmask.max_pruned = max(bmask.max_pruned, float(norms[chosen].max()))
    bmask.threshold = max(bmask.threshold, bmask.max_pruned)
    bmask.explicitly_pruned += chosen.size
    bmask._drop(params, chosen, opt)
    return chosen


def decay_multiplier(l0: int, size: int = BLOCK_SIZE) -> float:
    """Selective-decay multiplier for a block with ``l0`` live elements out of ``size``.

    Full blocks use the 0/4/2/1/0 table. For a short tail block the L0 norm is
    rescaled to four elements and the table is interpolated linearly, so an
    empty or full tail block still gets 0.
    """
    if not 0 <= l0 <= size:
        raise ValueError(f"L0 {l0} outside [0, {size}]")
    if size == BLOCK_SIZE or l0 in (0, size):
        return DECAY_MULTIPLIERS[l0] if size == BLOCK_SIZE else 0.0
    return float(np.interp(BLOCK_SIZE * l0 / size, np.arange(BLOCK_SIZE + 1), DECAY_MULTIPLIERS))


def selective_decay(bmask: BlockMaskState, params: ParamStore, base: float = 1e-4,
                    cutoff: float = INITIAL_THRESHOLD) -> dict:
    """Per-weight decay coefficients keyed by tensor name."""
    part = bmask.partition
    l0 = block_l0_counts(flat_prunable(params, part.layout), part, cutoff)
    table = np.zeros((BLOCK_SIZE + 1, BLOCK_SIZE + 1))
    for size in range(1, BLOCK_SIZE + 1):
        for n in range(size + 1):
            table[size, n] = decay_multiplier(n, size)
    per_block = base * table[part.sizes, l0] * bmask.block_kept
    flat = per_block[part.block_of]
    return {s.name: flat[s.start : s.stop].reshape(s.shape) for s in part.layout}
