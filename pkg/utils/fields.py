"""
Multi-index coefficient fields.

A field maps K-dimensional nonnegative integer indices n to a fixed-shape
block (an M x M matrix, a 1 x M row, ...). Entries live in a dense box
[0, extent]^K but only the simplex |n| <= extent is ever populated, so the
level structure |n| = sum_k n_k drives every recursion. Dense storage keeps
each level update a handful of vectorized numpy operations.
"""
from functools import lru_cache
from itertools import product
from typing import Iterator, Tuple

import numpy as np

from utils.errors import BudgetExceeded


@lru_cache(maxsize=64)
def level_grid(ndim: int, extent: int) -> np.ndarray:
    """|n| for every cell of the box [0, extent]^ndim."""
    grid = np.indices((extent + 1,) * ndim).sum(axis=0)
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=2048)
def level_cells(ndim: int, level: int) -> Tuple[np.ndarray, ...]:
    """Index arrays of the cells with |n| == level, in lexicographic order."""
    idx = np.nonzero(level_grid(ndim, level) == level)
    for a in idx:
        a.setflags(write=False)
    return idx


def box(extent: int, ndim: int) -> Tuple[slice, ...]:
    """Slices selecting [0, extent]^ndim."""
    return (slice(0, extent + 1),) * ndim


def simplex_size(ndim: int, level: int) -> int:
    """Number of n in Z^ndim with |n| <= level."""
    size = 1
    for i in range(1, ndim + 1):
        size = size * (level + i) // i
    return size


class MultiIndexField:
    def __init__(self, ndim: int, block_shape: Tuple[int, ...], extent: int = 0,
                 budget: int = None):
        self.ndim = ndim
        self.block_shape = tuple(block_shape)
        self.budget = budget
        self._check_budget(extent)
        self.data = np.zeros((extent + 1,) * ndim + self.block_shape)

    def _check_budget(self, extent: int):
        if self.budget is None:
            return
        entries = (extent + 1) ** self.ndim * int(np.prod(self.block_shape, dtype=np.int64))
        if entries > self.budget:
            raise BudgetExceeded(extent, entries, self.budget)

    @property
    def extent(self) -> int:
        return self.data.shape[0] - 1

    def grow(self, extent: int):
        """Enlarge the box to [0, extent]^K, keeping stored entries."""
        if extent <= self.extent:
            return
        self._check_budget(extent)
        pad = [(0, extent - self.extent)] * self.ndim + [(0, 0)] * len(self.block_shape)
        self.data = np.pad(self.data, pad)

    def levels(self) -> np.ndarray:
        return level_grid(self.ndim, self.extent)

    def truncate(self, level: int):
        """Zero every entry with |n| > level."""
        if level < self.ndim * self.extent:
            self.data[self.levels() > level] = 0.0

    def level_sums(self, upto: int = None) -> np.ndarray:
        """sum_{|n| = L} field(n) for L = 0..upto, as an array (upto + 1, *block)."""
        upto = self.extent if upto is None else upto
        grid = self.levels().ravel()
        flat = self.data.reshape(grid.size, -1)
        keep = grid <= upto
        out = np.empty((upto + 1, flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.bincount(grid[keep], weights=flat[keep, j], minlength=upto + 1)
        return out.reshape((upto + 1,) + self.block_shape)

    def total(self, upto: int = None) -> np.ndarray:
        return self.level_sums(upto).sum(axis=0)

    def aggregate(self) -> 'MultiIndexField':
        """One-dimensional field of level sums (the total-count view)."""
        agg = MultiIndexField(1, self.block_shape, self.extent, self.budget)
        agg.data[...] = self.level_sums()
        return agg

    def get(self, n: Tuple[int, ...]) -> np.ndarray:
        n = tuple(int(i) for i in n)
        if any(i < 0 or i > self.extent for i in n):
            return np.zeros(self.block_shape)
        return self.data[n]

    def items(self, upto: int = None) -> Iterator[Tuple[Tuple[int, ...], np.ndarray]]:
        """(n, block) pairs over |n| <= upto in lexicographic order of n."""
        upto = self.extent if upto is None else upto
        for n in product(range(min(upto, self.extent) + 1), repeat=self.ndim):
            if sum(n) <= upto:
                yield n, self.data[n]

    def crop(self, level: int) -> 'MultiIndexField':
        """New field holding entries |n| <= level in the box [0, level]^K."""
        level = max(0, min(level, self.extent))
        out = MultiIndexField(self.ndim, self.block_shape, level, self.budget)
        out.data[...] = self.data[box(level, self.ndim)]
        out.truncate(level)
        return out
