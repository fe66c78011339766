"""RNG plumbing shared by the simulation engines.

Counter-based Philox streams keyed by (seed, replica) give bit-exact
reproducibility independent of thread count; replica results are always
merged in replica order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed: int, replica: int = 0) -> np.random.Generator:
    key = np.array([seed & _MASK64, replica & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class AliasTable:
    """Walker alias method: O(1) draws from a fixed discrete distribution."""

    def __init__(self, weights: Sequence[float]):
        w = np.asarray(weights, dtype=float)
        if len(w) == 0 or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        self.total = float(w.sum())
        n = len(w)
        prob = w * n / self.total
        alias = np.zeros(n, dtype=np.int64)
        small = [i for i, p in enumerate(prob) if p < 1.0]
        large = [i for i, p in enumerate(prob) if p >= 1.0]
        prob = prob.copy()
        while small and large:
            s, l = small.pop(), large.pop()
            alias[s] = l
            prob[l] -= 1.0 - prob[s]
            (small if prob[l] < 1.0 else large).append(l)
        self.prob = prob
        self.alias = alias
        self.n = n

    def draw(self, gen: np.random.Generator) -> int:
        i = int(gen.integers(self.n))
        return i if gen.random() < self.prob[i] else int(self.alias[i])

    def draw_many(self, gen: np.random.Generator, size: int) -> np.ndarray:
        i = gen.integers(self.n, size=size)
        take = gen.random(size) < self.prob[i]
        return np.where(take, i, self.alias[i])

    def draw_u(self, u: float) -> int:
        """Draw from a single uniform: integer part picks the bucket, fraction decides."""
        scaled = u * self.n
        i = int(scaled)
        return i if scaled - i < self.prob[i] else int(self.alias[i])


class DrawBuffer:
    """Scalar uniforms and Exp(1) variates prefetched in fixed blocks.

    Per-call Generator draws dominate tight event loops; block refills keep the
    stream sequence (hence reproducibility) independent of consumption pattern.
    """

    def __init__(self, gen: np.random.Generator, block: int = 4096):
        self._gen = gen
        self._block = block
        self._u: np.ndarray = gen.random(block)
        self._iu = 0
        self._e: np.ndarray = gen.standard_exponential(block)
        self._ie = 0

    def uniform(self) -> float:
        if self._iu == self._block:
            self._u = self._gen.random(self._block)
            self._iu = 0
        v = self._u[self._iu]
        self._iu += 1
        return float(v)

    def std_exponential(self) -> float:
        if self._ie == self._block:
            self._e = self._gen.standard_exponential(self._block)
            self._ie = 0
        v = self._e[self._ie]
        self._ie += 1
        return float(v)


def parallel_map(fn: Callable, items: Iterable, threads: int = 1) -> list:
    """Map preserving input order; results identical for any thread count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
