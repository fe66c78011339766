"""Exact finite-state verification on small tori.

Everything here works on the full configuration space of a torus encoded as
bit words, so it is the oracle side of the package: generator matrices,
stationarity residuals, particle-count sector solves, and duality computed
two independent ways through uniformized semigroups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import NotSymmetric, PropertyViolation, SectorReducible, TooLarge
from .lattice import Site
from .process import Configuration, DualState, _compiled
from .rates import RateFamily, check_symmetry

TOL_STRUCTURAL = 1e-12
TOL_SOLVE = 1e-10
TOL_DUALITY = 1e-9

_DENSE_SITE_CAP = 16
_SPARSE_SITE_CAP = 22
_SECTOR_SOLVE_CAP = 4096


@dataclass(frozen=True)
class GeneratorMatrix:
    """Generator on the full 2^N configuration space, row-indexed by bit word."""

    Q: Union[np.ndarray, sp.csr_matrix]
    n_sites: int
    sparse: bool

    def dense(self) -> np.ndarray:
        return self.Q.toarray() if self.sparse else self.Q

    def row_sum_residual(self) -> float:
        sums = np.asarray(self.Q.sum(axis=1)).ravel()
        return float(np.abs(sums).max()) if sums.size else 0.0


@dataclass(frozen=True)
class SectorDistribution:
    n: int
    words: np.ndarray  # configuration codes of the sector, ascending
    probs: np.ndarray

    def to_dict(self) -> dict:
        return {"n": self.n, "words": self.words.tolist(), "probs": self.probs.tolist()}


def _vector_images(pairs, mask: int, words: np.ndarray) -> np.ndarray:
    out = words & ~mask
    for s, d in pairs:
        out = out | (((words >> s) & 1) << d)
    return out


def build_generator(fam: RateFamily, sparse: bool = False) -> GeneratorMatrix:
    """Assemble the full generator; entry (w, w') sums the rates of expanded
    permutations sending w to w' != w, diagonal balancing each row to zero."""
    lat = fam.lattice
    if not lat.is_torus:
        raise ValueError("exact computations need a torus")
    N = lat.n_sites
    cap = _SPARSE_SITE_CAP if sparse else _DENSE_SITE_CAP
    if N > cap:
        raise TooLarge(f"{N} sites exceeds the {'sparse' if sparse else 'dense'} cap of {cap}")
    S = 1 << N
    if not fam.base:
        Q = sp.csr_matrix((S, S)) if sparse else np.zeros((S, S))
        return GeneratorMatrix(Q, N, sparse)
    comp = _compiled(fam)
    words = np.arange(S, dtype=np.int64)
    if sparse:
        rows, cols, vals = [], [], []
        diag = np.zeros(S)
        for e in range(len(comp.perms)):
            img = _vector_images(comp.pairs[e], comp.masks[e], words)
            moved = img != words
            src, dst = words[moved], img[moved]
            q = float(comp.rates[e])
            rows.append(src)
            cols.append(dst)
            vals.append(np.full(src.shape, q))
            np.add.at(diag, src, -q)
        Q = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(S, S),
        ).tocsr()
        Q = Q + sp.diags(diag)
        return GeneratorMatrix(Q.tocsr(), N, True)
    Q = np.zeros((S, S))
    for e in range(len(comp.perms)):
        img = _vector_images(comp.pairs[e], comp.masks[e], words)
        moved = img != words
        src, dst = words[moved], img[moved]
        q = float(comp.rates[e])
        # source indices are distinct within one permutation, so += is safe
        Q[src, dst] += q
        Q[src, src] -= q
    return GeneratorMatrix(Q, N, False)


def product_measure_vector(rho: float, N: int) -> np.ndarray:
    """Bernoulli(rho) product law over all 2^N configuration codes."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    pc = np.bitwise_count(np.arange(1 << N, dtype=np.uint64)).astype(np.int64)
    return np.power(rho, pc) * np.power(1.0 - rho, N - pc)


def stationarity_residual(nu: np.ndarray, G: GeneratorMatrix) -> float:
    """Max-norm of nu Q for a probability vector nu."""
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (1 << G.n_sites,):
        raise ValueError("distribution length does not match the state space")
    if nu.min() < -1e-12 or abs(nu.sum() - 1.0) > 1e-9:
        raise ValueError("not a probability vector")
    if G.sparse:
        res = G.Q.T.dot(nu)
    else:
        res = nu @ G.Q
    return float(np.abs(res).max())


def _sector_words(N: int, n: int) -> np.ndarray:
    words = np.arange(1 << N, dtype=np.int64)
    return words[np.bitwise_count(words.astype(np.uint64)).astype(np.int64) == n]


def sector_stationary(G: GeneratorMatrix, n: int) -> SectorDistribution:
    """Unique stationary law of the n-particle sector via dense solve.

    The sector must be closed (structural) and strongly connected; uniqueness
    is re-asserted through the nullity of the restricted generator.
    """
    N = G.n_sites
    if not 0 <= n <= N:
        raise ValueError("particle count outside 0..N")
    idx = _sector_words(N, n)
    if idx.size > _SECTOR_SOLVE_CAP:
        raise TooLarge(f"sector has {idx.size} states, dense solve capped at {_SECTOR_SOLVE_CAP}")
    rows = sp.csr_matrix(G.Q)[idx]
    sub = rows[:, idx].toarray()
    # closure: all off-sector mass in these rows must vanish
    leak = np.asarray(abs(rows).sum(axis=1)).ravel() - np.abs(sub).sum(axis=1)
    if idx.size and leak.size and leak.max() > TOL_STRUCTURAL:
        raise PropertyViolation(f"sector leaks mass {leak.max()} outside itself")
    if idx.size == 1:
        return SectorDistribution(n, idx, np.ones(1))
    adj = sp.csr_matrix((sub > 0).astype(np.int8))
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp > 1:
        raise SectorReducible(f"{n}-particle sector splits into {n_comp} strong components")
    sv = np.linalg.svd(sub.T, compute_uv=False)
    nullity = int(np.sum(sv <= max(sv.max(), 1.0) * TOL_SOLVE))
    if nullity != 1:
        raise SectorReducible(f"stationary law not unique (nullity {nullity})")
    M = np.vstack([sub.T, np.ones(idx.size)])
    b = np.zeros(idx.size + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, b, rcond=None)
    if pi.min() < -1e-12:
        raise PropertyViolation(f"stationary solve produced probability {pi.min()}")
    pi = np.clip(pi, 0.0, None)
    pi = pi / pi.sum()
    return SectorDistribution(n, idx, pi)


def _evolve_dist(p0: np.ndarray, Q, sparse: bool, t: float, tol: float = 1e-12,
                 extra_terms: int = 0) -> np.ndarray:
    """p0 e^{tQ} by Poisson-weighted powers of the jump kernel P = I + Q/Lam.

    Iterates are probability vectors throughout, so the expansion is stable;
    extra_terms extends the series past the tail cutoff for stability checks.
    """
    diag = Q.diagonal()
    lam = float(max(-diag.min(), 0.0)) if diag.size else 0.0
    if lam * t == 0.0:
        return p0.astype(float).copy()
    if lam * t > 700.0:
        raise TooLarge(f"uniformization rate * horizon = {lam * t:.3g} is too stiff")
    QT = Q.T.tocsr() if sparse else Q.T
    step = (lambda p: QT.dot(p)) if sparse else (lambda p: QT @ p)
    w = math.exp(-lam * t)
    p = p0.astype(float).copy()
    out = w * p
    cum = w
    k = 0
    remaining = extra_terms
    while cum < 1.0 - tol or remaining > 0:
        if cum >= 1.0 - tol:
            remaining -= 1
        k += 1
        p = p + step(p) / lam
        w *= lam * t / k
        out = out + w * p
        cum += w
    return out


def duality_exact(
    fam: RateFamily,
    eta0: Configuration,
    A: Union[DualState, Iterable[Site]],
    t: float,
    extra_terms: int = 0,
) -> Tuple[float, float]:
    """Both sides of the duality identity, each through its own uniformized
    semigroup: the full configuration chain from eta0 versus the |A|-subset
    chain from A.  For symmetric families the two numbers agree."""
    if not check_symmetry(fam):
        raise NotSymmetric("exact duality needs a symmetric family")
    lat = fam.lattice
    if not lat.is_torus:
        raise ValueError("exact duality needs a torus")
    if eta0.lattice != lat:
        raise ValueError("initial configuration lives on a different lattice")
    N = lat.n_sites
    if N > _DENSE_SITE_CAP:
        raise TooLarge(f"{N} sites exceeds the duality cap of {_DENSE_SITE_CAP}")
    dual = A if isinstance(A, DualState) else DualState.of(lat, A)
    mask = 0
    for s in dual.sites:
        mask |= 1 << lat.index(s)
    G = build_generator(fam, sparse=True)
    S = 1 << N

    p0 = np.zeros(S)
    p0[eta0.word] = 1.0
    pT = _evolve_dist(p0, G.Q, True, t, extra_terms=extra_terms)
    words = np.arange(S, dtype=np.int64)
    lhs = float(pT[(words & mask) == mask].sum())

    idx = _sector_words(N, len(dual.sites))
    sub = G.Q[idx][:, idx].tocsr()
    q0 = np.zeros(idx.size)
    q0[int(np.searchsorted(idx, mask))] = 1.0
    qT = _evolve_dist(q0, sub, True, t, extra_terms=extra_terms)
    rhs = float(qT[(idx & ~eta0.word) == 0].sum())
    return lhs, rhs


@dataclass(frozen=True)
class FalsifierReport:
    witness_found: bool
    max_gap: float
    n_checked: int
    t: float
    eta0_sites: Optional[Tuple[Site, ...]]
    A_sites: Optional[Tuple[Site, ...]]
    lhs: Optional[float]
    rhs: Optional[float]

    def to_dict(self) -> dict:
        return {
            "witness_found": self.witness_found,
            "max_gap": self.max_gap,
            "n_checked": self.n_checked,
            "t": self.t,
            "eta0_sites": [list(s) for s in self.eta0_sites] if self.eta0_sites else None,
            "A_sites": [list(s) for s in self.A_sites] if self.A_sites else None,
            "lhs": self.lhs,
            "rhs": self.rhs,
        }


def asymmetric_duality_falsifier(fam: RateFamily, t: float) -> FalsifierReport:
    """Scan every initial configuration against every dual state of size 1 or
    2, reporting the largest |lhs - rhs|.  A gap above 1e-6 is a witness that
    the naive duality identity fails; finding none is reported, not asserted.
    """
    lat = fam.lattice
    if not lat.is_torus:
        raise ValueError("the falsifier needs a torus")
    N = lat.n_sites
    if N > 10:
        raise TooLarge(f"falsifier scans all pairs, capped at 10 sites (got {N})")
    G = build_generator(fam, sparse=True)
    S = 1 << N
    words = np.arange(S, dtype=np.int64)

    masks = [1 << i for i in range(N)]
    masks += [(1 << i) | (1 << j) for i in range(N) for j in range(i + 1, N)]

    best_gap = -1.0
    best: Optional[Tuple[int, int, float, float]] = None
    n_checked = 0
    for mask in masks:
        # lhs(eta0) for every eta0 at once: evolve the indicator as a column
        f = ((words & mask) == mask).astype(float)
        lhs_vec = _evolve_col(f, G.Q, t)
        # rhs(eta0): subset-chain law out of A, then a subset-sum over eta0
        nA = mask.bit_count()
        idx = _sector_words(N, nA)
        sub = G.Q[idx][:, idx].tocsr()
        q0 = np.zeros(idx.size)
        q0[int(np.searchsorted(idx, mask))] = 1.0
        qT = _evolve_dist(q0, sub, True, t)
        r_full = np.zeros(S)
        r_full[idx] = qT
        for i in range(N):
            has = ((words >> i) & 1).astype(bool)
            r_full[has] += r_full[words[has] ^ (1 << i)]
        gaps = np.abs(lhs_vec - r_full)
        n_checked += S
        top = int(np.argmax(gaps))
        if gaps[top] > best_gap:
            best_gap = float(gaps[top])
            best = (top, mask, float(lhs_vec[top]), float(r_full[top]))
    found = best_gap > 1e-6
    eta0_sites = A_sites = None
    lhs = rhs = None
    if best is not None:
        w, mask, lhs, rhs = best
        eta0_sites = tuple(lat.site_at(i) for i in range(N) if (w >> i) & 1)
        A_sites = tuple(lat.site_at(i) for i in range(N) if (mask >> i) & 1)
    return FalsifierReport(found, best_gap, n_checked, t, eta0_sites, A_sites, lhs, rhs)


def _evolve_col(f: np.ndarray, Q: sp.csr_matrix, t: float, tol: float = 1e-12) -> np.ndarray:
    """e^{tQ} f for a column function f, through the same jump-kernel series."""
    diag = Q.diagonal()
    lam = float(max(-diag.min(), 0.0)) if diag.size else 0.0
    if lam * t == 0.0:
        return f.astype(float).copy()
    if lam * t > 700.0:
        raise TooLarge(f"uniformization rate * horizon = {lam * t:.3g} is too stiff")
    w = math.exp(-lam * t)
    g = f.astype(float).copy()
    out = w * g
    cum = w
    k = 0
    while cum < 1.0 - tol:
        k += 1
        g = g + Q.dot(g) / lam
        w *= lam * t / k
        out = out + w * g
        cum += w
    return out
