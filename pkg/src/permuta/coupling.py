"""Coupled constructions for pairs of processes.

Three engines live here: the I/J/E triple over two tagged points with the
g-function estimators, the two-discrepancy coupling driven by per-range
transition tables, and the discrepancy-monotone general coupling.  The
tables are built by pure word-level functions so tests can sum their rates
symbolically; exhaustive small-range checks of the two combinatorial facts
the tables rely on (cyclic covers exist, discrepancies never increase) are
at the bottom.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import BadInitial, NoCover, NotRangeClosed, PropertyViolation
from .lattice import Lattice, Site
from .permutation import (
    FinitePermutation,
    canonical_range_order,
    derangement_count,
    enumerate_cyclic,
    power,
    select_sigma_general,
    select_sigma_two_discrepancy,
    word_apply,
)
from .process import Configuration, Estimate, _compiled
from .rates import FamilyReport, RateFamily, check_range_closure, require_simulatable
from .sampling import DrawBuffer, parallel_map, substream

Word = Tuple[int, ...]


def _tadd(x: Site, v: Site, lat: Lattice) -> Site:
    out = tuple(a + b for a, b in zip(x, v))
    return lat.wrap(out) if lat.is_torus else out


def _tsub(x: Site, v: Site, lat: Lattice) -> Site:
    out = tuple(a - b for a, b in zip(x, v))
    return lat.wrap(out) if lat.is_torus else out


# ---------------------------------------------------------------------------
# the I/J/E triple over two tagged points

@dataclass(frozen=True)
class TripleState:
    """Positions of the three coupled pair processes; identical until decoupling."""

    I: Tuple[Site, Site]
    J: Tuple[Site, Site]
    E: Tuple[Site, Site]
    decoupled: bool
    T_dec: Optional[float]

    def __post_init__(self) -> None:
        if not self.decoupled and not (self.I == self.J == self.E):
            raise PropertyViolation("I, J, E must coincide before decoupling")


@dataclass(frozen=True)
class TripleEvent:
    t: float
    process: str  # "shared", "I", "J", "E"
    covers: int  # bit 0: first point in range, bit 1: second
    label: Optional[int]  # which point's clock fired (both-cover and I events)
    acted_on_E: Optional[bool]  # for both-cover arrivals presented to E


@dataclass(frozen=True)
class TripleResult:
    history: Tuple[TripleState, ...]
    events: Tuple[TripleEvent, ...]
    final: TripleState
    counters: Dict[str, int]


class _PairClocks:
    """Expanded permutations covering either of two tagged points.

    Entries are cached by the (wrapped) separation vector and stored relative
    to the first point, so every revisited geometry reuses one build.
    """

    def __init__(self, fam: RateFamily):
        self.lat = fam.lattice
        self.base = fam.base
        self._cache: dict = {}

    def entries(self, p1: Site, p2: Site):
        delta = _tsub(p2, p1, self.lat)
        hit = self._cache.get(delta)
        if hit is None:
            hit = self._build(delta)
            self._cache[delta] = hit
        return hit

    def _build(self, delta: Site):
        lat = self.lat
        origin = tuple(0 for _ in range(lat.dimension))
        entries: List[Tuple[int, Site, int, float]] = []
        seen = set()
        for p in (origin, delta):
            for bidx, (perm, q) in enumerate(self.base):
                for r in sorted(perm.range_sites):
                    v = _tsub(p, r, lat)
                    key = (bidx, v)
                    if key in seen:
                        continue
                    seen.add(key)
                    rng = {_tadd(s, v, lat) for s in perm.range_sites}
                    covers = (origin in rng) | ((delta in rng) << 1)
                    if covers:
                        entries.append((bidx, v, covers, q))
        cum_cov: List[float] = []
        tot = 0.0
        for _, _, covers, q in entries:
            tot += q * (((covers & 1)) + (covers >> 1))
            cum_cov.append(tot)
        return entries, cum_cov, tot

    def apply_point(self, bidx: int, v_abs: Site, x: Site) -> Site:
        y = self.base[bidx][0](_tsub(x, v_abs, self.lat))
        return _tadd(y, v_abs, self.lat)


def _pick_entry(entries, cum, total, u: float):
    return entries[bisect_right(cum, u * total)]


def _shared_phase(clocks: _PairClocks, pair, t, T, buf):
    """Run the common pair until the first both-cover arrival or the horizon.

    Returns (t, pair, arrival) with arrival = (bidx, v_abs, label) of the
    decoupling event, or arrival = None if T was reached first.
    """
    lat = clocks.lat
    while True:
        entries, cum, total = clocks.entries(*pair)
        t += buf.std_exponential() / total
        if t > T:
            return t, pair, None
        bidx, v, covers, _ = _pick_entry(entries, cum, total, buf.uniform())
        v_abs = _tadd(pair[0], v, lat)
        if covers == 3:
            label = 1 if buf.uniform() < 0.5 else 2
            return t, pair, (bidx, v_abs, label)
        # single-cover move keeps all three processes identical
        moved = clocks.apply_point(bidx, v_abs, pair[0 if covers == 1 else 1])
        pair = (moved, pair[1]) if covers == 1 else (pair[0], moved)


def _evolve_E(clocks, pair, t, T, buf, stop_on_jump, sink=None):
    """Pair process with fair thinning of both-cover arrivals (doubled clock).

    Returns (t_first_jump or None, pair, arrivals, acted)."""
    arrivals = acted = 0
    t_jump = None
    while True:
        entries, cum, total = clocks.entries(*pair)
        t += buf.std_exponential() / total
        if t > T:
            return t_jump, pair, arrivals, acted
        bidx, v, covers, _ = _pick_entry(entries, cum, total, buf.uniform())
        v_abs = _tadd(pair[0], v, clocks.lat)
        if covers == 3:
            arrivals += 1
            act = buf.uniform() < 0.5
            if act:
                acted += 1
                pair = tuple(clocks.apply_point(bidx, v_abs, x) for x in pair)
                if t_jump is None:
                    t_jump = t
            if sink is not None:
                sink(TripleEvent(t, "E", covers, None, act), pair)
            if act and stop_on_jump:
                return t_jump, pair, arrivals, acted
        else:
            moved = clocks.apply_point(bidx, v_abs, pair[0 if covers == 1 else 1])
            pair = (moved, pair[1]) if covers == 1 else (pair[0], moved)
            if sink is not None:
                sink(TripleEvent(t, "E", covers, None, None), pair)


def _evolve_I(clocks, pair, t, T, buf, stop_on_meet, sink=None):
    """Two independent one-point walks driven by the per-point covering clocks.

    Returns (t_first_meet or None, pair).  The walks keep moving after a
    meet; only the first meet time is reported."""
    t_meet = t if pair[0] == pair[1] else None
    if t_meet is not None and stop_on_meet:
        return t_meet, pair
    while True:
        entries, cum, total = clocks.entries(*pair)
        t += buf.std_exponential() / total
        if t > T:
            return t_meet, pair
        bidx, v, covers, _ = _pick_entry(entries, cum, total, buf.uniform())
        v_abs = _tadd(pair[0], v, clocks.lat)
        if covers == 3:
            label = 1 if buf.uniform() < 0.5 else 2
        else:
            label = 1 if covers == 1 else 2
        moved = clocks.apply_point(bidx, v_abs, pair[label - 1])
        pair = (moved, pair[1]) if label == 1 else (pair[0], moved)
        if sink is not None:
            sink(TripleEvent(t, "I", covers, label, None), pair)
        if pair[0] == pair[1] and t_meet is None:
            t_meet = t
            if stop_on_meet:
                return t_meet, pair


def _evolve_J(clocks, pair, t, T, buf, sink=None):
    """Pair process applying every covering arrival to both points (no thinning).

    Returns (t_first_both_jump or None, pair)."""
    t_jump = None
    while True:
        entries, cum, total = clocks.entries(*pair)
        t += buf.std_exponential() / total
        if t > T:
            return t_jump, pair
        bidx, v, covers, _ = _pick_entry(entries, cum, total, buf.uniform())
        v_abs = _tadd(pair[0], v, clocks.lat)
        pair = tuple(clocks.apply_point(bidx, v_abs, x) for x in pair)
        if covers == 3 and t_jump is None:
            t_jump = t
        if sink is not None:
            sink(TripleEvent(t, "J", covers, None, None), pair)


def run_triple(
    x: Tuple[Site, Site],
    fam: RateFamily,
    T: float,
    seed: int,
    record_history: bool = True,
) -> TripleResult:
    """Full trajectory of the shared construction and the three decoupled laws."""
    require_simulatable(fam)
    lat = fam.lattice
    p1, p2 = (lat.wrap(x[0]) if lat.is_torus else tuple(x[0]),
              lat.wrap(x[1]) if lat.is_torus else tuple(x[1]))
    if p1 == p2:
        raise ValueError("the two tagged points must differ")
    clocks = _PairClocks(fam)
    buf = DrawBuffer(substream(seed))
    events: List[TripleEvent] = []
    history: List[TripleState] = []
    counters: Dict[str, Any] = {"shared_events": 0, "both_cover_arrivals": 0,
                                "e_acted": 0, "i_met": 0, "e_jumped": 0, "j_jumped": 0}

    # shared phase, event by event so the identity I = J = E is asserted live
    t, pair = 0.0, (p1, p2)
    arrival = None
    while True:
        entries, cum, total = clocks.entries(*pair)
        t_next = t + buf.std_exponential() / total
        if t_next > T:
            break
        t = t_next
        bidx, v, covers, _ = _pick_entry(entries, cum, total, buf.uniform())
        v_abs = _tadd(pair[0], v, lat)
        if covers == 3:
            arrival = (bidx, v_abs, 1 if buf.uniform() < 0.5 else 2)
            break
        moved = clocks.apply_point(bidx, v_abs, pair[0 if covers == 1 else 1])
        pair = (moved, pair[1]) if covers == 1 else (pair[0], moved)
        counters["shared_events"] += 1
        events.append(TripleEvent(t, "shared", covers, covers, None))
        if record_history:
            history.append(TripleState(pair, pair, pair, False, None))

    if arrival is None:
        final = TripleState(pair, pair, pair, False, None)
        return TripleResult(tuple(history), tuple(events), final, counters)

    bidx, v_abs, label = arrival
    T_dec = t
    j_pair = tuple(clocks.apply_point(bidx, v_abs, p) for p in pair)
    e_acted = label == 1
    e_pair = j_pair if e_acted else pair
    i_pair = (
        (clocks.apply_point(bidx, v_abs, pair[0]), pair[1])
        if label == 1
        else (pair[0], clocks.apply_point(bidx, v_abs, pair[1]))
    )
    counters["both_cover_arrivals"] += 1
    counters["e_acted"] += int(e_acted)
    counters["j_jumped"] = 1
    counters["e_jumped"] = int(e_acted)
    counters["i_met"] = int(i_pair[0] == i_pair[1])
    events.append(TripleEvent(T_dec, "shared", 3, label, e_acted))
    if record_history:
        history.append(TripleState(i_pair, j_pair, e_pair, True, T_dec))

    # the three processes continue independently; their event streams are
    # replayed in time order to rebuild joint snapshots
    timeline: List[Tuple[TripleEvent, Tuple[Site, Site]]] = []

    def sink(ev, p):
        timeline.append((ev, p))
    t_meet, i_final = _evolve_I(clocks, i_pair, T_dec, T, buf, stop_on_meet=False, sink=sink)
    _, j_final = _evolve_J(clocks, j_pair, T_dec, T, buf, sink=sink)
    t_jump, e_final, arr, act = _evolve_E(clocks, e_pair, T_dec, T, buf,
                                          stop_on_jump=False, sink=sink)
    counters["both_cover_arrivals"] += arr
    counters["e_acted"] += act
    counters["i_met"] |= int(t_meet is not None)
    counters["e_jumped"] |= int(t_jump is not None)
    if counters["e_jumped"] and not counters["j_jumped"]:
        raise PropertyViolation("E had a both-point jump before J")
    if counters["i_met"] and not counters["j_jumped"]:
        raise PropertyViolation("I met before J had a both-point jump")
    timeline.sort(key=lambda item: item[0].t)
    cur = {"I": i_pair, "J": j_pair, "E": e_pair}
    for ev, p in timeline:
        events.append(ev)
        cur[ev.process] = p
        if record_history:
            history.append(TripleState(cur["I"], cur["J"], cur["E"], True, T_dec))
    final = TripleState(i_final, j_final, e_final, True, T_dec)
    return TripleResult(tuple(history), tuple(events), final, counters)


@dataclass(frozen=True)
class GEstimates:
    """Before-horizon estimates of the three meeting/jump probabilities."""

    g2: Estimate
    gbar2: Estimate
    gbarbar2: Estimate
    horizon: float
    n_runs: int
    both_cover_arrivals: int
    e_acted: int
    runs_E_without_J: int
    runs_I_without_J: int
    runs_I_without_E: int

    def to_dict(self) -> dict:
        return {
            "g2": {"mean": self.g2.mean, "std_error": self.g2.std_error, "n": self.g2.n_samples},
            "gbar2": {"mean": self.gbar2.mean, "std_error": self.gbar2.std_error, "n": self.gbar2.n_samples},
            "gbarbar2": {"mean": self.gbarbar2.mean, "std_error": self.gbarbar2.std_error, "n": self.gbarbar2.n_samples},
            "horizon": self.horizon,
            "n_runs": self.n_runs,
            "both_cover_arrivals": self.both_cover_arrivals,
            "e_acted": self.e_acted,
            "runs_E_without_J": self.runs_E_without_J,
            "runs_I_without_J": self.runs_I_without_J,
            "runs_I_without_E": self.runs_I_without_E,
        }


def _g_one_run(clocks: _PairClocks, x, T: float, gen) -> Tuple[int, int, int, int, int]:
    buf = DrawBuffer(gen, block=1024)
    t, pair, arrival = _shared_phase(clocks, x, 0.0, T, buf)
    if arrival is None:
        return 0, 0, 0, 0, 0
    bidx, v_abs, label = arrival
    hit_j = 1
    arrivals, acted = 1, int(label == 1)
    hit_e = int(label == 1)
    if label == 1:
        i_pair = (clocks.apply_point(bidx, v_abs, pair[0]), pair[1])
    else:
        i_pair = (pair[0], clocks.apply_point(bidx, v_abs, pair[1]))
    hit_i = int(i_pair[0] == i_pair[1])
    if not hit_e:
        t_jump, _, arr2, act2 = _evolve_E(clocks, pair, t, T, buf, stop_on_jump=True)
        hit_e = int(t_jump is not None)
        arrivals += arr2
        acted += act2
    if not hit_i:
        t_meet, _ = _evolve_I(clocks, i_pair, t, T, buf, stop_on_meet=True)
        hit_i = int(t_meet is not None)
    return hit_i, hit_e, hit_j, arrivals, acted


def estimate_g(
    x: Tuple[Site, Site],
    fam: RateFamily,
    T: float,
    n: int,
    seed: int,
    threads: int = 1,
) -> GEstimates:
    """Monte Carlo g2, gbar2, gbarbar2 over n runs of the triple construction."""
    require_simulatable(fam)
    lat = fam.lattice
    p = (lat.wrap(x[0]) if lat.is_torus else tuple(x[0]),
         lat.wrap(x[1]) if lat.is_torus else tuple(x[1]))
    if p[0] == p[1]:
        raise ValueError("the two tagged points must differ")
    clocks = _PairClocks(fam)
    runs = parallel_map(lambda i: _g_one_run(clocks, p, T, substream(seed, i)), range(n), threads)
    ci = ce = cj = arrivals = acted = 0
    e_wo_j = i_wo_j = i_wo_e = 0
    for hit_i, hit_e, hit_j, arr, act in runs:
        ci += hit_i
        ce += hit_e
        cj += hit_j
        arrivals += arr
        acted += act
        e_wo_j += int(hit_e and not hit_j)
        i_wo_j += int(hit_i and not hit_j)
        i_wo_e += int(hit_i and not hit_e)
    if e_wo_j:
        raise PropertyViolation("E had a both-point jump in a run where J had none")
    if i_wo_j:
        raise PropertyViolation("I met in a run where J had no both-point jump")
    return GEstimates(
        g2=Estimate.from_bernoulli(ci, n),
        gbar2=Estimate.from_bernoulli(ce, n),
        gbarbar2=Estimate.from_bernoulli(cj, n),
        horizon=T,
        n_runs=n,
        both_cover_arrivals=arrivals,
        e_acted=acted,
        runs_E_without_J=e_wo_j,
        runs_I_without_J=i_wo_j,
        runs_I_without_E=i_wo_e,
    )


@dataclass(frozen=True)
class CheckLine:
    name: str
    kind: str  # "pathwise", "exact", "statistical"
    passed: bool
    lhs: float
    rhs: float

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "passed": self.passed,
                "lhs": self.lhs, "rhs": self.rhs}


@dataclass(frozen=True)
class GInequalityReport:
    checks: Tuple[CheckLine, ...]
    factor: float
    passed: bool

    def to_dict(self) -> dict:
        return {"factor": self.factor, "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks]}


def check_g_inequalities(g: GEstimates, report: FamilyReport) -> GInequalityReport:
    """Pathwise dominations by J, the statistical chain middle, and the two
    quantitative bounds with one-sided 3 sigma allowances."""
    if report.M_II is None:
        raise ValueError("M_II undefined (family not strictly range closed)")
    factor = 1.0 / (report.M_II * derangement_count(report.M_I))
    sig = math.sqrt(g.g2.std_error ** 2 + g.gbar2.std_error ** 2)
    sig_jb = math.sqrt(g.gbar2.std_error ** 2 + g.gbarbar2.std_error ** 2)
    sig_ji = math.sqrt(g.g2.std_error ** 2 + g.gbarbar2.std_error ** 2)
    checks = [
        CheckLine("J_dominates_E_pathwise", "pathwise", g.runs_E_without_J == 0,
                  float(g.runs_E_without_J), 0.0),
        CheckLine("J_dominates_I_pathwise", "pathwise", g.runs_I_without_J == 0,
                  float(g.runs_I_without_J), 0.0),
        CheckLine("gbarbar_geq_gbar", "exact", g.gbarbar2.mean >= g.gbar2.mean,
                  g.gbarbar2.mean, g.gbar2.mean),
        CheckLine("gbarbar_geq_g", "exact", g.gbarbar2.mean >= g.g2.mean,
                  g.gbarbar2.mean, g.g2.mean),
        CheckLine("gbar_geq_g_statistical", "statistical",
                  g.gbar2.mean >= g.g2.mean - 3 * sig, g.gbar2.mean, g.g2.mean - 3 * sig),
        CheckLine("gbar_geq_half_gbarbar", "statistical",
                  g.gbar2.mean >= 0.5 * g.gbarbar2.mean - 3 * sig_jb,
                  g.gbar2.mean, 0.5 * g.gbarbar2.mean - 3 * sig_jb),
        CheckLine("g_geq_factor_gbarbar", "statistical",
                  g.g2.mean >= factor * g.gbarbar2.mean - 3 * sig_ji,
                  g.g2.mean, factor * g.gbarbar2.mean - 3 * sig_ji),
    ]
    if g.both_cover_arrivals:
        frac = g.e_acted / g.both_cover_arrivals
        tol = 4 * math.sqrt(0.25 / g.both_cover_arrivals)
        checks.append(CheckLine("e_thinning_fair", "statistical",
                                abs(frac - 0.5) <= tol, frac, 0.5))
    return GInequalityReport(tuple(checks), factor, all(c.passed for c in checks))


# ---------------------------------------------------------------------------
# word-level transition tables (shared by both coupling engines and the
# symbolic rate-conservation tests)

@dataclass(frozen=True)
class TableRow:
    """One coupled transition on a range: new restricted words plus, for the
    marginal bookkeeping, the permutation applied to each side (None = held)."""

    rate: Any
    kind: str  # "merge", "swap", "stair", "diag"
    index: Optional[int]
    a_word: Word
    b_word: Word
    a_map: Optional[FinitePermutation]
    b_map: Optional[FinitePermutation]


def _map_or_none(p: FinitePermutation) -> Optional[FinitePermutation]:
    return None if p.is_identity() else p


def recurrent_block_rows(
    members: Mapping[FinitePermutation, Any],
    R_order: Sequence[Site],
    a: Word,
    b: Word,
    lat: Optional[Lattice] = None,
) -> List[TableRow]:
    """Transition rows for a range holding both discrepancies (two-discrepancy
    coupling): merging staircase rows and the type-swap row at the minimum
    rate, diagonal residuals for the rest."""
    r = len(R_order)
    a, b = tuple(a), tuple(b)
    sigma = select_sigma_two_discrepancy(R_order, a, b, lat)
    m = min(members.values())
    rows: List[TableRow] = []
    if r == 2:
        # sole derangement of a pair is the swap; one-sided rows, both merging
        rows.append(TableRow(m, "merge", 1, b, b, sigma, None))
        rows.append(TableRow(m, "merge", 0, a, a, None, sigma))
        return rows
    for i in range(1, r - 1):
        w = word_apply(power(sigma, i), R_order, b)
        rows.append(TableRow(m, "merge", i, w, w, power(sigma, i + 1), power(sigma, i)))
    rows.append(TableRow(m, "swap", r - 1, b, a, sigma, power(sigma, r - 1)))
    powers = {power(sigma, i) for i in range(1, r)}
    for i in range(1, r):
        p = power(sigma, i)
        if p not in members:
            raise NotRangeClosed(f"missing power {p} of the selected cycle on {list(R_order)}")
        resid = members[p] - m
        if resid > 0:
            rows.append(TableRow(resid, "diag", None,
                                 word_apply(p, R_order, a), word_apply(p, R_order, b), p, p))
    for p, q in members.items():
        if p not in powers:
            rows.append(TableRow(q, "diag", None,
                                 word_apply(p, R_order, a), word_apply(p, R_order, b), p, p))
    return rows


def general_block_rows(
    members: Mapping[FinitePermutation, Any],
    R_order: Sequence[Site],
    a: Word,
    b: Word,
    lat: Optional[Lattice] = None,
    strict: bool = True,
) -> Optional[List[TableRow]]:
    """Transition rows for a range where the restrictions differ (general
    coupling).  The majority side is covered by a cyclic sigma whose full
    staircase fires at the minimum rate; residuals run diagonally.

    Returns None when a required power of the selected cycle is absent
    (possible under relaxed closure); the caller then holds the range on the
    diagonal, which keeps marginals exact at the cost of never merging there.
    """
    r = len(R_order)
    a, b = tuple(a), tuple(b)
    if a == b:
        raise ValueError("equal restrictions evolve diagonally, not through a block")
    a_major = sum(a) >= sum(b)
    try:
        sigma = (select_sigma_general(R_order, a, b, lat) if a_major
                 else select_sigma_general(R_order, b, a, lat))
    except NoCover:
        if strict:
            raise PropertyViolation("no cyclic cover on a strictly closed range")
        return None
    powers = {power(sigma, i) for i in range(1, r)}
    if not powers <= set(members):
        if strict:
            missing = next(p for p in powers if p not in members)
            raise NotRangeClosed(f"missing power {missing} of the selected cycle on {list(R_order)}")
        return None
    m = min(members.values())
    rows: List[TableRow] = []
    for i in range(r):
        if a_major:
            pa, pb = power(sigma, i + 1), power(sigma, i)
        else:
            pa, pb = power(sigma, i), power(sigma, i + 1)
        rows.append(TableRow(m, "stair", i,
                             word_apply(pa, R_order, a), word_apply(pb, R_order, b),
                             _map_or_none(pa), _map_or_none(pb)))
    for i in range(1, r):
        p = power(sigma, i)
        resid = members[p] - m
        if resid > 0:
            rows.append(TableRow(resid, "diag", None,
                                 word_apply(p, R_order, a), word_apply(p, R_order, b), p, p))
    for p, q in members.items():
        if p not in powers:
            rows.append(TableRow(q, "diag", None,
                                 word_apply(p, R_order, a), word_apply(p, R_order, b), p, p))
    return rows


# ---------------------------------------------------------------------------
# coupled states and the bit-level engines

def _bits_to_sites(word: int, lat: Lattice) -> frozenset:
    out = []
    i = 0
    while word:
        if word & 1:
            out.append(lat.site_at(i))
        word >>= 1
        i += 1
    return frozenset(out)


@dataclass(frozen=True)
class CoupledState:
    A: Configuration
    B: Configuration

    @property
    def Dplus(self) -> frozenset:
        return _bits_to_sites(self.A.word & ~self.B.word, self.A.lattice)

    @property
    def Dminus(self) -> frozenset:
        return _bits_to_sites(self.B.word & ~self.A.word, self.A.lattice)

    @property
    def D(self) -> int:
        return (self.A.word ^ self.B.word).bit_count()


@dataclass(frozen=True)
class CouplingEvent:
    t: float
    kind: str  # "staircase-i", "diagonal", "off-range"
    range_id: Optional[int]
    D_before: int
    D_after: int


@dataclass(frozen=True)
class CouplingResult:
    history: Tuple[CouplingEvent, ...]
    final: CoupledState
    coupled: bool
    T_couple: Optional[float]
    counters: Dict[str, Any]


class _RangeInfo:
    __slots__ = ("rid", "mask", "order", "positions", "members", "m", "Z", "size")

    def __init__(self, rid, mask, order, positions, members, m, Z):
        self.rid = rid
        self.mask = mask
        self.order = order
        self.positions = positions
        self.members = members  # perm -> (rate, expanded id)
        self.m = m
        self.Z = Z
        self.size = len(order)


class _CompiledBlock:
    __slots__ = ("alias_rows", "cum", "Z", "extra", "extra_rate")

    def __init__(self, alias_rows, cum, Z, extra, extra_rate):
        self.alias_rows = alias_rows
        self.cum = cum
        self.Z = Z
        self.extra = extra
        self.extra_rate = extra_rate


_DEGRADED = _CompiledBlock((), (), 0.0, None, 0.0)


def _range_index(fam: RateFamily):
    comp = _compiled(fam)
    lat = fam.lattice
    by_range: dict = {}
    for e, perm in enumerate(comp.perms):
        by_range.setdefault(perm.range_sites, []).append(e)
    infos = []
    range_of_eid = [0] * len(comp.perms)
    for rid, (R, eids) in enumerate(sorted(by_range.items(), key=lambda kv: sorted(kv[0]))):
        order = tuple(canonical_range_order(R, lat))
        positions = tuple(lat.index(s) for s in order)
        mask = 0
        for p in positions:
            mask |= 1 << p
        members = {comp.perms[e]: (float(comp.rates[e]), e) for e in eids}
        rates = [q for q, _ in members.values()]
        info = _RangeInfo(rid, mask, order, positions, members, min(rates), sum(rates))
        infos.append(info)
        for e in eids:
            range_of_eid[e] = rid
    return comp, infos, range_of_eid


def _pack(word: Word, positions) -> int:
    """Set bits of a restricted word at its absolute bit positions."""
    bits = 0
    for val, p in zip(word, positions):
        if val:
            bits |= 1 << p
    return bits


def _extract(word: int, positions) -> Word:
    return tuple((word >> p) & 1 for p in positions)


def _compile_block(rows, info: _RangeInfo) -> _CompiledBlock:
    if rows is None:
        return _DEGRADED
    alias_rows, cum, extra = [], [], None
    acc = 0.0
    for row in rows:
        bits_a = _pack(row.a_word, info.positions)
        bits_b = _pack(row.b_word, info.positions)
        eid_a = info.members[row.a_map][1] if row.a_map is not None else None
        eid_b = info.members[row.b_map][1] if row.b_map is not None else None
        compiled = (bits_a, bits_b, row.kind, row.index, eid_a, eid_b)
        if row.a_map is None:
            if extra is not None:
                raise PropertyViolation("more than one held-side row in a block")
            extra = (compiled, float(row.rate))
        else:
            acc += float(row.rate)
            alias_rows.append(compiled)
            cum.append(acc)
    if not math.isclose(acc, info.Z, rel_tol=1e-9, abs_tol=1e-12):
        raise PropertyViolation(f"block rows sum to {acc}, expected Z = {info.Z}")
    return _CompiledBlock(tuple(alias_rows), tuple(cum), acc,
                          extra[0] if extra else None, extra[1] if extra else 0.0)


def _event_kind(kind: str, index: Optional[int]) -> str:
    if kind in ("merge", "swap", "stair"):
        return f"staircase-{index}"
    return "diagonal"


def run_recurrent_coupling(
    A0: Configuration,
    B0: Configuration,
    fam: RateFamily,
    T: float,
    seed: int,
    stop_at_couple: bool = False,
    record_history: bool = True,
) -> CouplingResult:
    """Two-discrepancy coupling: both copies evolve together except on ranges
    holding both discrepancies, where the merging table fires.  The
    discrepancy count lives in {0, 2} and never increases (asserted)."""
    require_simulatable(fam)
    if not check_range_closure(fam, mode="strict").passed:
        raise NotRangeClosed("two-discrepancy coupling needs strict range closure")
    if A0.lattice != fam.lattice or B0.lattice != fam.lattice:
        raise BadInitial("initial configurations must live on the family lattice")
    Aw, Bw = A0.word, B0.word
    dp, dm = Aw & ~Bw, Bw & ~Aw
    if dp.bit_count() != 1 or dm.bit_count() != 1:
        raise BadInitial(
            "need exactly one discrepancy of each type, got "
            f"{dp.bit_count()} over-occupied and {dm.bit_count()} under-occupied"
        )
    comp, infos, range_of_eid = _range_index(fam)
    lat = fam.lattice
    two_ranges = [info for info in infos if info.size == 2]
    buf = DrawBuffer(substream(seed))
    block_cache: dict = {}
    a_marginal = [0] * len(comp.perms)
    counters = {"events": 0, "block_events": 0, "merges": 0, "swaps": 0,
                "block_diag": 0, "extra_events": 0}
    history: List[CouplingEvent] = []
    t, coupled, T_couple = 0.0, False, None

    def get_block(info, a, b):
        key = (info.rid, a, b)
        blk = block_cache.get(key)
        if blk is None:
            members = {p: q for p, (q, _) in info.members.items()}
            rows = recurrent_block_rows(members, info.order, a, b, lat)
            blk = _compile_block(rows, info)
            block_cache[key] = blk
        return blk

    while True:
        need = dp | dm
        X = 0.0
        live2 = []
        if not coupled and two_ranges:
            for info in two_ranges:
                if info.mask & need == need:
                    live2.append(info)
                    X += info.m
        total = comp.Q_tot + X
        t += buf.std_exponential() / total
        if t > T:
            break
        D_before = dp.bit_count() + dm.bit_count()
        u = buf.uniform() * total
        if u < X:
            # held-side row of a live transposition range
            acc = 0.0
            info = live2[-1]
            for cand in live2:
                acc += cand.m
                if u < acc:
                    info = cand
                    break
            blk = get_block(info, _extract(Aw, info.positions), _extract(Bw, info.positions))
            bits_a, bits_b, kind, index, eid_a, eid_b = blk.extra
            Aw = (Aw & ~info.mask) | bits_a
            Bw = (Bw & ~info.mask) | bits_b
            counters["block_events"] += 1
            counters["extra_events"] += 1
            if kind == "merge":
                counters["merges"] += 1
            rid, ekind = info.rid, _event_kind(kind, index)
        else:
            e = comp.alias.draw_u((u - X) / comp.Q_tot)
            info = infos[range_of_eid[e]]
            if coupled or (info.mask & need) != need:
                Aw = comp.apply_word(e, Aw)
                Bw = Aw if coupled else comp.apply_word(e, Bw)
                a_marginal[e] += 1
                rid, ekind = (info.rid, "off-range") if (info.mask & need) != need else (info.rid, "diagonal")
            else:
                blk = get_block(info, _extract(Aw, info.positions), _extract(Bw, info.positions))
                w = buf.uniform() * blk.Z
                bits_a, bits_b, kind, index, eid_a, eid_b = blk.alias_rows[bisect_right(blk.cum, w)]
                Aw = (Aw & ~info.mask) | bits_a
                Bw = (Bw & ~info.mask) | bits_b
                if eid_a is not None:
                    a_marginal[eid_a] += 1
                counters["block_events"] += 1
                if kind == "merge":
                    counters["merges"] += 1
                elif kind == "swap":
                    counters["swaps"] += 1
                else:
                    counters["block_diag"] += 1
                rid, ekind = info.rid, _event_kind(kind, index)
        dp, dm = Aw & ~Bw, Bw & ~Aw
        D_after = dp.bit_count() + dm.bit_count()
        counters["events"] += 1
        if D_after not in (0, 2) or D_after > D_before or dp.bit_count() != dm.bit_count():
            raise PropertyViolation(
                f"discrepancy count went {D_before} -> {D_after} (must stay in {{0,2}}, non-increasing)"
            )
        if coupled and D_after != 0:
            raise PropertyViolation("coupled copies separated")
        if D_after == 0 and not coupled:
            coupled, T_couple = True, t
        if record_history:
            history.append(CouplingEvent(t, ekind, rid, D_before, D_after))
        if coupled and stop_at_couple:
            break

    counters["a_marginal"] = a_marginal
    final = CoupledState(Configuration(lat, Aw), Configuration(lat, Bw))
    return CouplingResult(tuple(history), final, coupled, T_couple, counters)


def run_general_coupling(
    A0: Configuration,
    B0: Configuration,
    fam: RateFamily,
    T: float,
    seed: int,
    closure: str = "strict",
    stop_at_couple: bool = False,
    record_history: bool = True,
) -> CouplingResult:
    """Discrepancy-monotone coupling for arbitrary initial pairs.

    Ranges where the two restrictions agree evolve diagonally; the rest fire
    the staircase-plus-residuals table for the majority side.  D never
    increases and the per-range type counts never both increase (asserted)."""
    require_simulatable(fam)
    if closure not in ("strict", "relaxed"):
        raise ValueError("closure policy must be 'strict' or 'relaxed'")
    if not check_range_closure(fam, mode=closure).passed:
        raise NotRangeClosed(f"family fails {closure} range closure")
    if A0.lattice != fam.lattice or B0.lattice != fam.lattice:
        raise BadInitial("initial configurations must live on the family lattice")
    strict = closure == "strict"
    comp, infos, range_of_eid = _range_index(fam)
    lat = fam.lattice
    buf = DrawBuffer(substream(seed))
    block_cache: dict = {}
    a_marginal = [0] * len(comp.perms)
    counters = {"events": 0, "block_events": 0, "stair_events": 0, "merges": 0,
                "block_diag": 0, "extra_events": 0, "degraded_ranges": 0}
    history: List[CouplingEvent] = []
    dominance = (B0.word & ~A0.word) == 0
    Aw, Bw = A0.word, B0.word
    t, coupled, T_couple = 0.0, False, None

    def get_block(info, a, b):
        key = (info.rid, a, b)
        blk = block_cache.get(key)
        if blk is None:
            members = {p: q for p, (q, _) in info.members.items()}
            rows = general_block_rows(members, info.order, a, b, lat, strict=strict)
            blk = _compile_block(rows, info)
            if blk is _DEGRADED:
                counters["degraded_ranges"] += 1
            block_cache[key] = blk
        return blk

    while True:
        diff = Aw ^ Bw
        X = 0.0
        live: List[Tuple[_RangeInfo, _CompiledBlock]] = []
        if diff:
            for info in infos:
                if diff & info.mask:
                    blk = get_block(info, _extract(Aw, info.positions), _extract(Bw, info.positions))
                    if blk.extra is not None:
                        live.append((info, blk))
                        X += blk.extra_rate
        total = comp.Q_tot + X
        t += buf.std_exponential() / total
        if t > T:
            break
        D_before = diff.bit_count()
        u = buf.uniform() * total
        if u < X:
            acc = 0.0
            info, blk = live[-1]
            for cand in live:
                acc += cand[1].extra_rate
                if u < acc:
                    info, blk = cand
                    break
            bits_a, bits_b, kind, index, eid_a, eid_b = blk.extra
            row = (bits_a, bits_b, kind, index, eid_a, eid_b)
            fired = (info, row, True)
        else:
            e = comp.alias.draw_u((u - X) / comp.Q_tot)
            info = infos[range_of_eid[e]]
            if not diff & info.mask:
                Aw = comp.apply_word(e, Aw)
                Bw = Aw if not diff else comp.apply_word(e, Bw)
                a_marginal[e] += 1
                counters["events"] += 1
                if record_history:
                    history.append(CouplingEvent(t, "off-range", info.rid, D_before, D_before))
                continue
            blk = get_block(info, _extract(Aw, info.positions), _extract(Bw, info.positions))
            if blk is _DEGRADED:
                # relaxed closure left no usable staircase here; hold the diagonal
                Aw = comp.apply_word(e, Aw)
                Bw = comp.apply_word(e, Bw)
                a_marginal[e] += 1
                counters["events"] += 1
                counters["block_diag"] += 1
                D_after = (Aw ^ Bw).bit_count()
                if D_after > D_before:
                    raise PropertyViolation("diagonal move increased the discrepancy count")
                if record_history:
                    history.append(CouplingEvent(t, "diagonal", info.rid, D_before, D_after))
                continue
            w = buf.uniform() * blk.Z
            row = blk.alias_rows[bisect_right(blk.cum, w)]
            fired = (info, row, False)

        info, (bits_a, bits_b, kind, index, eid_a, eid_b), from_extra = fired
        dp_r_before = (Aw & ~Bw & info.mask).bit_count()
        dm_r_before = (Bw & ~Aw & info.mask).bit_count()
        Aw = (Aw & ~info.mask) | bits_a
        Bw = (Bw & ~info.mask) | bits_b
        if eid_a is not None:
            a_marginal[eid_a] += 1
        dp_after, dm_after = Aw & ~Bw, Bw & ~Aw
        D_after = (dp_after | dm_after).bit_count()
        dp_r_after = (dp_after & info.mask).bit_count()
        dm_r_after = (dm_after & info.mask).bit_count()
        counters["events"] += 1
        counters["block_events"] += 1
        counters["extra_events"] += int(from_extra)
        if kind == "stair":
            counters["stair_events"] += 1
            if bits_a == bits_b:
                counters["merges"] += 1
        else:
            counters["block_diag"] += 1
        if D_after > D_before:
            raise PropertyViolation(f"discrepancy count increased {D_before} -> {D_after}")
        if dp_r_after > dp_r_before and dm_r_after > dm_r_before:
            raise PropertyViolation("both discrepancy types increased on the fired range")
        if dominance and dm_after:
            raise PropertyViolation("initial dominance A >= B was lost")
        if D_after == 0 and not coupled:
            coupled, T_couple = True, t
        if record_history:
            history.append(CouplingEvent(t, _event_kind(kind, index), info.rid,
                                         D_before, D_after))
        if coupled and stop_at_couple:
            break

    counters["a_marginal"] = a_marginal
    final = CoupledState(Configuration(lat, Aw), Configuration(lat, Bw))
    return CouplingResult(tuple(history), final, Aw == Bw, T_couple, counters)


def write_coupling_csv(result: CouplingResult, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("time,kind,range_id,D_before,D_after\n")
        for ev in result.history:
            fh.write(f"{ev.t!r},{ev.kind},{ev.range_id},{ev.D_before},{ev.D_after}\n")


# ---------------------------------------------------------------------------
# exhaustive small-range lemmas

@dataclass(frozen=True)
class LemmaReport:
    name: str
    max_range: int
    n_checked: int
    n_boundary: int
    passed: bool
    failures: Tuple[str, ...]

    def to_dict(self) -> dict:
        return {"name": self.name, "max_range": self.max_range,
                "n_checked": self.n_checked, "n_boundary": self.n_boundary,
                "passed": self.passed, "failures": list(self.failures)}


def _words(r: int):
    for w in range(1 << r):
        yield tuple((w >> i) & 1 for i in range(r))


def lemma_cover_existence(max_range: int) -> LemmaReport:
    """Exhaustively verify when a cyclic cover exists and that selection picks
    the first candidate in canonical order.

    A dominating cycle (sigma(a) >= b) exists for every pair with
    popcount(a) >= popcount(b) except a == b non-constant; an exact cover
    (sigma(a) == b) exists for every equal-popcount pair differing at exactly
    two positions.
    """
    if not 2 <= max_range <= 5:
        raise ValueError("max_range must lie in 2..5")
    checked = boundary = 0
    failures: List[str] = []
    for r in range(2, max_range + 1):
        R = [(i,) for i in range(r)]
        cands = enumerate_cyclic(R)
        for a in _words(r):
            for b in _words(r):
                if sum(a) < sum(b):
                    continue
                checked += 1
                hits = [s for s in cands
                        if all(x >= y for x, y in zip(word_apply(s, R, a), b))]
                is_boundary = a == b and 0 < sum(a) < r
                boundary += int(is_boundary)
                if bool(hits) == is_boundary:
                    failures.append(f"dominating cover existence wrong at r={r} a={a} b={b}")
                    continue
                if hits:
                    if select_sigma_general(R, a, b) != hits[0]:
                        failures.append(f"selection not first-in-order at r={r} a={a} b={b}")
                else:
                    try:
                        select_sigma_general(R, a, b)
                        failures.append(f"NoCover not raised at r={r} a={a} b={b}")
                    except NoCover:
                        pass
                if sum(a) == sum(b) and sum(x != y for x, y in zip(a, b)) == 2:
                    exact = [s for s in cands if word_apply(s, R, a) == b]
                    if not exact:
                        failures.append(f"no exact cover at r={r} a={a} b={b}")
                    elif select_sigma_two_discrepancy(R, a, b) != exact[0]:
                        failures.append(f"two-discrepancy selection not first at r={r} a={a} b={b}")
    return LemmaReport("cover_existence", max_range, checked, boundary,
                       not failures, tuple(failures))


def lemma_D_monotone(max_range: int) -> LemmaReport:
    """Exhaustively verify that one staircase step never increases the
    discrepancy count, decreases it strictly when both types are present,
    and preserves it exactly when the annihilating type is absent."""
    if not 2 <= max_range <= 5:
        raise ValueError("max_range must lie in 2..5")
    checked = boundary = 0
    failures: List[str] = []
    for r in range(2, max_range + 1):
        R = [(i,) for i in range(r)]
        for a in _words(r):
            for b in _words(r):
                for major_a in (True, False):
                    hi, lo = (a, b) if major_a else (b, a)
                    if sum(hi) < sum(lo):
                        continue
                    checked += 1
                    if a == b and 0 < sum(a) < r:
                        boundary += 1
                        continue
                    sigma = select_sigma_general(R, hi, lo)
                    moved = word_apply(sigma, R, hi)
                    na, nb = (moved, b) if major_a else (a, moved)
                    D0 = sum(x != y for x, y in zip(a, b))
                    D1 = sum(x != y for x, y in zip(na, nb))
                    dplus = sum(x == 1 and y == 0 for x, y in zip(a, b))
                    dminus = sum(x == 0 and y == 1 for x, y in zip(a, b))
                    annihilating = dminus if major_a else dplus
                    if D1 > D0:
                        failures.append(f"D increased at r={r} a={a} b={b} major_a={major_a}")
                    if dplus and dminus and D1 >= D0:
                        failures.append(f"no strict drop at r={r} a={a} b={b} major_a={major_a}")
                    if (D1 == D0) != (annihilating == 0):
                        failures.append(f"equality law wrong at r={r} a={a} b={b} major_a={major_a}")
    return LemmaReport("D_monotone", max_range, checked, boundary,
                       not failures, tuple(failures))


# ---------------------------------------------------------------------------
# empirical cancellation bound

@dataclass(frozen=True)
class SuccessBoundReport:
    n_runs: int
    n_block_events: int
    n_merges: int
    fraction: float
    bound: float
    sigma: float
    passed: bool

    def to_dict(self) -> dict:
        return {"n_runs": self.n_runs, "n_block_events": self.n_block_events,
                "n_merges": self.n_merges, "fraction": self.fraction,
                "bound": self.bound, "sigma": self.sigma, "passed": self.passed}


def success_bound_check(fam: RateFamily, n: int, seed: int, T: float = 100.0) -> SuccessBoundReport:
    """Empirical merge share at both-discrepancy events versus the derangement
    bound 1 / (P(M_I) * M_II), over n two-discrepancy coupling runs."""
    from .process import sample_product

    report = require_simulatable(fam)
    if fam.dimension > 2:
        raise ValueError("cancellation bound runs are for d <= 2 families")
    if report.M_II is None:
        raise NotRangeClosed("cancellation bound needs strict range closure")
    if not fam.lattice.is_torus:
        raise ValueError("cancellation bound runs need a torus")
    bound = 1.0 / (derangement_count(report.M_I) * report.M_II)
    lat = fam.lattice
    first_range = sorted(fam.base[0][0].range_sites)
    u, v = first_range[0], first_range[1]
    u_i, v_i = lat.index(lat.wrap(u)), lat.index(lat.wrap(v))
    events = merges = 0
    for i in range(n):
        eta = sample_product(0.5, lat, seed + 1000003 * i + 1)
        Aw = (eta.word | (1 << u_i)) & ~(1 << v_i)
        Bw = (eta.word | (1 << v_i)) & ~(1 << u_i)
        res = run_recurrent_coupling(
            Configuration(lat, Aw), Configuration(lat, Bw), fam, T,
            seed=seed + 2000003 * i, stop_at_couple=True, record_history=False,
        )
        events += res.counters["block_events"]
        merges += res.counters["merges"]
    fraction = merges / events if events else 0.0
    sigma = math.sqrt(max(fraction * (1 - fraction), 1e-12) / events) if events else float("inf")
    passed = events > 0 and fraction >= bound - 3 * sigma
    return SuccessBoundReport(n, events, merges, fraction, bound, sigma, passed)
