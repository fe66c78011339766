import math

import numpy as np
import pytest
from scipy.linalg import expm

import permuta as P
from conftest import one_way_three_cycles, swaps, three_cycles
from permuta.exact import _evolve_dist


def test_swap_generator_hand_entries():
    """L=(4) nearest-neighbor swaps: spot-check rows built by hand."""
    fam = swaps(4)
    Q = P.build_generator(fam).dense()
    assert Q.shape == (16, 16)
    # single particle at site 0 can swap to 1 (perm at 0) or to 3 (perm at 3)
    src = 0b0001
    assert Q[src, 0b0010] == 1.0
    assert Q[src, 0b1000] == 1.0
    assert Q[src, src] == -2.0
    # the other two swaps leave it alone, so the row holds nothing else
    assert np.count_nonzero(Q[src]) == 3
    # full and empty words never move
    assert np.count_nonzero(Q[0]) == 0
    assert np.count_nonzero(Q[15]) == 0
    # adjacent pair 0,1: boundary swaps move one end each
    src = 0b0011
    assert Q[src, 0b0101] == 1.0  # swap (1,2) frees site 1
    assert Q[src, 0b1010] == 1.0  # swap (3,0) frees site 0
    assert Q[src, src] == -2.0


def test_generator_row_sums_vanish():
    for fam in [three_cycles(8), swaps(6), three_cycles(6, rate=1.0, rate_inverse=3.0)]:
        G = P.build_generator(fam)
        assert G.row_sum_residual() <= 1e-12
        S = P.build_generator(fam, sparse=True)
        assert S.row_sum_residual() <= 1e-12
        assert np.allclose(S.dense(), G.dense())


def test_generator_empty_family_is_zero():
    G = P.build_generator(P.RateFamily(P.Lattice.torus([4]), ()))
    assert np.abs(G.dense()).max() == 0.0


def test_generator_size_caps():
    with pytest.raises(P.TooLarge):
        P.build_generator(three_cycles(17))
    with pytest.raises(P.TooLarge):
        P.build_generator(three_cycles(23), sparse=True)
    # sparse mode stretches past the dense cap
    S = P.build_generator(three_cycles(18), sparse=True)
    assert S.sparse
    assert S.row_sum_residual() <= 1e-12


def test_product_measures_stationary():
    for fam in [three_cycles(8), three_cycles(8, rate=1.0, rate_inverse=3.0), swaps(8)]:
        G = P.build_generator(fam)
        for rho in [0.0, 0.3, 0.5, 1.0]:
            nu = P.product_measure_vector(rho, 8)
            assert P.stationarity_residual(nu, G) <= 1e-12


def test_stationarity_residual_detects_drift(fam8):
    G = P.build_generator(fam8)
    # point mass on a non-absorbing word is not stationary
    nu = np.zeros(256)
    nu[0b00000111] = 1.0
    assert P.stationarity_residual(nu, G) > 0.1


def test_stationarity_residual_validates():
    G = P.build_generator(three_cycles(6))
    with pytest.raises(ValueError):
        P.stationarity_residual(np.ones(7), G)
    with pytest.raises(ValueError):
        P.stationarity_residual(np.full(64, 0.9 / 64), G)
    with pytest.raises(ValueError):
        P.stationarity_residual(np.full(64, -1.0 / 64), G)


def test_sector_stationary_uniform():
    for fam in [three_cycles(8), swaps(8)]:
        G = P.build_generator(fam)
        for n in [0, 1, 3, 4, 8]:
            sec = P.sector_stationary(G, n)
            size = math.comb(8, n)
            assert len(sec.words) == size
            assert all(bin(w).count("1") == n for w in sec.words)
            assert abs(sec.probs.sum() - 1.0) < 1e-12
            assert np.abs(sec.probs - 1.0 / size).max() < 1e-9


def test_sector_stationary_uniform_when_asymmetric():
    # doubly stochastic dynamics keep the uniform sector measure even
    # without symmetry
    G = P.build_generator(three_cycles(8, rate=1.0, rate_inverse=3.0))
    sec = P.sector_stationary(G, 4)
    assert np.abs(sec.probs - 1.0 / math.comb(8, 4)).max() < 1e-9


def test_sector_reducible_raises():
    dist2 = P.RateFamily(
        P.Lattice.torus([8]), ((P.FinitePermutation((((0,), (2,)),)), 1.0),)
    )
    G = P.build_generator(dist2)
    with pytest.raises(P.SectorReducible):
        P.sector_stationary(G, 1)


def test_uniformization_matches_expm(fam6):
    """The uniformized semigroup against scipy's matrix exponential."""
    Q = P.build_generator(fam6).dense()
    for t in [0.1, 0.7, 3.0]:
        ref = expm(Q.T * t)
        p0 = np.zeros(64)
        p0[0b010110] = 1.0
        mine = _evolve_dist(p0, Q, False, t)
        assert np.abs(mine - ref @ p0).max() < 1e-10


def test_duality_exact_symmetric(fam8):
    eta0 = P.Configuration(fam8.lattice, 0b00101101)
    for A in [[(0,)], [(0,), (1,)], [(0,), (1,), (3,)]]:
        for t in [0.1, 1.0, 10.0]:
            lhs, rhs = P.duality_exact(fam8, eta0, A, t)
            assert abs(lhs - rhs) <= 1e-9
            assert 0.0 <= lhs <= 1.0


def test_duality_exact_truncation_stable(fam8):
    eta0 = P.Configuration(fam8.lattice, 0b00101101)
    A = [(0,), (1,), (3,)]
    base = P.duality_exact(fam8, eta0, A, 1.0)
    longer = P.duality_exact(fam8, eta0, A, 1.0, extra_terms=5)
    assert abs(base[0] - longer[0]) < 1e-10
    assert abs(base[1] - longer[1]) < 1e-10


def test_duality_exact_equilibrium_limit(fam6):
    # at large t the chain mixes within its sector: a 4-particle sector on
    # 6 sites covers a fixed 2-set with prob C(4,2)/C(6,2)
    eta0 = P.Configuration(fam6.lattice, 0b001111)
    lhs, rhs = P.duality_exact(fam6, eta0, [(0,), (1,)], 30.0)
    target = math.comb(4, 2) / math.comb(6, 2)
    assert abs(lhs - target) < 1e-9
    assert abs(rhs - target) < 1e-9


def test_duality_exact_stiffness_cap(fam8):
    eta0 = P.Configuration(fam8.lattice, 0b00011111)
    with pytest.raises(P.TooLarge):
        P.duality_exact(fam8, eta0, [(0,)], 200.0)


def test_duality_exact_rejects_asymmetric():
    fam = three_cycles(6, rate=1.0, rate_inverse=2.0)
    with pytest.raises(P.NotSymmetric):
        P.duality_exact(fam, P.Configuration(fam.lattice, 0b000111), [(0,)], 1.0)


def test_duality_mc_brackets_exact(fam8):
    eta0 = P.Configuration(fam8.lattice, 0b00101101)
    A = [(0,), (1,), (3,)]
    lhs, rhs = P.duality_exact(fam8, eta0, A, 1.0)
    est_l, est_r = P.duality_mc(eta0, A, fam8, 1.0, 20000, 31)
    assert abs(est_l.mean - lhs) < 3 * est_l.std_error
    assert abs(est_r.mean - rhs) < 3 * est_r.std_error


def test_falsifier_finds_asymmetric_witness():
    rep = P.asymmetric_duality_falsifier(one_way_three_cycles(6), 1.0)
    assert rep.witness_found
    assert rep.max_gap > 1e-6
    assert rep.n_checked > 0
    assert abs(rep.lhs - rep.rhs) == pytest.approx(rep.max_gap)
    d = rep.to_dict()
    assert d["witness_found"] is True


def test_falsifier_clears_symmetric_family(fam6):
    rep = P.asymmetric_duality_falsifier(fam6, 1.0)
    assert not rep.witness_found
    assert rep.max_gap < 1e-9


def test_falsifier_no_witness_at_time_zero():
    rep = P.asymmetric_duality_falsifier(one_way_three_cycles(6), 0.0)
    assert not rep.witness_found
