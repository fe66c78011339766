import os

import pytest

import permuta as P

SLOW = os.environ.get("PERMUTA_SLOW_TESTS") == "1"

slow = pytest.mark.skipif(not SLOW, reason="set PERMUTA_SLOW_TESTS=1")


def three_cycles(*dims, rate=1.0, rate_inverse=None):
    lat = P.Lattice.torus(list(dims)) if dims else P.Lattice.unbounded(1)
    return P.consecutive_three_cycles(lat, rate=rate, rate_inverse=rate_inverse)


def one_way_three_cycles(*dims):
    fam = three_cycles(*dims)
    return P.RateFamily(fam.lattice, (fam.base[0],))


def swaps(*dims):
    lat = P.Lattice.torus(list(dims)) if dims else P.Lattice.unbounded(1)
    return P.nearest_neighbor_swaps(lat)


def axis_three_cycles_3d():
    """Three-cycles along each axis of unbounded Z^3, both orientations."""
    lat = P.Lattice.unbounded(3)
    base = []
    for ax in range(3):
        pts = tuple(tuple(k if i == ax else 0 for i in range(3)) for k in (0, 1, 2))
        sig = P.FinitePermutation((pts,))
        base.append((sig, 1.0))
        base.append((P.inverse(sig), 1.0))
    return P.RateFamily(lat, tuple(base))


def discrepancy_pair(lat, seed, rho=0.5):
    """A half-density configuration and a copy with one 0->1 and one 1->0 flip."""
    n = lat.n_sites
    full = (1 << n) - 1
    s = seed
    while True:
        A0 = P.sample_product(rho, lat, s)
        if 0 < A0.word < full:
            break
        s += 777  # redraw, all-empty or all-full words admit no opposite-sign pair
    w = A0.word
    occ = next(j for j in range(n) if (w >> j) & 1)
    emp = next(j for j in range(n) if not (w >> j) & 1)
    return A0, P.Configuration(lat, w ^ (1 << occ) ^ (1 << emp))


@pytest.fixture
def fam6():
    return three_cycles(6)


@pytest.fixture
def fam8():
    return three_cycles(8)


@pytest.fixture
def fam8_json(tmp_path):
    import json

    path = tmp_path / "fam8.json"
    path.write_text(json.dumps(P.family_to_dict(three_cycles(8))))
    return str(path)
