import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import permuta as P
from permuta.lattice import unwrap_range


def test_torus_basic():
    lat = P.Lattice.torus([6])
    assert lat.is_torus
    assert lat.dimension == 1
    assert lat.n_sites == 6
    assert lat.wrap((7,)) == (1,)
    assert lat.wrap((-1,)) == (5,)
    assert lat.shift((5,), (2,)) == (1,)


def test_torus_2d_enumeration():
    lat = P.Lattice.torus([3, 4])
    assert lat.n_sites == 12
    sites = lat.sites()
    assert len(sites) == 12
    assert len(set(sites)) == 12
    for i, x in enumerate(sites):
        assert lat.index(x) == i
        assert lat.site_at(i) == x


def test_unbounded_is_identity_wrap():
    lat = P.Lattice.unbounded(2)
    assert not lat.is_torus
    assert lat.wrap((-3, 10)) == (-3, 10)
    assert lat.shift((1, 1), (-2, 5)) == (-1, 6)


def test_unwrap_range_across_seam():
    lat = P.Lattice.torus([6])
    rep = unwrap_range(frozenset({(5,), (0,), (1,)}), lat)
    # maps each wrapped site to a contiguous unwrapped representative
    assert set(rep) == {(5,), (0,), (1,)}
    coords = sorted(x[0] for x in rep.values())
    assert coords == list(range(coords[0], coords[0] + 3))
    for wrapped, raw in rep.items():
        assert lat.wrap(raw) == wrapped


def test_index_rejects_unbounded():
    lat = P.Lattice.unbounded(1)
    with pytest.raises((ValueError, TypeError)):
        lat.index((0,))


dims_st = st.lists(st.integers(min_value=3, max_value=7), min_size=1, max_size=3)


@given(dims=dims_st, data=st.data())
@settings(max_examples=60, deadline=None)
def test_wrap_idempotent_and_shift_commutes(dims, data):
    lat = P.Lattice.torus(dims)
    d = len(dims)
    coord = st.tuples(*([st.integers(min_value=-20, max_value=20)] * d))
    x = data.draw(coord)
    v = data.draw(coord)
    assert lat.wrap(lat.wrap(x)) == lat.wrap(x)
    assert lat.wrap(lat.shift(x, v)) == lat.shift(lat.wrap(x), v)


@given(dims=dims_st, data=st.data())
@settings(max_examples=40, deadline=None)
def test_index_site_bijection(dims, data):
    lat = P.Lattice.torus(dims)
    i = data.draw(st.integers(min_value=0, max_value=lat.n_sites - 1))
    assert lat.index(lat.site_at(i)) == i
