import math

import pytest

import permuta as P
from conftest import three_cycles


def test_configuration_accessors():
    lat = P.Lattice.torus([6])
    eta = P.Configuration.from_sites(lat, [(0,), (2,), (5,)])
    assert eta.word == 0b100101
    assert eta.particle_count == 3
    assert eta.occupied((2,)) and not eta.occupied((1,))
    assert set(eta.occupied_sites()) == {(0,), (2,), (5,)}
    assert P.Configuration.empty(lat).word == 0
    assert P.Configuration.full(lat).particle_count == 6


def test_sample_product_extremes():
    lat = P.Lattice.torus([10])
    assert P.sample_product(0.0, lat, 1).word == 0
    assert P.sample_product(1.0, lat, 1).particle_count == 10


def test_sample_product_density():
    lat = P.Lattice.torus([12])
    counts = [P.sample_product(0.3, lat, s).particle_count for s in range(400)]
    mean = sum(counts) / len(counts)
    se = math.sqrt(12 * 0.3 * 0.7 / len(counts))
    assert abs(mean - 3.6) < 4 * se


def test_run_config_deterministic(fam8):
    eta0 = P.sample_product(0.5, fam8.lattice, 3)
    t1 = P.run_config(eta0, fam8, 5.0, 42)
    t2 = P.run_config(eta0, fam8, 5.0, 42)
    assert t1.events == t2.events
    assert t1.terminal == t2.terminal
    t3 = P.run_config(eta0, fam8, 5.0, 43)
    assert t3.events != t1.events


def test_run_config_conserves_particles(fam8):
    for seed in range(5):
        eta0 = P.sample_product(0.5, fam8.lattice, seed)
        traj = P.run_config(eta0, fam8, 10.0, 100 + seed)
        assert traj.terminal.particle_count == eta0.particle_count
        assert traj.n_events == len(traj.events)
        times = [t for t, _, _ in traj.events]
        assert times == sorted(times)
        assert all(0 < t <= 10.0 for t in times)


def test_run_config_zero_horizon(fam8):
    eta0 = P.sample_product(0.5, fam8.lattice, 1)
    traj = P.run_config(eta0, fam8, 0.0, 5)
    assert traj.n_events == 0
    assert traj.terminal == eta0


def test_event_count_matches_total_rate(fam8):
    # events arrive at rate Q_tot regardless of the configuration
    Q_tot = 16.0
    T = 2.0
    n = 300
    eta0 = P.sample_product(0.5, fam8.lattice, 7)
    counts = [P.run_config(eta0, fam8, T, 500 + s).n_events for s in range(n)]
    mean = sum(counts) / n
    se = math.sqrt(Q_tot * T / n)
    assert abs(mean - Q_tot * T) < 4 * se


def test_first_jump_distribution_matches_enumeration(fam8):
    """Single particle at 0: first word change against the exact jump law."""
    lat = fam8.lattice
    eta0 = P.Configuration(lat, 1)
    targets = {}
    for sig, q in P.expand(fam8):
        moved = P.apply(sig, eta0).word
        if moved != eta0.word:
            targets[moved] = targets.get(moved, 0.0) + q
    total = sum(targets.values())

    n = 4000
    hits = {w: 0 for w in targets}
    for s in range(n):
        traj = P.run_config(eta0, fam8, 3.0, 9000 + s)
        for _, b, v in traj.events:
            sig = fam8.base[b][0].shifted(v, lat)
            w2 = P.apply(sig, eta0).word
            if w2 != eta0.word:
                hits[w2] += 1
                break
        else:
            pytest.fail("horizon too short to observe a jump")
    for w, q in targets.items():
        p = q / total
        se = math.sqrt(p * (1 - p) / n)
        assert abs(hits[w] / n - p) < 4 * se


def test_run_finite_conserves_set_size(fam8):
    A0 = P.DualState.of(fam8.lattice, [(0,), (1,), (4,)])
    for seed in range(5):
        traj = P.run_finite(A0, fam8, 5.0, 40 + seed)
        assert isinstance(traj.terminal, P.DualState)
        assert len(traj.terminal.sites) == 3


def test_run_finite_deterministic(fam8):
    A0 = P.DualState.of(fam8.lattice, [(0,), (3,)])
    t1 = P.run_finite(A0, fam8, 5.0, 8)
    t2 = P.run_finite(A0, fam8, 5.0, 8)
    assert t1.terminal == t2.terminal
    assert t1.events == t2.events


def test_run_finite_on_unbounded_lattice():
    fam = three_cycles()
    A0 = P.DualState.of(fam.lattice, [(0,), (1,)])
    traj = P.run_finite(A0, fam, 3.0, 2)
    assert len(traj.terminal.sites) == 2


def test_duality_mc_product_initial(fam8):
    # product measures are stationary, so both sides sit at rho^{|A|}
    rho = 0.5
    A = [(0,), (2,), (5,)]
    lhs, rhs = P.duality_mc(rho, A, fam8, 1.0, 20000, 11)
    target = rho ** 3
    assert abs(lhs.mean - target) < 3 * lhs.std_error + 1e-12
    assert abs(rhs.mean - target) < 3 * rhs.std_error + 1e-12


def test_duality_mc_engines_agree(fam8):
    eta0 = P.Configuration(fam8.lattice, 0b00101101)
    A = [(0,), (1,)]
    v_l, v_r = P.duality_mc(eta0, A, fam8, 1.0, 20000, 21, engine="vector")
    e_l, e_r = P.duality_mc(eta0, A, fam8, 1.0, 5000, 22, engine="event")
    for a, b in [(v_l, e_l), (v_r, e_r)]:
        se = math.hypot(a.std_error, b.std_error)
        assert abs(a.mean - b.mean) < 3 * se


def test_duality_mc_rejects_asymmetric():
    fam = three_cycles(8, rate=1.0, rate_inverse=2.0)
    with pytest.raises(P.NotSymmetric):
        P.duality_mc(0.5, [(0,)], fam, 1.0, 10, 1)


def test_duality_mc_bad_engine(fam8):
    with pytest.raises(ValueError):
        P.duality_mc(0.5, [(0,)], fam8, 1.0, 10, 1, engine="magic")


def test_estimate_from_bernoulli():
    e = P.Estimate.from_bernoulli(25, 100)
    assert e.mean == 0.25
    assert e.n_samples == 100
    # sample variance with the n-1 correction
    assert abs(e.std_error - math.sqrt(0.25 * 0.75 / 99)) < 1e-12
    with pytest.raises(ValueError):
        P.Estimate.from_bernoulli(0, 0)


def test_trajectory_csv(tmp_path, fam8):
    eta0 = P.sample_product(0.5, fam8.lattice, 3)
    traj = P.run_config(eta0, fam8, 2.0, 4)
    path = tmp_path / "traj.csv"
    P.write_trajectory_csv(traj, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "time,perm_id,shift,popcount"
    assert len(lines) == traj.n_events + 1
    pops = {int(row.rsplit(",", 1)[1]) for row in lines[1:]}
    assert pops <= {eta0.particle_count}
