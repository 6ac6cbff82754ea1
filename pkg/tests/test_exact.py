import math
from fractions import Fraction

import numpy as np
import pytest

from cyclicmix.chain import ChainParams, CountVector, all_count_vectors
from cyclicmix.exact import (
    CapacityError,
    DistVector,
    MassDriftError,
    brute_force_oracle,
    build_lumped_kernel,
    closed_form_l2,
    cutoff_curve,
    cutoff_time,
    delta_dist,
    drift_identity_check,
    evolve,
    expected_l2sq,
    mean_and_variance,
    mixing_time,
    mixing_times,
    n_states,
    rounded_time,
    state_index,
    stationarity_residual,
    stationary_counts,
    tail_probabilities,
    tail_probability,
    tv_distance,
    tv_profile,
)


def as_dict(kernel, cv):
    return {tuple(int(x) for x in kernel.states[j]): p for j, p in kernel.row(cv)}


def test_kernel_n1():
    k = build_lumped_kernel(ChainParams(1, 0.5))
    assert k.size == 3
    assert as_dict(k, (1, 0, 0)) == {(1, 0, 0): 0.5, (0, 1, 0): 0.5}
    assert as_dict(k, (0, 0, 1)) == {(0, 0, 1): 0.5, (1, 0, 0): 0.5}


def test_kernel_n2_row():
    k = build_lumped_kernel(ChainParams(2, 0.5))
    assert k.size == 6
    assert as_dict(k, (1, 1, 0)) == {(1, 1, 0): 0.5, (0, 2, 0): 0.25, (1, 0, 1): 0.25}


@pytest.mark.parametrize("n", [1, 4, 13, 40])
def test_kernel_shape_and_rows(n):
    k = build_lumped_kernel(ChainParams(n, 0.3))
    assert k.size == n_states(n) == (n + 1) * (n + 2) // 2
    for cv in all_count_vectors(n):
        row = k.row(cv)
        assert len(row) <= 4
        assert abs(sum(p for _, p in row) - 1) <= 1e-14
        assert k.index(cv) == state_index(n, cv[0], cv[1])


def test_capacity_error_names_limit():
    with pytest.raises(CapacityError, match="largest admissible n"):
        build_lumped_kernel(ChainParams(500, 0.5), max_states=1000)


def test_stationary_small():
    s1 = stationary_counts(1)
    for cv in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]:
        assert s1[cv] == pytest.approx(1 / 3, abs=1e-15)
    s2 = stationary_counts(2)
    assert s2[(2, 0, 0)] == pytest.approx(1 / 9, abs=1e-15)
    assert s2[(1, 1, 0)] == pytest.approx(2 / 9, abs=1e-15)


@pytest.mark.parametrize("n", [10, 50, 150])
def test_stationarity(n):
    assert stationarity_residual(n) <= 1e-10


@pytest.mark.parametrize("n", [1, 7, 60, 200])
def test_stationary_moments(n):
    mean, var = mean_and_variance(stationary_counts(n))
    np.testing.assert_allclose(mean, 1 / 3, atol=1e-12)
    assert abs(var - 2 / (3 * n)) <= 1e-12


def test_dist_vector_mass_check():
    probs = np.zeros(n_states(3))
    probs[0] = 1 + 1e-6
    with pytest.raises(MassDriftError):
        DistVector(3, probs)


def test_evolve_basics():
    n = 12
    k = build_lumped_kernel(ChainParams(n, 0.5))
    d0 = delta_dist((n, 0, 0))
    assert evolve(d0, k, 0) is d0 or np.array_equal(evolve(d0, k, 0).probs, d0.probs)
    d1 = evolve(d0, k, 1)
    assert d1[(n, 0, 0)] == 0.5 and d1[(n - 1, 1, 0)] == 0.5
    pi = stationary_counts(n)
    assert np.abs(evolve(pi, k, 1000).probs - pi.probs).sum() <= 1e-9


def test_mass_conserved_long_run():
    k = build_lumped_kernel(ChainParams(6, 0.5))
    d = evolve(delta_dist((6, 0, 0)), k, 100_000)
    assert abs(d.probs.sum() - 1) <= 1e-9


def test_tv_distance_properties():
    n = 9
    pi = stationary_counts(n)
    assert tv_distance(pi, pi) == 0
    assert tv_distance(delta_dist((n, 0, 0)), pi) == pytest.approx(1 - 3.0 ** -n, abs=1e-15)
    rng = np.random.default_rng(1)
    dists = []
    for _ in range(30):
        w = rng.random(n_states(n))
        dists.append(DistVector(n, w / w.sum()))
    for a, b, c in zip(dists, dists[1:], dists[2:]):
        assert tv_distance(a, b) == pytest.approx(tv_distance(b, a))
        assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-15


def test_tv_profile_start_and_reference():
    n = 64
    t = math.ceil(2 / 3 * n * math.log(n))
    prof = tv_profile((n, 0, 0), ChainParams(n, 0.5), [0, t])
    d0, dt = prof.values
    assert d0 == pytest.approx(1 - 3.0 ** -n)
    assert 0.01 < dt < d0
    assert dt == pytest.approx(0.536020239709887, abs=1e-12)


def test_tv_profile_monotone():
    n = 40
    prof = tv_profile((n, 0, 0), ChainParams(n, 0.5), range(0, 600, 3))
    assert np.all(np.diff(prof.values) <= 1e-15)


def test_mixing_time_trivial_and_monotone():
    n = 30
    params = ChainParams(n, 0.5)
    assert mixing_time((n, 0, 0), params, 1 - 0.5 * 3.0 ** -n) == 0
    found = mixing_times((n, 0, 0), params, [0.1, 0.25, 0.9])
    assert found[0.1] >= found[0.25] >= found[0.9]


def test_mixing_time_value_n128():
    t = mixing_time((128, 0, 0), ChainParams(128, 0.5), 0.25)
    assert t == 549
    assert t / cutoff_time(128) == pytest.approx(1.32596, abs=1e-5)


@pytest.mark.xfail(strict=True, reason="exact normalized t_mix(1/4) at n=128 is 1.326; the asymptotic constant 1 is approached slowly")
def test_mixing_time_band_n128():
    t = mixing_time((128, 0, 0), ChainParams(128, 0.5), 0.25)
    assert 0.85 <= t / cutoff_time(128) <= 1.15


def test_rounded_time_clamps():
    assert rounded_time(64, -3.0) == 0
    assert rounded_time(64, 0.0) == round(cutoff_time(64))
    assert rounded_time(64, 0.0, p=0.25) == round(64 * math.log(64) / 0.75)


def test_cutoff_curve_shape():
    rows = cutoff_curve([64, 128], [-30.0, -1.0, 0.0, 1.0, 3.0])
    assert [r[:2] for r in rows[:5]] == [(64, -30.0), (64, -1.0), (64, 0.0), (64, 1.0), (64, 3.0)]
    assert rows[0][2] == 0 and rows[0][3] == pytest.approx(1 - 3.0 ** -64)
    for n in (64, 128):
        vals = [d for m, _, _, d in rows if m == n]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_cutoff_curve_reference_values():
    rows = {(n, g): (t, d) for n, g, t, d in cutoff_curve([64, 128], [3.0])}
    assert rows[(64, 3.0)] == (369, pytest.approx(0.05875750063316104, abs=1e-12))
    assert rows[(128, 3.0)] == (798, pytest.approx(0.058967228331072236, abs=1e-12))


def test_drift_identity_examples():
    n = 21
    mono = drift_identity_check((n, 0, 0))
    assert mono.rhs == pytest.approx(-1 / n + 1 / n ** 2, abs=1e-15)
    assert mono.residual <= 1e-13
    centre = drift_identity_check((7, 7, 7), exact=True)
    assert centre.lhs == 1 / n ** 2 and centre.residual == 0


@pytest.mark.parametrize("n", [6, 15, 30, 60])
def test_drift_identity_exhaustive(n):
    k = build_lumped_kernel(ChainParams(n, 0.5))
    worst = max(drift_identity_check(cv, k).residual for cv in all_count_vectors(n))
    assert worst <= 1e-13


def test_drift_identity_rational_is_exact():
    for cv in all_count_vectors(11):
        assert drift_identity_check(cv, exact=True).residual == 0


def test_drift_identity_detects_perturbation():
    k = build_lumped_kernel(ChainParams(8, 0.5)).perturbed((8, 0, 0), 1, 1e-6)
    assert drift_identity_check((8, 0, 0), k).residual > 1e-8


def test_closed_form_limits():
    assert closed_form_l2((30, 0, 0), 0) == pytest.approx(2 / 3)
    assert closed_form_l2((30, 0, 0), 100_000) == pytest.approx(2 / 90, rel=1e-12)


def test_closed_form_matches_evolution():
    k = build_lumped_kernel(ChainParams(30, 0.5))
    exact = expected_l2sq(evolve(delta_dist((30, 0, 0)), k, 100))
    assert abs(exact - closed_form_l2((30, 0, 0), 100)) <= 1e-10


@pytest.mark.parametrize("n", [9, 24])
def test_closed_form_random_starts(n):
    rng = np.random.default_rng(n)
    k = build_lumped_kernel(ChainParams(n, 0.5))
    states = all_count_vectors(n)
    for _ in range(20):
        cv = states[int(rng.integers(len(states)))]
        t = int(rng.integers(0, 300))
        assert abs(expected_l2sq(evolve(delta_dist(cv), k, t)) - closed_form_l2(cv, t)) <= 1e-10


def test_tail_probability_edges():
    n = 27
    params = ChainParams(n, 0.5)
    # sup-norm never exceeds 2/3, so anything beyond (2/3) sqrt(n) is impossible
    assert tail_probability((n, 0, 0), params, 40, 2 / 3 * math.sqrt(n) * (1 + 1e-9)) == 0
    t = 200
    pi_t = evolve(delta_dist((n, 0, 0)), build_lumped_kernel(params), t)
    centre = pi_t[(9, 9, 9)]
    assert tail_probability((n, 0, 0), params, t, 1e-9) == pytest.approx(1 - centre, abs=1e-12)


def test_tail_probability_n128():
    n = 128
    params = ChainParams(n, 0.5)
    t = round(cutoff_time(n))
    tails = tail_probabilities((n, 0, 0), params, t, [2, 4, 8, 16])
    assert tails[8] <= tails[4] <= tails[2]
    assert max(r * p for r, p in tails.items()) <= 2


def test_brute_force_n1_is_lumped():
    rep = brute_force_oracle(ChainParams(1, 0.5), [0, 1, 3])
    assert rep.max_residual == 0 or rep.max_residual <= 1e-15


def test_brute_force_n4():
    rep = brute_force_oracle(ChainParams(4, 0.5), [0, 1, 5, 20])
    assert rep.max_residual <= 1e-9
    for mono, full_max in zip(rep.tv_full_mono, rep.tv_full_max):
        assert full_max >= mono - 1e-15


def test_brute_force_rejects_large_n():
    with pytest.raises(CapacityError):
        brute_force_oracle(ChainParams(7, 0.5), [0])


def test_general_p_stationary():
    for p in (Fraction(1, 4), 0.75):
        k = build_lumped_kernel(ChainParams(20, float(p)))
        assert stationarity_residual(20, k) <= 1e-12
