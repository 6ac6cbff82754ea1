import math

import numpy as np
import pytest

from cyclicmix.chain import BasketPartition, CountVector, in_region
from cyclicmix.experiments import (
    CENSORED,
    ExperimentConfig,
    RunStats,
    balanced_basket_counts,
    basket_starts,
    log_slope,
    measure_basket_coalescence,
    measure_excursion_exit,
    measure_l2_trajectory,
    measure_overall,
    measure_sync_coalescence,
    measure_T1,
    measure_variance_scaling,
    one_swap_pair,
    rejection_start,
    replicate,
    replication_rng,
)


def test_replication_streams_are_keyed_by_index():
    a = replication_rng(7, 3, 100).random(5)
    assert np.array_equal(a, replication_rng(7, 3, 100).random(5))
    assert not np.array_equal(a, replication_rng(7, 4, 100).random(5))
    assert not np.array_equal(a, replication_rng(7, 3, 101).random(5))
    assert not np.array_equal(a, replication_rng(8, 3, 100).random(5))


def test_replicate_order_independent_of_workers():
    fn = pow_of_two
    assert replicate(fn, 9, 1) == replicate(fn, 9, 2) == [2 ** k for k in range(9)]


def pow_of_two(k):
    return 2 ** k


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(reps=0)
    with pytest.raises(ValueError):
        ExperimentConfig(p=1.0)
    with pytest.raises(ValueError):
        ExperimentConfig(gamma=(0.0,))
    with pytest.raises(ValueError):
        ExperimentConfig(n=(10,), start=(3, 3, 3))
    with pytest.raises(ValueError):
        ExperimentConfig(schedule=(1, 2, 3))
    cfg = ExperimentConfig(n=12, gamma=5, r=[1, 2])
    assert cfg.n == (12,) and cfg.gamma == (5.0,) and cfg.r == (1.0, 2.0)


def test_run_stats():
    s = RunStats.frequency([True, False, True, True])
    assert s.mean == 0.75 and s.successes == 3 and 0 <= s.ci[0] <= s.ci[1] <= 1
    assert RunStats.frequency([True] * 5).ci == (1.0, 1.0)
    v = RunStats.of([1.0, 2.0, 3.0])
    assert v.mean == 2.0 and v.variance == 1.0 and v.quantiles[0.5] == 2.0


def test_rejection_start_and_cap():
    rng = np.random.default_rng(0)
    cv = rejection_start(90, lambda c: in_region(c, 1 / math.sqrt(90)), rng)
    assert in_region(cv, 1 / math.sqrt(90))
    with pytest.raises(RuntimeError, match="no acceptable start"):
        rejection_start(10, lambda c: False, rng, max_tries=5)


def test_basket_start_constructors():
    part = BasketPartition.equal_thirds(120)
    bc = balanced_basket_counts(part)
    assert bc.sizes == (40, 40, 40) and bc.column_sums() == CountVector(40, 40, 40)
    bc2 = one_swap_pair(bc)
    assert bc2.column_sums() == bc.column_sums() and bc2 != bc
    assert sum(abs(x - y) for r, r2 in zip(bc.counts, bc2.counts) for x, y in zip(r, r2)) == 4
    same, same2 = basket_starts(60, start2_one_swap=False)
    assert same == same2


def test_l2_trajectory_t0_and_agreement():
    cfg = ExperimentConfig(n=(45,), reps=400, seed=3, log_horizon=2.0, samples=20)
    traj = measure_l2_trajectory(cfg)
    assert traj.times[0] == 0 and traj.mean[0] == pytest.approx(2 / 3) and traj.se[0] <= 1e-12
    assert traj.within().mean() >= 0.9


def test_l2_trajectory_stationary_flat():
    cfg = ExperimentConfig(n=(30,), reps=400, seed=4, log_horizon=1.0, samples=10)
    traj = measure_l2_trajectory(cfg, stationary=True)
    assert np.allclose(traj.exact, 2 / 90)
    assert traj.within().mean() >= 0.9


def test_variance_scaling_start_and_stationarity():
    cfg = ExperimentConfig(n=(30,), reps=600, seed=5, log_horizon=2.0, samples=10)
    row = measure_variance_scaling(cfg)[0]
    assert row.times[0] == 0 and row.scaled_var[0] == 0
    assert row.sup_scaled_var <= 2.0
    stat = measure_variance_scaling(cfg, stationary=True)[0]
    # n * summed variance of multinomial(1/3) proportions is 2/3
    assert abs(stat.scaled_var.mean() - 2 / 3) <= 4 * stat.se


def test_excursion_exit_impossible_radius():
    n = 36
    cfg = ExperimentConfig(n=(n,), reps=50, seed=1, gamma=(3.0,), r=(2 / 3 * math.sqrt(n) + 1e-9,), r0=1.0,
                           start=(12, 12, 12))
    res = measure_excursion_exit(cfg)
    assert all(s.mean == 0 for s in res.values())


def test_excursion_exit_rejects_bad_start():
    cfg = ExperimentConfig(n=(30,), reps=5, start=(20, 5, 5), r0=1.0)
    with pytest.raises(ValueError):
        measure_excursion_exit(cfg)


def test_excursion_monotone_and_slope():
    cfg = ExperimentConfig(n=(100,), reps=300, seed=2, gamma=(2.0,), r=(1.0, 1.5, 2.0), r0=0.99,
                           start=(43, 43, 14))
    res = measure_excursion_exit(cfg)
    means = [res[r].mean for r in cfg.r]
    assert means[0] >= means[1] >= means[2]
    slope = log_slope(res)
    assert slope is None or slope < 0


def test_t1_identical_starts():
    cfg = ExperimentConfig(n=(90,), reps=20, seed=1, start=(30, 30, 30), start2=(30, 30, 30), gamma=(1.0,))
    res = measure_T1(cfg)
    assert (res.times.t1 == 0).all() and res.success[1.0].mean == 1.0


def test_t1_monotone_in_gamma():
    cfg = ExperimentConfig(n=(100,), reps=100, seed=6, start=(53, 23, 24), start2=(14, 53, 33),
                           r=(10.0,), gamma=(1.0, 3.0, 10.0))
    res = measure_T1(cfg)
    freqs = [res.success[g].mean for g in cfg.gamma]
    assert freqs == sorted(freqs)


def test_t1_rejects_far_starts():
    cfg = ExperimentConfig(n=(90,), reps=2, start=(90, 0, 0), start2=(30, 30, 30))
    with pytest.raises(ValueError):
        measure_T1(cfg)


def test_sync_identical_and_monotone():
    same = ExperimentConfig(n=(60,), reps=20, seed=1, start=(20, 20, 20), start2=(20, 20, 20), gamma=(1.0,))
    assert measure_sync_coalescence(same).success[1.0].mean == 1.0
    cfg = ExperimentConfig(n=(100,), reps=200, seed=2, gamma=(2.0, 10.0, 40.0))
    res = measure_sync_coalescence(cfg)
    freqs = [res.success[g].mean for g in cfg.gamma]
    assert freqs == sorted(freqs) and freqs[-1] >= 0.9


def test_sync_rejects_distant_starts():
    cfg = ExperimentConfig(n=(60,), reps=2, start=(30, 15, 15), start2=(20, 20, 20))
    with pytest.raises(ValueError):
        measure_sync_coalescence(cfg)


def test_basket_coalescence_records():
    cfg = ExperimentConfig(n=(60,), reps=40, seed=3, gamma=(60.0,), rho=0.3)
    res = measure_basket_coalescence(cfg)[0]
    tau = res.times.tau
    assert tau.shape == (40, 3)
    for row in tau:
        seen = row[row >= 0]
        # rows coalesce in order and stay coalesced
        assert list(seen) == sorted(seen)
    assert 0 <= res.extra["exit"].mean <= 1


def test_overall_attribution_sums_to_failures():
    cfg = ExperimentConfig(n=(45,), reps=30, seed=9, schedule=(2, 4, 4, 6))
    res = measure_overall(cfg)
    failures = res.success.count - res.success.successes
    assert sum(res.attribution.values()) == failures
    assert len(res.rows()) == 30


def test_overall_large_schedule_n30():
    cfg = ExperimentConfig(n=(30,), reps=100, seed=10, schedule=(4, 40, 40, 200))
    assert measure_overall(cfg).success.mean >= 0.95


def test_reproducible_across_thread_counts():
    base = dict(n=(60,), reps=24, seed=11, gamma=(5.0, 20.0))
    one = measure_sync_coalescence(ExperimentConfig(**base, threads=1))
    two = measure_sync_coalescence(ExperimentConfig(**base, threads=2))
    assert np.array_equal(one.times.t1, two.times.t1)
    t1 = measure_T1(ExperimentConfig(n=(60,), reps=12, seed=11, gamma=(10.0,), threads=1))
    t2 = measure_T1(ExperimentConfig(n=(60,), reps=12, seed=11, gamma=(10.0,), threads=2))
    assert np.array_equal(t1.times.t1, t2.times.t1) and np.array_equal(t1.times.t2, t2.times.t2)
    o1 = measure_overall(ExperimentConfig(n=(30,), reps=6, seed=11, threads=1))
    o2 = measure_overall(ExperimentConfig(n=(30,), reps=6, seed=11, threads=2))
    assert o1.rows() == o2.rows()


def test_censoring_marks_failures():
    cfg = ExperimentConfig(n=(100,), reps=10, seed=12, gamma=(0.01,))
    res = measure_sync_coalescence(cfg)
    assert (res.times.t1 == CENSORED).all() and res.success[0.01].mean == 0.0


@pytest.mark.slow
def test_basket_exit_rare_and_shrinking():
    cfg = ExperimentConfig(n=(60, 120, 240), reps=400, seed=13, gamma=(60.0,), rho=0.3)
    res = measure_basket_coalescence(cfg)
    exits = [r.extra["exit"].mean for r in res]
    print("basket-region exit frequency by n:", dict(zip(cfg.n, exits)))
    assert all(r.success[60.0].mean >= 0.9 for r in res)
    assert exits[1] <= 0.05 and exits[2] <= 0.05
    assert exits[0] >= exits[1] >= exits[2]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="rho=0.3 exit frequency at n=60 is about 0.17")
def test_basket_exit_rare_n60():
    res = measure_basket_coalescence(ExperimentConfig(n=(60,), reps=400, seed=14, gamma=(60.0,), rho=0.3))[0]
    assert res.extra["exit"].mean <= 0.05


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="schedule (2,4,4,6) coalesces in about 71% of runs at n=100")
def test_overall_short_schedule_n100():
    res = measure_overall(ExperimentConfig(n=(100,), reps=500, seed=15, schedule=(2, 4, 4, 6)))
    assert res.success.mean >= 0.9
