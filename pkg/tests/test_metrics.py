import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import policy_matching, random_ebm, random_policy
from dpglab.estimators import dpg_off_grads
from dpglab.metrics import (
    RunningPartition,
    distinct_n,
    is_kl_from_target,
    is_tvd,
    mc_kl,
    variance_diagnostics,
)
from dpglab.oracle import kl, tvd
from dpglab.policy import TabularPolicy
from dpglab.seqspace import ExactDistribution, VocabSpec
from dpglab.tasks import build_task, catalog_task


@pytest.fixture(scope="module")
def task1():
    return build_task(catalog_task("task1"))


def near(p, a, w=0.9):
    """Tabular policy for the mixture w p + (1 - w) a."""
    return policy_matching(ExactDistribution(p.space, w * p.probs + (1 - w) * a.probs))


def test_running_mean_rule():
    rp = RunningPartition()
    rp.update_value(2.0)
    assert rp.z_ma == 2.0 and rp.iterations == 1
    rp.update_value(4.0)
    rp.update_value(9.0)
    assert rp.z_ma == pytest.approx(5.0) and rp.iterations == 3


def test_update_from_batch_and_empty(task1, rng):
    p, Z = task1.ebm.normalize()
    q = policy_matching(p.__class__(p.space, 0.5 * p.probs + 0.5 / p.probs.size))
    b = dpg_off_grads(q, q, task1.ebm, Z, False, q.sample(rng, 10))
    rp = RunningPartition()
    z_hat = rp.update(b)
    assert z_hat == pytest.approx(np.mean(b.reward)) and rp.z_ma == z_hat
    with pytest.raises(ValueError):
        rp.update(dpg_off_grads(q, q, task1.ebm, Z, False, q.sample(rng, 0)))


def test_proposal_equal_to_target_gives_exact_z(rng):
    ebm = random_ebm(VocabSpec(3, 3), rng, with_filter=False)
    p, Z = ebm.normalize()
    q = policy_matching(p)
    b = dpg_off_grads(q, q, ebm, Z, False, q.sample(rng, 100))
    assert np.allclose(b.reward, Z, rtol=1e-12)


def test_z_hat_mean_over_batches(task1):
    p, Z = task1.ebm.normalize()
    a = task1.ebm.base
    rng = np.random.default_rng(0)
    z_hats = []
    for _ in range(200):
        xs = a.sample(rng, 512)
        z_hats.append(np.mean(np.exp(task1.ebm.log_score(xs) - a.log_prob(xs))))
    assert abs(np.mean(z_hats) / Z - 1) <= 0.01


def test_z_ma_unbiased(task1):
    p, Z = task1.ebm.normalize()
    q = near(p, task1.ebm.base.exact_distribution(), 0.5)
    rng = np.random.default_rng(1)
    rp = RunningPartition()
    z = []
    for _ in range(1000):
        xs = q.sample(rng, 64)
        z.append(rp.update_value(float(np.mean(np.exp(task1.ebm.log_score(xs) - q.log_prob(xs))))))
    se = np.std(z, ddof=1) / np.sqrt(len(z))
    assert abs(rp.z_ma - Z) <= 3 * se
    assert rp.z_ma == pytest.approx(np.mean(z), rel=1e-12)


def test_is_kl_zero_at_target(task1, rng):
    p, Z = task1.ebm.normalize()
    pol = policy_matching(ExactDistribution(p.space, np.where(p.probs > 0, p.probs, 1e-300)))
    xs = pol.sample(rng, 500)
    assert abs(is_kl_from_target(task1.ebm, Z, pol, pol, xs)) < 1e-12


def test_is_kl_accuracy_and_convergence(task1):
    p, Z = task1.ebm.normalize()
    a = task1.ebm.base
    pi = near(p, a.exact_distribution(), 0.6)
    q = near(p, a.exact_distribution(), 0.3)
    exact = kl(p, pi.exact_distribution())
    errs = {}
    for K in (2500, 10_000, 40_000):
        e = []
        for s in range(8):
            xs = q.sample(np.random.default_rng([K, s]), K)
            e.append(abs(is_kl_from_target(task1.ebm, Z, q, pi, xs) - exact))
        errs[K] = np.sqrt(np.mean(np.square(e)))
    assert errs[10_000] <= 0.05
    assert errs[40_000] < errs[10_000] < errs[2500]
    # same formula with pi replaced by q estimates KL(p, q)
    xs = q.sample(np.random.default_rng(3), 40_000)
    assert is_kl_from_target(task1.ebm, Z, q, q, xs) == pytest.approx(kl(p, q.exact_distribution()), abs=0.05)


def test_is_kl_not_clamped(task1):
    # a near-converged model with a small batch gives transiently negative estimates
    p, Z = task1.ebm.normalize()
    pi = near(p, task1.ebm.base.exact_distribution(), 0.999)
    vals = [is_kl_from_target(task1.ebm, Z, pi, pi, pi.sample(np.random.default_rng(s), 16)) for s in range(40)]
    assert min(vals) < 0


def test_is_tvd_converges(task1):
    p, Z = task1.ebm.normalize()
    a = task1.ebm.base.exact_distribution()
    pi, q = near(p, a, 0.7), near(p, a, 0.4)
    est = is_tvd(task1.ebm, Z, q, pi, q.sample(np.random.default_rng(0), 100_000))
    assert est == pytest.approx(tvd(p, pi.exact_distribution()), abs=0.01)


def test_mc_kl(rng):
    space = VocabSpec(3, 2)
    m, o = random_policy(space, rng), random_policy(space, rng)
    est = mc_kl(m, o, m.sample(np.random.default_rng(0), 100_000))
    assert est == pytest.approx(kl(m.exact_distribution(), o.exact_distribution()), abs=0.02)


def test_constant_advantage_has_zero_variance(task1, rng):
    p, Z = task1.ebm.normalize()
    pi = policy_matching(ExactDistribution(p.space, np.where(p.probs > 0, p.probs, 1e-300)))
    xs = pi.sample(rng, 50)
    d = variance_diagnostics(dpg_off_grads(pi, pi, task1.ebm, Z, True, xs), 1 / Z)
    assert d.var_adv == pytest.approx(0, abs=1e-20)


def test_diagnostics_need_two_samples(task1, rng):
    a = task1.ebm.base
    with pytest.raises(ValueError):
        variance_diagnostics(dpg_off_grads(a, a, task1.ebm, 0.14, False, a.sample(rng, 1)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_diagnostic_invariants_and_permutation(seed):
    rng = np.random.default_rng(seed)
    ebm = random_ebm(VocabSpec(3, 3), rng)
    Z = ebm.exact_partition()
    pol, q = random_policy(ebm.space, rng), random_policy(ebm.space, rng)
    xs = q.sample(rng, 40)
    d = variance_diagnostics(dpg_off_grads(pol, q, ebm, Z, True, xs), 1 / Z)
    assert d.var_grad >= 0 and d.var_adv >= 0
    assert d.mean_abs_adv >= abs(d.mean_adv)
    perm = rng.permutation(len(xs))
    d2 = variance_diagnostics(dpg_off_grads(pol, q, ebm, Z, True, xs[perm]), 1 / Z)
    assert d2.var_grad == pytest.approx(d.var_grad, rel=1e-9, abs=1e-14)
    assert d2.var_adv == pytest.approx(d.var_adv, rel=1e-9, abs=1e-14)
    assert d2.mean_abs_adv == pytest.approx(d.mean_abs_adv, rel=1e-12)


def test_var_grad_matches_dense_computation(task1, rng):
    a = task1.ebm.base
    b = dpg_off_grads(a, a, task1.ebm, 0.14, True, a.sample(rng, 30))
    G = b.grads() / 0.14
    dense = np.mean(np.sum(G**2, axis=1)) - G.mean(axis=0) @ G.mean(axis=0)
    d = variance_diagnostics(b, 1 / 0.14)
    assert d.var_grad == pytest.approx(dense, rel=1e-10)
    assert d.var_adv == pytest.approx(np.var(b.advantage / 0.14, ddof=1), rel=1e-12)


def test_gdcpp_batches_have_lower_gradient_variance_near_convergence(task1):
    p, Z = task1.ebm.normalize()
    a = task1.ebm.base.exact_distribution()
    pi = near(p, a, 0.95)
    q = near(p, a, 0.9)
    wins = 0
    for s in range(20):
        xs = q.sample(np.random.default_rng(100 + s), 64)
        with_b = variance_diagnostics(dpg_off_grads(pi, q, task1.ebm, Z, True, xs), 1 / Z)
        without = variance_diagnostics(dpg_off_grads(pi, q, task1.ebm, Z, False, xs), 1 / Z)
        wins += with_b.var_grad < without.var_grad
    assert wins >= 18


def test_mean_abs_adv_tracks_tvd(task1):
    p, Z = task1.ebm.normalize()
    a = task1.ebm.base.exact_distribution()
    pi, q = near(p, a, 0.8), near(p, a, 0.6)
    xs = q.sample(np.random.default_rng(9), 50_000)
    b = dpg_off_grads(pi, q, task1.ebm, Z, True, xs)
    d = variance_diagnostics(b, 1 / Z)
    se = np.std(np.abs(b.advantage / Z), ddof=1) / np.sqrt(len(xs))
    assert abs(d.mean_abs_adv / 2 - tvd(p, pi.exact_distribution())) <= 3 * se / 2


def test_distinct_examples():
    assert distinct_n(np.full((5, 6), 2), 1) == pytest.approx(1 / 6)
    assert distinct_n(np.full((5, 6), 2), 3) == pytest.approx(1 / 4)
    assert distinct_n(np.array([[0, 1, 2, 3]]), 1) == 1.0
    assert distinct_n(np.array([[0, 1, 0, 1]]), 2) == pytest.approx(2 / 3)


def _distinct_reference(samples, n):
    vals = []
    for s in samples:
        grams = [tuple(s[i:i + n]) for i in range(len(s) - n + 1)]
        vals.append(len(set(grams)) / len(grams))
    return sum(vals) / len(vals)


def test_distinct_uniform_v4_l8_against_reference():
    xs = TabularPolicy.uniform(VocabSpec(4, 8)).sample(np.random.default_rng(0), 10_000)
    for n in (1, 2, 3):
        assert distinct_n(xs, n) == pytest.approx(_distinct_reference(xs.tolist(), n), abs=1e-12)


def test_distinct_errors():
    with pytest.raises(ValueError):
        distinct_n(np.zeros((0, 3), dtype=int), 1)
    with pytest.raises(ValueError):
        distinct_n(np.zeros((2, 3), dtype=int), 4)
