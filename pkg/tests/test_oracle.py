import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import policy_matching, random_ebm, random_policy
from dpglab.ebm import EbmSpec
from dpglab.estimators import RewardSpec
from dpglab.features import contains_token
from dpglab.oracle import (
    EstimatorSpec,
    SupportError,
    advantage_table,
    exact_advantage_stats,
    exact_dpg_gradient,
    exact_expected_gradient,
    exact_gradient_variance,
    exact_mean_reward,
    exact_optimal_baseline,
    exact_ziegler_objective,
    kl,
    normalize_ebm,
    parametric_reward_terms,
    tvd,
    ziegler_optimal_policy,
)
from dpglab.policy import TabularPolicy
from dpglab.seqspace import ExactDistribution, VocabSpec, all_sequences

B1 = VocabSpec(2, 1)


def bern(p):
    return ExactDistribution(B1, np.array([1 - p, p]))


def test_normalize_examples(rng):
    base = random_policy(VocabSpec(3, 2), rng)
    p, Z = normalize_ebm(EbmSpec(base))
    assert np.allclose(p.probs, base.exact_distribution().probs, atol=1e-15)
    p, Z = normalize_ebm(EbmSpec(TabularPolicy.uniform(VocabSpec(2, 2)), filter=contains_token(1)))
    assert np.allclose(p.probs, [0, 1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_kl_examples():
    assert kl(bern(0.3), bern(0.3)) < 1e-12
    # 0.75 log 1.5 + 0.25 log 0.5, by direct arithmetic
    assert kl(bern(0.75), bern(0.5)) == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-15)
    assert kl(bern(0.75), bern(0.5)) == pytest.approx(0.13081, abs=5e-6)


def test_kl_support_error_names_sequence():
    with pytest.raises(SupportError, match=r"\[0\]"):
        kl(bern(0.5), bern(1.0))
    assert kl(bern(1.0), bern(0.5)) == pytest.approx(math.log(2))  # 0 log 0 = 0


def test_tvd_examples():
    assert tvd(bern(0.2), bern(0.2)) == 0
    assert tvd(bern(0.0), bern(1.0)) == 1
    assert tvd(bern(0.75), bern(0.5)) == pytest.approx(0.25)


def test_dpg_gradient_vanishes_at_target(rng):
    ebm = random_ebm(VocabSpec(3, 3), rng)
    p, Z = ebm.normalize()
    if np.any(p.probs == 0):
        ebm.filter = None
        p, Z = ebm.normalize()
    pol = policy_matching(p)
    assert np.max(np.abs(exact_dpg_gradient(pol, ebm))) < 1e-10
    spec = EstimatorSpec("dpg_on", ebm=ebm, baseline="partition_Z", Z=Z)
    assert np.max(np.abs(exact_expected_gradient(spec, pol))) < 1e-10
    assert exact_gradient_variance(spec, pol) < 1e-12


def test_reinforce_two_arm_root_gradient():
    pol = TabularPolicy.uniform(B1)
    r = RewardSpec.custom_table([0.0, 1.0], B1)
    g = exact_expected_gradient(EstimatorSpec("reinforce", reward=r), pol)
    assert np.allclose(g, [-0.25, 0.25], atol=1e-15)


def test_two_arm_variance_by_hand():
    # constant advantage c: G(x) = c * s(x); with s([0]) = (1-p0, -p1), s([1]) = (-p0, 1-p1)
    pol = TabularPolicy(B1, [[0.4, -0.3]])
    p0, p1 = pol.exact_distribution().probs
    c = 1.7
    r = RewardSpec.custom_table([c, c], B1)
    s0 = np.array([1 - p0, -p1])
    s1 = np.array([-p0, 1 - p1])
    second = p0 * c**2 * (s0 @ s0) + p1 * c**2 * (s1 @ s1)
    mean = c * (p0 * s0 + p1 * s1)  # zero by the score identity
    hand = second - mean @ mean
    assert exact_gradient_variance(EstimatorSpec("reinforce", reward=r), pol) == pytest.approx(hand, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_optimal_baseline_is_a_minimum(seed):
    rng = np.random.default_rng(seed)
    space = VocabSpec(int(rng.integers(2, 4)), int(rng.integers(1, 3)))
    pol = random_policy(space, rng)
    rv = rng.random(space.size)
    r = RewardSpec.custom_table(rv, space)
    b_star = exact_optimal_baseline(pol, rv)
    v = exact_gradient_variance(EstimatorSpec("reinforce", reward=r, baseline="optimal_constant"), pol)
    for d in (-0.1, 0.1):
        vd = exact_gradient_variance(EstimatorSpec("reinforce", reward=r, baseline=b_star + d), pol)
        assert v <= vd + 1e-12


def test_variance_is_quadratic_in_baseline(rng):
    # Var(B) = Var(B*) + (B - B*)^2 E||s||^2
    space = VocabSpec(3, 2)
    pol = random_policy(space, rng)
    rv = rng.random(space.size)
    r = RewardSpec.custom_table(rv, space)
    b_star = exact_optimal_baseline(pol, rv)
    X = all_sequences(space)
    _, blocks = pol.score_blocks(X)
    e_sq = pol.exact_distribution().probs @ np.sum(blocks**2, axis=(1, 2))
    v_star = exact_gradient_variance(EstimatorSpec("reinforce", reward=r, baseline=b_star), pol)
    for b in (-1.0, 0.0, 0.4, 2.0):
        v = exact_gradient_variance(EstimatorSpec("reinforce", reward=r, baseline=b), pol)
        assert v == pytest.approx(v_star + (b - b_star) ** 2 * e_sq, rel=1e-10, abs=1e-12)


def test_optimal_equals_mean_when_score_norm_is_constant(rng):
    space = VocabSpec(3, 2)
    pol = TabularPolicy.uniform(space)  # ||s(x)||^2 = L (V-1)/V for every x
    rv = rng.random(space.size)
    assert exact_optimal_baseline(pol, rv) == pytest.approx(exact_mean_reward(pol, rv), abs=1e-12)


def test_pz_examples():
    base = TabularPolicy.uniform(B1)
    r = RewardSpec.custom_table([0.0, 1.0], B1)
    pz = ziegler_optimal_policy(base, r, 1.0)
    e = math.e
    assert np.allclose(pz.probs, [1 / (1 + e), e / (1 + e)], atol=1e-15)


def test_pz_large_beta_is_base(rng):
    base = random_policy(VocabSpec(3, 2), rng)
    r = RewardSpec.custom_table(rng.random(9), base.space)
    assert tvd(ziegler_optimal_policy(base, r, 1e6), base.exact_distribution()) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), beta=st.floats(0.05, 10))
def test_klrmax_identity(seed, beta):
    rng = np.random.default_rng(seed)
    space = VocabSpec(3, 3)
    pol, base = random_policy(space, rng, 2.0), random_policy(space, rng)
    r = RewardSpec.custom_table(rng.normal(0, 2, space.size), space)
    pz, Z = ziegler_optimal_policy(base, r, beta, return_partition=True)
    lhs = exact_ziegler_objective(pol, base, r, beta)
    rhs = beta * math.log(Z) - beta * kl(pol.exact_distribution(), pz)
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_pz_maximizes_objective_among_perturbations(rng):
    space = VocabSpec(3, 2)
    base = random_policy(space, rng)
    r = RewardSpec.custom_table(rng.random(9), space)
    best = policy_matching(ziegler_optimal_policy(base, r, 0.5))
    top = exact_ziegler_objective(best, base, r, 0.5)
    for _ in range(50):
        other = best.copy()
        other.logits += rng.normal(0, 0.3, other.logits.shape)
        assert exact_ziegler_objective(other, base, r, 0.5) <= top + 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_tvd_advantage_identity(seed):
    rng = np.random.default_rng(seed)
    ebm = random_ebm(VocabSpec(3, 3), rng)
    p, Z = ebm.normalize()
    pol, q = random_policy(ebm.space, rng), random_policy(ebm.space, rng)
    spec = EstimatorSpec("dpg_off", ebm=ebm, proposal=q, baseline="offpolicy_Z_ratio", Z=Z)
    stats = exact_advantage_stats(spec, pol, scale=1 / Z)
    assert stats["mean_abs_adv"] == pytest.approx(2 * tvd(p, pol.exact_distribution()), abs=1e-12)
    assert abs(stats["mean_adv"]) < 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_two_terms_split(seed):
    rng = np.random.default_rng(seed)
    ebm = random_ebm(VocabSpec(3, 2), rng, with_filter=False)
    pol = random_policy(ebm.space, rng)
    rg, pg = parametric_reward_terms(pol, "dpg", ebm=ebm)
    # E_pi[P/pi] = Z does not depend on theta, so the two terms cancel exactly
    assert np.max(np.abs(rg + pg)) < 1e-9
    assert np.allclose(pg, exact_dpg_gradient(pol, ebm), atol=1e-12)


def test_two_terms_against_finite_differences_for_ziegler(rng):
    space = VocabSpec(3, 2)
    pol, base = random_policy(space, rng), random_policy(space, rng)
    r = RewardSpec.custom_table(rng.random(9), space)
    rg, pg = parametric_reward_terms(pol, "ziegler", reward=r, base=base, beta=0.8)
    h = 1e-6
    for j in range(pol.n_params):
        up, dn = pol.copy(), pol.copy()
        up.params[j] += h
        dn.params[j] -= h
        fd = (exact_ziegler_objective(up, base, r, 0.8) - exact_ziegler_objective(dn, base, r, 0.8)) / (2 * h)
        assert fd == pytest.approx(rg[j] + pg[j], abs=1e-7)


def test_baseline_invariance_of_mean(rng):
    ebm = random_ebm(VocabSpec(3, 3), rng)
    Z = ebm.exact_partition()
    pol, q = random_policy(ebm.space, rng), random_policy(ebm.space, rng)
    g0 = exact_expected_gradient(EstimatorSpec("dpg_off", ebm=ebm, proposal=q, Z=Z), pol)
    g1 = exact_expected_gradient(EstimatorSpec("dpg_off", ebm=ebm, proposal=q, Z=Z, baseline="offpolicy_Z_ratio"),
                                 pol)
    assert np.max(np.abs(g0 - g1)) < 1e-10
    assert np.allclose(g0, exact_dpg_gradient(pol, ebm), atol=1e-12)


def test_advantage_table_rejects_unknown_kind(rng):
    pol = random_policy(VocabSpec(2, 1), rng)
    with pytest.raises(ValueError):
        advantage_table(EstimatorSpec("ppo"), pol)
