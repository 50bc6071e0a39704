import itertools
import math

import numpy as np
import pytest

from dpglab.ebm import EbmSpec
from dpglab.features import contains_token, count_at_least
from dpglab.policy import TabularPolicy
from dpglab.seqspace import VocabSpec, all_sequences


def brute_sequences(V, L):
    """Independent enumeration via itertools (used as an oracle for seqspace)."""
    return [list(t) for t in itertools.product(range(V), repeat=L)]


def brute_log_prob(logits, V, L, x):
    """Chain-rule log-probability computed with plain Python floats."""
    lp = 0.0
    row = 0
    for t in range(L):
        offset = (V**t - 1) // (V - 1)
        z = logits[offset + row]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        lp += z[x[t]] - lse
        row = row * V + x[t]
    return lp


def random_policy(space, rng, scale=1.0):
    return TabularPolicy(space, scale * rng.standard_normal((space.n_rows, space.vocab_size)))


def random_ebm(space, rng, n_features=None, with_filter=None):
    """A random EBM whose filter (if any) keeps at least one sequence."""
    base = random_policy(space, rng)
    k = int(rng.integers(1, 3)) if n_features is None else n_features
    feats = []
    for _ in range(k):
        t = int(rng.integers(space.vocab_size))
        if rng.random() < 0.5:
            feats.append(contains_token(t))
        else:
            feats.append(count_at_least(t, int(rng.integers(1, space.seq_len + 1))))
    lambdas = rng.normal(0, 1.0, size=k)
    use_filter = rng.random() < 0.5 if with_filter is None else with_filter
    filt = contains_token(int(rng.integers(space.vocab_size))) if use_filter else None
    return EbmSpec(base, feats, lambdas, filt)


def policy_matching(dist):
    """Tabular policy whose sequence distribution equals ``dist`` (all entries > 0)."""
    space = dist.space
    pol = TabularPolicy(space)
    X = all_sequences(space)
    rows = pol.rows(X)
    mass = np.zeros_like(pol.logits)
    for t in range(space.seq_len):
        np.add.at(mass, (rows[:, t], X[:, t]), dist.probs)
    pol.logits[:] = np.log(mass)
    return pol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_space():
    return VocabSpec(3, 3)


# acceptance criteria report lines, printed after the test session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0][1:])):
            terminalreporter.write_line(line)
