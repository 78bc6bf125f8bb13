import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oodppo.distributions import softmax
from oodppo.layers import SubmodelBundle
from oodppo.uncertainty import (ContractError, entropy_uncertainty, max_prob_uncertainty,
                                policy_uncertainty_js_categorical, policy_uncertainty_js_continuous,
                                policy_uncertainty_std_categorical, policy_uncertainty_std_continuous, report,
                                value_uncertainty)

from . import oracles


def logits_of(probs):
    return np.log(np.maximum(np.asarray(probs, dtype=float), 1e-300))


# --------------------------------------------------------------------------- fixed examples

def test_value_uncertainty_examples():
    assert value_uncertainty([3, 3, 3, 3]) == 0.0
    assert value_uncertainty([0, 0, 2, 2]) == 1.0
    assert value_uncertainty([1, 2, 3, 4]) == pytest.approx(math.sqrt(1.25), abs=1e-15)
    with pytest.raises(ContractError):
        value_uncertainty([1.0])


def test_policy_std_examples():
    assert policy_uncertainty_std_continuous([[0, 0], [2, 2]]) == 1.0
    assert policy_uncertainty_std_continuous([[0.3, 1.0]] * 3) == 0.0
    assert policy_uncertainty_std_categorical([[1, 0], [0, 1]]) == 0.5


def test_max_prob_examples():
    assert max_prob_uncertainty(logits_of([[1, 0], [1, 0]])) == pytest.approx(0.0, abs=1e-12)
    assert max_prob_uncertainty(logits_of([[1, 0], [0, 1]])) == pytest.approx(0.5, abs=1e-12)
    assert max_prob_uncertainty(np.zeros((3, 4))) == 0.75


def test_entropy_examples():
    assert entropy_uncertainty(logits_of([[1, 0], [1, 0]])) == pytest.approx(0.0, abs=1e-12)
    assert entropy_uncertainty(np.zeros((2, 2))) == pytest.approx(math.log(2), abs=1e-15)
    assert entropy_uncertainty(logits_of([[0.9, 0.1], [0.1, 0.9]])) == pytest.approx(math.log(2), abs=1e-15)


def test_js_examples():
    assert policy_uncertainty_js_categorical(np.zeros((3, 4))) == 0.0
    assert policy_uncertainty_js_continuous([[0, 0], [1, 0]], 1.0) == 1.0
    assert policy_uncertainty_js_continuous([[0.5, 0.5]] * 4, 1.0) == 0.0


def test_js_continuous_per_dimension_sigma_uses_full_formula():
    mu = np.array([[0.0, 0.0], [1.0, 2.0]])
    sigma = np.array([1.0, 2.0])
    assert policy_uncertainty_js_continuous(mu, sigma) == pytest.approx(0.5 * (1.0 + 1.0), abs=1e-15)


# --------------------------------------------------------------------------- oracle agreement

@pytest.mark.parametrize("seed", range(5))
def test_batched_measures_match_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    k, n, N = 4, 6, 3
    logits = rng.normal(size=(k, n, N)) * 2
    for i in range(n):
        one = logits[:, i, :].tolist()
        assert policy_uncertainty_std_continuous(logits)[i] == pytest.approx(oracles.mean_std_loop(one), abs=1e-12)
        assert max_prob_uncertainty(logits)[i] == pytest.approx(oracles.max_prob_loop(one), abs=1e-12)
        assert entropy_uncertainty(logits)[i] == pytest.approx(oracles.entropy_loop(one), abs=1e-12)
        assert policy_uncertainty_js_categorical(logits)[i] == pytest.approx(oracles.js_cat_loop(one), abs=1e-12)


# --------------------------------------------------------------------------- properties

finite = st.floats(-20, 20)
stack = arrays(np.float64, st.tuples(st.integers(2, 5), st.integers(1, 4)), elements=finite)


def all_measures(x):
    return [policy_uncertainty_std_continuous(x), policy_uncertainty_std_categorical(x), max_prob_uncertainty(x),
            entropy_uncertainty(x), policy_uncertainty_js_categorical(x), policy_uncertainty_js_continuous(x, 0.7),
            value_uncertainty(x[:, 0])]


@given(stack)
def test_measures_are_non_negative(x):
    assert all(m >= -1e-15 for m in all_measures(x))


@given(stack, st.randoms(use_true_random=False))
def test_measures_are_permutation_invariant(x, rnd):
    order = list(range(len(x)))
    rnd.shuffle(order)
    for a, b in zip(all_measures(x), all_measures(x[order])):
        assert a == pytest.approx(b, abs=1e-9)


@given(arrays(np.float64, st.integers(1, 4), elements=finite), st.integers(2, 5))
def test_disagreement_measures_vanish_on_agreement(row, k):
    x = np.tile(row, (k, 1))
    assert policy_uncertainty_std_continuous(x) == pytest.approx(0.0, abs=1e-12)
    assert policy_uncertainty_js_categorical(x) == pytest.approx(0.0, abs=1e-12)
    assert policy_uncertainty_js_continuous(x, 1.3) == 0.0


@given(stack, st.floats(0.01, 100))
def test_std_measures_are_homogeneous(x, c):
    assert policy_uncertainty_std_continuous(c * x) == pytest.approx(c * policy_uncertainty_std_continuous(x),
                                                                    rel=1e-9, abs=1e-12)


@given(stack, arrays(np.float64, 4, elements=finite))
def test_categorical_std_is_shift_invariant(x, shift):
    shifted = x + shift[: x.shape[1]]
    assert policy_uncertainty_std_categorical(shifted) == pytest.approx(policy_uncertainty_std_categorical(x),
                                                                        abs=1e-9)


@given(arrays(np.float64, st.tuples(st.just(2), st.integers(2, 5)), elements=finite))
def test_js_is_symmetric(x):
    assert policy_uncertainty_js_categorical(x) == policy_uncertainty_js_categorical(x[::-1])


# --------------------------------------------------------------------------- report

def test_report_fields_by_action_space():
    rng = np.random.default_rng(0)
    cat = SubmodelBundle(rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5)), "masksembles", True)
    r = report(cat)
    assert set(r.measures()) == {"value_std", "policy_std", "policy_js", "max_prob", "entropy"}
    assert np.allclose(report(cat, cat_std_on_probs=True).policy_u_std,
                       softmax(cat.policy_outputs).std(axis=0).mean(axis=-1))
    cont = SubmodelBundle(rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 5)), "dropout", False, np.zeros(2))
    r = report(cont)
    assert r.max_prob_u is None and r.entropy_u is None
    assert r.value_u.shape == (5,)
