import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from poserec import numerics as nx
from poserec.errors import DegenerateVectorError
from poserec.prototypes import (
    PrototypeBank,
    contribution_weights,
    prototype_score,
    prototype_separation_loss,
    score_matrix,
)
from oracles import cosine


def test_single_prototype_gets_full_weight():
    bank = PrototypeBank(np.random.default_rng(0), k=1, dim=8)
    assert contribution_weights(np.ones(8), bank).data.tolist() == [1.0]


def test_equal_cosines_give_uniform_weights():
    r = np.eye(4)
    np.testing.assert_allclose(contribution_weights(np.ones(4), r).data, [0.25] * 4, atol=1e-15)


def test_cosines_one_and_zero():
    omega = contribution_weights(np.array([1.0, 0.0]), np.eye(2)).data
    np.testing.assert_allclose(omega, [0.7311, 0.2689], atol=5e-5)


def test_initial_bank_is_unit_and_spread():
    for k in (1, 2, 4, 8, 16):
        r = PrototypeBank(np.random.default_rng(k), k=k, dim=64).matrix().data
        np.testing.assert_allclose(np.linalg.norm(r, axis=1), 1.0)
        off = np.abs(r @ r.T)[np.triu_indices(k, 1)]
        assert off.size == 0 or off.max() < 0.5
    bank = PrototypeBank(np.random.default_rng(0))
    assert [p.name for p in bank.parameters()] == ["proto.r0", "proto.r1", "proto.r2", "proto.r3"]


pos = st.floats(0.01, 100)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), pos, st.lists(pos, min_size=4, max_size=4))
def test_weights_scale_invariant(seed, a, scales):
    rng = np.random.default_rng(seed)
    e, r = rng.normal(size=16), rng.normal(size=(4, 16))
    base = contribution_weights(e, r).data
    np.testing.assert_allclose(contribution_weights(a * e, r * np.array(scales)[:, None]).data, base, atol=1e-12)


def test_degenerate_query_raises():
    with pytest.raises(DegenerateVectorError):
        contribution_weights(np.zeros(4), np.eye(4))


def test_single_chunk_score_is_plain_cosine():
    rng = np.random.default_rng(0)
    ei, ev = rng.normal(size=(1, 32)), rng.normal(size=(1, 32))
    assert abs(prototype_score(ei, ev, np.array([1.0])).item() - cosine(ei[0], ev[0])) < 1e-15


def test_equal_chunk_cosines_give_that_cosine():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(3, 5))
    omega = rng.dirichlet(np.ones(3))
    # every chunk pair is the same vector up to scale, so every cosine is 1
    assert abs(prototype_score(2 * v, v, omega).item() - 1.0) < 1e-12


def test_score_matches_scalar_loop():
    rng = np.random.default_rng(2)
    ei, ev = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    omega = rng.dirichlet(np.ones(4))
    expected = sum(omega[k] * cosine(ei[k], ev[k]) for k in range(4))
    assert abs(prototype_score(ei, ev, omega).item() - expected) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), arrays(np.float64, 4, elements=pos), arrays(np.float64, 4, elements=pos))
def test_score_invariant_to_chunk_rescaling(seed, si, sv):
    rng = np.random.default_rng(seed)
    ei, ev = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    omega = rng.dirichlet(np.ones(4))
    base = prototype_score(ei, ev, omega).item()
    assert abs(prototype_score(ei * si[:, None], ev * sv[:, None], omega).item() - base) < 1e-12
    assert -1 - 1e-12 <= base <= 1 + 1e-12


def test_score_matrix_agrees_with_pairwise_scores():
    rng = np.random.default_rng(3)
    v, i = rng.normal(size=(3, 4, 8)), rng.normal(size=(5, 4, 8))
    omega = rng.dirichlet(np.ones(4), size=5)
    m = score_matrix(v, i, omega).data
    for b in range(3):
        for n in range(5):
            assert abs(m[b, n] - prototype_score(i[n], v[b], omega[n]).item()) < 1e-14


def test_separation_loss_reference_values():
    assert prototype_separation_loss(np.eye(2)).item() == 0.0
    assert abs(prototype_separation_loss(np.ones((2, 3))).item() - 1.0) < 1e-15
    assert prototype_separation_loss(np.ones((1, 3))).item() == 0.0


def test_separation_loss_matches_pair_loop():
    r = np.random.default_rng(4).normal(size=(3, 64))
    expected = sum(cosine(r[a], r[b]) for a in range(3) for b in range(a + 1, 3))
    assert abs(prototype_separation_loss(r).item() - expected) < 1e-12


def test_separation_loss_gradcheck():
    bank = PrototypeBank(np.random.default_rng(5), k=5, dim=16)
    report = nx.gradcheck(lambda: prototype_separation_loss(bank), bank.parameters())
    assert report.max_rel_error < 1e-6, report.per_param


@pytest.mark.parametrize("k", [2, 4, 8])
def test_separation_loss_alone_spreads_prototypes(k):
    bank = PrototypeBank(np.random.default_rng(k), k=k, dim=64)
    for _ in range(500):
        with nx.Tape() as tape:
            loss = prototype_separation_loss(bank)
        tape.backward(loss)
        nx.adam_step(bank.parameters(), lr=1e-2)
    r = bank.matrix().data
    r = r / np.linalg.norm(r, axis=1, keepdims=True)
    assert (r @ r.T)[np.triu_indices(k, 1)].max() < 0.1
