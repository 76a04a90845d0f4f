import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_banks, random_encoder
from oodfl.core import PromptBank, Role, RunConfig
from oodfl.client import (ClientShard, ClientState, batches, id_embeddings, local_train,
                          mcm_score, predict)
from oodfl.encoder import FrozenEncoder, cosine_similarity
from oodfl.objective import mean_separation_loss


def staged_state(banks):
    return ClientState(banks.local, banks.glob, banks.ood)


def separable_shard(rng, n=20, d=6):
    y = np.repeat([0, 1], n // 2)
    centers = np.eye(d)[:2] * 3.0
    return ClientShard(0, centers[y] + 0.1 * rng.standard_normal((n, d)), y, 2)


# -- shards and batches ------------------------------------------------------------

def test_shard_counts_and_checks():
    shard = ClientShard(3, np.zeros((4, 2)), [0, 2, 2, 1], 4)
    np.testing.assert_array_equal(shard.class_counts, [1, 1, 2, 0])
    assert len(shard) == 4
    with pytest.raises(ValueError):
        ClientShard(0, np.zeros((0, 2)), [], 2)
    with pytest.raises(ValueError):
        ClientShard(0, np.zeros((2, 2)), [0, 5], 2)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), B=st.integers(1, 20), seed=st.integers(0, 999))
def test_batches_cover_each_sample_once(n, B, seed):
    bs = batches(n, B, np.random.default_rng(seed))
    np.testing.assert_array_equal(np.sort(np.concatenate(bs)), np.arange(n))
    assert all(len(b) == B for b in bs[:-1]) and 1 <= len(bs[-1]) <= B


# -- training ------------------------------------------------------------------------

def test_zero_epochs_returns_staged_banks(rng):
    banks = random_banks(rng)
    state = staged_state(banks)
    shard = ClientShard(0, rng.standard_normal((5, 6)), [0, 1, 2, 0, 1], 3)
    g, o, stats = local_train(state, shard, random_encoder(rng),
                              dataclasses.replace(RunConfig(), local_epochs=0), rng)
    assert g == banks.glob and o == banks.ood and state.local_bank == banks.local
    assert stats.steps == 0


def test_unstaged_state_rejected(rng):
    state = ClientState(random_banks(rng).local)
    with pytest.raises(ValueError):
        state.banks


@pytest.mark.parametrize("bos", [True, False])
def test_one_epoch_reduces_loss_on_separable_shard(bos):
    rng = np.random.default_rng(42)
    banks, enc = random_banks(rng, C=2), random_encoder(rng)
    shard = separable_shard(rng)
    cfg = dataclasses.replace(RunConfig(), local_epochs=1, batch_size=5, temperature=0.5,
                              enable_bos=bos)
    before = mean_separation_loss(shard.X, shard.y, banks, enc, 0.5, 0.5)
    state = staged_state(banks)
    g, o, stats = local_train(state, shard, enc, cfg, np.random.default_rng(42))
    after = mean_separation_loss(shard.X, shard.y, state.banks, enc, 0.5, 0.5)
    assert stats.steps == 4
    assert after < before
    assert state.banks.glob is g and state.banks.ood is o


def test_local_train_deterministic(rng):
    banks, enc = random_banks(rng, C=2), random_encoder(rng)
    shard = separable_shard(rng)
    outs = []
    for _ in range(2):
        state = staged_state(banks)
        outs.append(local_train(state, shard, enc, RunConfig(), np.random.default_rng(5))[:2]
                    + (state.local_bank,))
    assert outs[0] == outs[1]


# -- prediction ------------------------------------------------------------------------

def test_predict_self_match_and_tie():
    enc = FrozenEncoder(np.hstack([np.eye(3), np.eye(3)]))
    names = np.eye(3)
    local = PromptBank(Role.LOCAL, np.zeros((3, 3)), names)
    glob = PromptBank(Role.GLOBAL_ID, np.zeros((3, 3)), names)
    ood = PromptBank(Role.OOD, np.empty((0, 3)), np.empty((0, 3)))
    state = ClientState(local, glob, ood)
    np.testing.assert_array_equal(predict(np.eye(3)[[2, 0, 1]], state, enc, 0.07, 0.5), [2, 0, 1])
    same = PromptBank(Role.LOCAL, np.zeros((2, 3)), np.ones((2, 3)))
    tied = ClientState(same, PromptBank(Role.GLOBAL_ID, same.contexts, same.names), ood)
    assert predict([1.0, 0.2, 0.0], tied, enc, 0.07, 0.5)[0] == 0


def test_predict_matches_linear_scan(rng):
    banks, enc = random_banks(rng, C=5), random_encoder(rng)
    state = staged_state(banks)
    X = rng.standard_normal((30, 6))
    emb = id_embeddings(state, enc, 0.3)
    scan = []
    for x in X:
        best, best_s = 0, -np.inf
        for c in range(5):
            s = np.exp(cosine_similarity(x, emb[c]) / 0.07)
            if s > best_s:
                best, best_s = c, s
        scan.append(best)
    np.testing.assert_array_equal(predict(X, state, enc, 0.07, 0.3), scan)


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 999))
def test_predict_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    banks, enc = random_banks(rng, C=4), random_encoder(rng)
    X = rng.standard_normal((10, 6))
    state = staged_state(banks)
    np.testing.assert_array_equal(predict(scale * X, state, enc, 0.07, 0.5),
                                  predict(X, state, enc, 0.07, 0.5))


# -- MCM ------------------------------------------------------------------------------

def _bank_with_embeddings(E):
    """Global bank whose encoded prompts equal the rows of E under the identity-name encoder."""
    d = E.shape[1]
    enc = FrozenEncoder(np.hstack([np.zeros((d, d)), np.eye(d)]))
    return PromptBank(Role.GLOBAL_ID, np.zeros_like(E), E), enc


def test_mcm_examples():
    bank, enc = _bank_with_embeddings(np.array([[1.0, 0.0]]))
    assert mcm_score([0.3, 0.7], bank, enc, 0.07)[0] == 1.0
    # all cosines equal when x is orthogonal to every prompt
    E = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    bank, enc = _bank_with_embeddings(E)
    assert mcm_score([0.0, 0.0, 2.0], bank, enc, 0.07)[0] == pytest.approx(0.25, abs=1e-15)


def test_mcm_two_class_value():
    # unit prompts chosen so the cosines with x = e1 are exactly 0.9 and 0.1
    E = np.array([[0.9, np.sqrt(1 - 0.81)], [0.1, np.sqrt(1 - 0.01)]])
    bank, enc = _bank_with_embeddings(E)
    got = mcm_score([1.0, 0.0], bank, enc, 1.0)[0]
    assert got == pytest.approx(np.exp(0.9) / (np.exp(0.9) + np.exp(0.1)), rel=1e-13)
    assert got == pytest.approx(0.68997, abs=1e-5)


def test_mcm_rejects_ood_bank(rng):
    with pytest.raises(ValueError):
        mcm_score(np.ones(6), random_banks(rng).ood, random_encoder(rng), 0.1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 999), tau=st.floats(0.01, 5))
def test_mcm_in_range(seed, tau):
    rng = np.random.default_rng(seed)
    banks, enc = random_banks(rng, C=4), random_encoder(rng)
    s = mcm_score(rng.standard_normal((5, 6)), banks.glob, enc, tau)
    assert np.all((s >= 0.25 - 1e-12) & (s <= 1.0))
