import logging
import math

import numpy as np
import pytest

from compexp import tensor as T
from compexp.config import ModelConfig
from compexp.corpus import BOS_ID, EOS_ID, PAD_ID
from compexp.extractor import ExtractionContext, extraction_distribution
from compexp.params import ParamStore, adam_step
from compexp.refiner import (apply_refinement, decode, decode_batch, init_decoder_params,
                             refine_direction, refiner_nll, sequence_log_probs, strip_eos)
from oracles import central_fd, rel_error

CFG = ModelConfig(emb_dim=4, hidden=2, att_dim=3, transform_dim=4, rating_dim=2,
                  dec_emb_dim=3, dec_hidden=3, init_scale=0.5)
STATE = 4


def decoder(vocab=6, seed=0):
    s = ParamStore()
    init_decoder_params(s, vocab, CFG, STATE, np.random.default_rng(seed))
    return s


def p_ext(x, others, refs, kappa):
    cands = T.Tensor(np.vstack([x[None], others]))
    return extraction_distribution(ExtractionContext(cands, T.Tensor(refs), kappa)).data[0]


# ---------------------------------------------------------------------------
# refinement direction
# ---------------------------------------------------------------------------


def test_direction_vanishes_at_cosine_maximum():
    h = np.array([1.0, 2.0, -0.5])
    z = refine_direction(3.0 * h, h[None], 3.0)
    np.testing.assert_allclose(z, 0.0, atol=1e-15)


def test_direction_is_along_h_when_orthogonal():
    x = np.array([2.0, 0.0, 0.0])
    h = np.array([0.0, 3.0, 4.0])
    z = refine_direction(x, h[None], 3.0)
    np.testing.assert_allclose(z, (h / 5.0) / 2.0, atol=1e-15)


def test_zero_norm_raises():
    with pytest.raises(ValueError):
        refine_direction(np.zeros(3), np.ones((1, 3)), 3.0)
    with pytest.raises(ValueError):
        refine_direction(np.ones(3), np.zeros((1, 3)), 3.0)


def test_closed_form_matches_autodiff_gradient_of_p_ext():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d, m, n = 5, int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x, refs, others = rng.normal(size=d), rng.normal(size=(m, d)), rng.normal(size=(n, d))
        kappa = float(rng.uniform(0.5, 5.0))
        xt = T.Tensor(x, requires_grad=True)
        cands = T.concat([T.reshape(xt, (1, d)), T.Tensor(others)], axis=0)
        T.getitem(extraction_distribution(ExtractionContext(cands, T.Tensor(refs), kappa)), 0).backward()
        z = refine_direction(x, refs, kappa)
        cos = z @ xt.grad / (np.linalg.norm(z) * np.linalg.norm(xt.grad))
        assert cos > 1 - 1e-6


def test_directional_derivative_is_positive():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d, m = 4, int(rng.integers(1, 5))
        x, refs, others = rng.normal(size=d), rng.normal(size=(m, d)), rng.normal(size=(3, d))
        z = refine_direction(x, refs, 3.0)
        if np.linalg.norm(z) <= 1e-8:
            continue
        u = z / np.linalg.norm(z)
        delta = 1e-3
        assert (p_ext(x + delta * u, others, refs, 3.0) - p_ext(x, others, refs, 3.0)) / delta > 0


def test_direction_fd_of_lse_surrogate():
    rng = np.random.default_rng(2)
    x, refs = rng.normal(size=4), rng.normal(size=(3, 4))

    def f():
        c = refs @ x / (np.linalg.norm(refs, axis=1) * np.linalg.norm(x))
        return float(np.log(np.exp(3.0 * c).sum()))

    (g,) = central_fd(f, [x])
    z = refine_direction(x, refs, 3.0)
    assert z @ g / (np.linalg.norm(z) * np.linalg.norm(g)) > 1 - 1e-8


def test_batched_direction_matches_single():
    rng = np.random.default_rng(3)
    X, R = rng.normal(size=(2, 4)), rng.normal(size=(2, 3, 4))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    Z = refine_direction(X, R, 2.0, mask)
    np.testing.assert_allclose(Z[0] / np.linalg.norm(Z[0]),
                               refine_direction(X[0], R[0], 2.0) / np.linalg.norm(refine_direction(X[0], R[0], 2.0)),
                               atol=1e-12)
    z1 = refine_direction(X[1], R[1, :2], 2.0)
    np.testing.assert_allclose(Z[1] / np.linalg.norm(Z[1]), z1 / np.linalg.norm(z1), atol=1e-12)


def test_apply_refinement_examples():
    np.testing.assert_array_equal(apply_refinement([1.0, 2.0], [0.0, 0.0]), [1.0, 2.0])
    np.testing.assert_allclose(apply_refinement([0.0, 0.0], [3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(apply_refinement([1.0, 2.0], [1e-9, 0.0]), [1.0, 2.0])
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, z = rng.normal(size=5), rng.normal(size=5)
        assert np.linalg.norm(apply_refinement(x, z) - x) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def test_greedy_decode_is_deterministic_and_clean():
    p = decoder()
    rng = np.random.default_rng(5)
    xhat, states = rng.normal(size=CFG.transform_dim), rng.normal(size=(3, STATE))
    a = decode(xhat, states, p, "greedy", 25)
    b = decode(xhat, states, p, "greedy", 25)
    assert a == b
    assert PAD_ID not in a[0] and BOS_ID not in a[0] and EOS_ID not in a[0]


def test_max_len_one():
    p = decoder()
    toks, _ = decode(np.ones(CFG.transform_dim), np.ones((2, STATE)), p, "greedy", 1)
    assert len(toks) <= 1
    with pytest.raises(ValueError):
        decode(np.ones(CFG.transform_dim), np.ones((2, STATE)), p, "greedy", 0)


def test_sampled_decode_never_emits_pad_or_bos():
    p = decoder()
    rng = np.random.default_rng(6)
    B = 64
    outs, lps = decode_batch(p, rng.normal(size=(B, CFG.transform_dim)), rng.normal(size=(B, 3, STATE)),
                             np.ones((B, 3)), "sample", 10, rng)
    flat = [t for o in outs for t in o]
    assert PAD_ID not in flat and BOS_ID not in flat
    assert all(lp < 0 for lp in lps)


def test_attention_sums_to_one_each_step():
    p = decoder()
    rng = np.random.default_rng(7)
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=float)
    _, _, attn = decode_batch(p, rng.normal(size=(2, CFG.transform_dim)), rng.normal(size=(2, 3, STATE)),
                              mask, "greedy", 6, return_attention=True)
    for a in attn:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(a[1, 1:] == 0)


def hand_decoder():
    """Vocab <pad> <unk> <bos> <eos> a b; the state copies the input token, the output maps
    bos -> a, a -> b, b -> eos."""
    p = decoder()
    H = CFG.dec_hidden
    A, B = 4, 5
    emb = np.zeros((6, 3))
    emb[BOS_ID], emb[A], emb[B] = [1, 0, 0], [0, 1, 0], [0, 0, 1]
    p["dec.emb"].data[...] = emb
    W = np.zeros((3, 3 * H))
    W[:, 2 * H:] = 5.0 * np.eye(3)
    p["dec.gru.W"].data[...] = W
    p["dec.gru.U"].data[...] = 0.0
    bx = np.zeros(3 * H)
    bx[H:2 * H] = -50.0
    p["dec.gru.bx"].data[...] = bx
    p["dec.gru.bh"].data[...] = 0.0
    comb = np.zeros((STATE + H, H))
    comb[STATE:] = 3.0 * np.eye(H)
    p["dec.comb.W"].data[...] = comb
    p["dec.comb.b"].data[...] = 0.0
    out = np.zeros((H, 6))
    out[0, A], out[1, B], out[2, EOS_ID] = 10.0, 10.0, 10.0
    p["dec.out.W"].data[...] = out
    p["dec.out.b"].data[...] = 0.0
    return p


def test_hand_set_decoder_follows_traced_sequence():
    p = hand_decoder()
    toks, lp = decode(np.ones(CFG.transform_dim), np.ones((2, STATE)), p, "greedy", 10)
    assert toks == [4, 5]
    # per step the chosen logit is 10*tanh(3*tanh(5)), every other emittable logit is 0
    top = 10 * math.tanh(3 * math.tanh(5.0))
    step = top - math.log(math.exp(top) + 3)
    assert lp == pytest.approx(3 * step, abs=1e-6)


def test_teacher_forced_log_prob_matches_decode():
    p = decoder(seed=3)
    rng = np.random.default_rng(8)
    xhat, states = rng.normal(size=(1, CFG.transform_dim)), rng.normal(size=(1, 3, STATE))
    outs, lps = decode_batch(p, xhat, states, np.ones((1, 3)), "sample", 8, rng)
    tf = sequence_log_probs(p, xhat, states, np.ones((1, 3)), outs).data
    assert tf[0] == pytest.approx(lps[0], abs=1e-10)


def test_uniform_output_nll():
    p = decoder()
    p["dec.out.W"].data[...] = 0.0
    p["dec.out.b"].data[...] = 0.0
    # 6 ids, pad and bos blocked: 4 equally likely tokens; 2 target tokens + eos
    loss = refiner_nll(p, np.ones((1, CFG.transform_dim)), np.ones((1, 2, STATE)), np.ones((1, 2)), [[4, 5]])
    assert loss.item() == pytest.approx(3 * math.log(4), abs=1e-12)


def test_nll_positive_and_decreases_when_overfitting():
    p = decoder(seed=1)
    rng = np.random.default_rng(9)
    xhat, states = rng.normal(size=(1, CFG.transform_dim)), rng.normal(size=(1, 3, STATE))
    mask = np.ones((1, 3))
    losses = []
    for _ in range(50):
        p.zero_grad()
        loss = refiner_nll(p, xhat, states, mask, [[4, 5, 4]])
        loss.backward()
        adam_step(p, lr=0.05, names=p.names("dec."))
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]
    assert all(v > 0 for v in losses)


def test_nll_truncates_long_target_with_warning(caplog):
    p = decoder()
    with caplog.at_level(logging.WARNING):
        loss = refiner_nll(p, np.ones((1, CFG.transform_dim)), np.ones((1, 2, STATE)), np.ones((1, 2)),
                           [[4] * 30], max_len=25)
    assert "truncated" in caplog.text
    assert np.isfinite(loss.item())


def test_nll_empty_target_raises():
    with pytest.raises(ValueError):
        refiner_nll(decoder(), np.ones((1, CFG.transform_dim)), np.ones((1, 2, STATE)), np.ones((1, 2)), [[]])


def test_decoder_gradient_matches_fd():
    p = decoder(vocab=6, seed=2)
    rng = np.random.default_rng(10)
    xhat = rng.normal(size=(2, CFG.transform_dim))
    states = rng.normal(size=(2, 3, STATE))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    targets = [[4, 5], [5]]

    def f():
        with T.no_grad():
            return refiner_nll(p, xhat, states, mask, targets).item()

    p.zero_grad()
    refiner_nll(p, xhat, states, mask, targets).backward()
    names = p.names("dec.")
    fds = central_fd(f, [p[n].data for n in names])
    for n, g in zip(names, fds):
        assert rel_error(p[n].grad, g, floor=1e-7) < 1e-4, n


def test_strip_eos():
    assert strip_eos([4, 5, EOS_ID]) == [4, 5]
    assert strip_eos([4, 5]) == [4, 5]
