"""Prototype refinement and the attentional GRU decoder.

The refinement direction is the gradient of the extraction probability with
respect to the prototype vector, evaluated in closed form up to a positive
scale; the prototype takes one unit step along it. The decoder starts from a
linear map of the refined vector and attends over the prototype's token
states with a general (bilinear) score.
"""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .encoder import NEG_INF, _uniform
from .params import ParamStore

log = logging.getLogger(__name__)

STEP_EPS = 1e-8


def refine_direction(x, refs, kappa: float, ref_mask=None) -> np.ndarray:
    """z proportional to sum_i e^{kappa cos_i} [h_i/(|x||h_i|) - cos_i x/|x|^2].

    ``x`` is ``(T,)`` with ``refs (m, T)``, or batched ``(B, T)`` with
    ``refs (B, M, T)`` and an optional ``ref_mask (B, M)``.
    """
    x = np.asarray(x, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if x.ndim == 1:
        return refine_direction(x[None], refs[None], kappa,
                                None if ref_mask is None else np.asarray(ref_mask)[None])[0]
    nx = np.linalg.norm(x, axis=-1, keepdims=True)            # (B, 1)
    nh = np.linalg.norm(refs, axis=-1, keepdims=True)         # (B, M, 1)
    mask = np.ones(refs.shape[:2]) if ref_mask is None else np.asarray(ref_mask, dtype=np.float64)
    if np.any(nx == 0.0) or np.any((nh[..., 0] == 0.0) & (mask > 0)):
        raise ValueError("refine_direction: zero-norm vector, cosine undefined")
    nh = np.where(nh == 0.0, 1.0, nh)
    cos = np.einsum("bt,bmt->bm", x, refs) / (nx * nh[..., 0])
    logw = kappa * cos + (1.0 - mask) * NEG_INF
    w = np.exp(logw - logw.max(axis=-1, keepdims=True))      # positive rescaling of e^{kappa cos}
    bracket = refs / (nx[:, None, :] * nh) - cos[..., None] * x[:, None, :] / (nx[:, None, :] ** 2)
    return np.einsum("bm,bmt->bt", w, bracket)


def apply_refinement(x, z, eps: float = STEP_EPS) -> np.ndarray:
    """x + z/|z|, or x unchanged when |z| <= eps. Works row-wise on batches."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    nz = np.linalg.norm(z, axis=-1, keepdims=True)
    step = np.where(nz > eps, z / np.where(nz > eps, nz, 1.0), 0.0)
    return x + step


def init_decoder_params(store: ParamStore, vocab_size: int, cfg, state_dim: int,
                        rng: np.random.Generator, prefix: str = "dec.") -> None:
    Ed, Hd, Tdim = cfg.dec_emb_dim, cfg.dec_hidden, cfg.transform_dim
    emb = rng.normal(0.0, cfg.init_scale, size=(vocab_size, Ed))
    emb[PAD_ID] = 0.0
    store.add(prefix + "emb", emb)
    store.add(prefix + "init.W", _uniform(rng, (Tdim, Hd), Tdim))
    store.add(prefix + "init.b", np.zeros(Hd))
    store.add(prefix + "gru.W", _uniform(rng, (Ed, 3 * Hd), Hd))
    store.add(prefix + "gru.U", _uniform(rng, (Hd, 3 * Hd), Hd))
    store.add(prefix + "gru.bx", _uniform(rng, (3 * Hd,), Hd))
    store.add(prefix + "gru.bh", _uniform(rng, (3 * Hd,), Hd))
    store.add(prefix + "att.W", _uniform(rng, (Hd, state_dim), Hd))
    store.add(prefix + "comb.W", _uniform(rng, (state_dim + Hd, Hd), state_dim + Hd))
    store.add(prefix + "comb.b", np.zeros(Hd))
    store.add(prefix + "out.W", _uniform(rng, (Hd, vocab_size), Hd))
    store.add(prefix + "out.b", np.zeros(vocab_size))


def _blocked_tokens(vocab_size: int) -> np.ndarray:
    blocked = np.zeros(vocab_size)
    blocked[[PAD_ID, BOS_ID]] = NEG_INF
    return blocked


def _output_log_probs(params: ParamStore, hdec: T.Tensor, states: T.Tensor, src_mask: np.ndarray,
                      prefix: str = "dec."):
    """Attention + output layer for decoder states ``(B, Lt, Hd)`` -> log-probs ``(B, Lt, V)``."""
    query = hdec @ params[prefix + "att.W"]                      # (B, Lt, 2H)
    scores = query @ T.swapaxes(states, -1, -2)                  # (B, Lt, Ls)
    alpha = T.softmax(scores + ((1.0 - src_mask) * NEG_INF)[:, None, :], axis=-1)
    context = alpha @ states                                     # (B, Lt, 2H)
    comb = T.tanh(T.concat([context, hdec], axis=-1) @ params[prefix + "comb.W"]
                  + params[prefix + "comb.b"])
    Wo = params[prefix + "out.W"]
    logits = comb @ Wo + params[prefix + "out.b"] + _blocked_tokens(Wo.shape[1])
    return T.log_softmax(logits, axis=-1), alpha.data


def _initial_hidden(params: ParamStore, xhat: T.Tensor, prefix: str = "dec.") -> T.Tensor:
    return xhat @ params[prefix + "init.W"] + params[prefix + "init.b"]


def _run_gru(params: ParamStore, inputs: np.ndarray, h0: T.Tensor, mask=None, prefix: str = "dec."):
    x = params[prefix + "emb"][inputs]
    return T.gru(x, h0, params[prefix + "gru.W"], params[prefix + "gru.U"],
                 params[prefix + "gru.bx"], params[prefix + "gru.bh"], mask)


def sequence_log_probs(params: ParamStore, xhat, states, src_mask, outputs, prefix: str = "dec."):
    """Teacher-forced log P(outputs) per sequence, as a ``(B,)`` tensor.

    ``outputs[b]`` is the emitted id sequence, ending in EOS unless it was cut
    at the length limit. ``xhat (B, T)`` and ``states (B, Ls, 2H)`` may be
    constants (detached) or live graph nodes.
    """
    xhat, states = T.as_tensor(xhat), T.as_tensor(states)
    B = len(outputs)
    Lt = max(max(len(o) for o in outputs), 1)
    inp = np.full((B, Lt), PAD_ID, dtype=np.int64)
    tgt = np.full((B, Lt), PAD_ID, dtype=np.int64)
    tmask = np.zeros((B, Lt))
    for b, o in enumerate(outputs):
        seq = list(o)
        inp[b, :len(seq)] = [BOS_ID] + seq[:-1] if seq else []
        tgt[b, :len(seq)] = seq
        tmask[b, :len(seq)] = 1.0
    hdec = _run_gru(params, inp, _initial_hidden(params, xhat, prefix), tmask, prefix)
    logp, _ = _output_log_probs(params, hdec, states, np.asarray(src_mask, dtype=np.float64), prefix)
    picked = logp[np.arange(B)[:, None], np.arange(Lt)[None, :], tgt]   # (B, Lt)
    return T.sum(picked * tmask, axis=1)


def target_outputs(target, max_len: int) -> list:
    target = list(target)
    if len(target) > max_len:
        log.warning("target of length %d truncated to max_len=%d", len(target), max_len)
        target = target[:max_len]
    return target + [EOS_ID]


def refiner_nll(params: ParamStore, xhat, states, src_mask, targets, max_len: int = 25,
                prefix: str = "dec.") -> T.Tensor:
    """Mean over the batch of the summed token NLL of each target (+EOS)."""
    if any(len(t) == 0 for t in targets):
        raise ValueError("refiner_nll needs non-empty targets")
    outputs = [target_outputs(t, max_len) for t in targets]
    lp = sequence_log_probs(params, xhat, states, src_mask, outputs, prefix)
    return -T.mean(lp)


def decode_batch(params: ParamStore, xhat, states, src_mask, mode: str = "greedy",
                 max_len: int = 25, rng: np.random.Generator = None, prefix: str = "dec.",
                 return_attention: bool = False):
    """Greedy or ancestral decoding of a batch.

    Returns ``(outputs, log_probs)``: the emitted ids per row (ending in EOS
    when it was produced within ``max_len`` steps) and their summed log-prob.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs a random generator")
    with T.no_grad():
        xhat, states = T.as_tensor(np.asarray(T.as_tensor(xhat).data)), T.as_tensor(states)
        src_mask = np.asarray(src_mask, dtype=np.float64)
        B = xhat.shape[0]
        h = _initial_hidden(params, xhat, prefix)
        prev = np.full((B, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outputs = [[] for _ in range(B)]
        total = np.zeros(B)
        attn = []
        for _ in range(max_len):
            hs = _run_gru(params, prev, h, None, prefix)             # (B, 1, Hd)
            logp, alpha = _output_log_probs(params, hs, states, src_mask, prefix)
            lp = logp.data[:, 0]
            attn.append(alpha[:, 0])
            if mode == "greedy":
                tok = lp.argmax(axis=-1)
            else:
                p = np.exp(lp)
                cdf = np.cumsum(p, axis=-1)
                u = rng.random(B) * cdf[:, -1]
                tok = np.minimum((cdf <= u[:, None]).sum(axis=-1), lp.shape[-1] - 1)
            for b in np.flatnonzero(~done):
                outputs[b].append(int(tok[b]))
                total[b] += lp[b, tok[b]]
            done |= tok == EOS_ID
            if done.all():
                break
            h = T.Tensor(hs.data[:, 0])
            prev = tok[:, None].astype(np.int64)
    if return_attention:
        return outputs, total, attn
    return outputs, total


def strip_eos(ids) -> list:
    ids = list(ids)
    return ids[:-1] if ids and ids[-1] == EOS_ID else ids


def decode(xhat, prototype_states, params: ParamStore, mode: str = "greedy", max_len: int = 25,
           rng: np.random.Generator = None, prefix: str = "dec."):
    """Decode one refined vector; returns ``(tokens without EOS, total log-prob)``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    states = np.asarray(T.as_tensor(prototype_states).data)[None]
    mask = np.ones(states.shape[:2])
    outs, lps = decode_batch(params, np.asarray(T.as_tensor(xhat).data)[None], states, mask,
                             mode, max_len, rng, prefix)
    return strip_eos(outs[0]), float(lps[0])
