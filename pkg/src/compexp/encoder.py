"""Shared sentence encoder, rating-difference embedding and reference transform.

A sentence goes through word embeddings, a bidirectional GRU and additive
self-attention pooling (score = v . tanh(W s + b)). The pooled 2H vector is
projected linearly into the T-dimensional space where extraction cosines are
taken.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import PAD_ID
from .params import ParamStore

log = logging.getLogger(__name__)

NEG_INF = -1e30


@dataclass
class SentenceEncoding:
    vector: T.Tensor   # (T,) projection used by the extractor
    pooled: T.Tensor   # (2H,) attention-weighted sum of token states
    states: T.Tensor   # (L, 2H)
    attention: np.ndarray


@dataclass
class BatchEncoding:
    vectors: T.Tensor  # (B, T)
    pooled: T.Tensor   # (B, 2H)
    states: T.Tensor   # (B, L, 2H)
    mask: np.ndarray   # (B, L)
    attention: np.ndarray


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(store: ParamStore, vocab_size: int, cfg, max_rating_diff: int,
                        rng: np.random.Generator, prefix: str = "enc.") -> None:
    E, H, A, Tdim, Dr = cfg.emb_dim, cfg.hidden, cfg.att_dim, cfg.transform_dim, cfg.rating_dim
    emb = rng.normal(0.0, cfg.init_scale, size=(vocab_size, E))
    emb[PAD_ID] = 0.0
    store.add(prefix + "emb", emb)
    for d in ("fwd", "bwd"):
        store.add(f"{prefix}gru_{d}.W", _uniform(rng, (E, 3 * H), H))
        store.add(f"{prefix}gru_{d}.U", _uniform(rng, (H, 3 * H), H))
        store.add(f"{prefix}gru_{d}.bx", _uniform(rng, (3 * H,), H))
        store.add(f"{prefix}gru_{d}.bh", _uniform(rng, (3 * H,), H))
    store.add(prefix + "att.W", _uniform(rng, (2 * H, A), 2 * H))
    store.add(prefix + "att.b", np.zeros(A))
    store.add(prefix + "att.v", _uniform(rng, (A,), A))
    store.add(prefix + "proj.W", _uniform(rng, (2 * H, Tdim), 2 * H))
    store.add(prefix + "proj.b", np.zeros(Tdim))
    store.add(prefix + "rating", rng.normal(0.0, 1.0, size=(2 * max_rating_diff + 1, Dr)))
    store.add(prefix + "mlp1.W", _uniform(rng, (Tdim + Dr, Tdim), Tdim + Dr))
    store.add(prefix + "mlp1.b", np.zeros(Tdim))
    store.add(prefix + "mlp2.W", _uniform(rng, (Tdim, Tdim), Tdim))
    store.add(prefix + "mlp2.b", np.zeros(Tdim))


def load_embedding_file(path, vocab, table: np.ndarray) -> int:
    """Overwrite rows of ``table`` from a ``token v1 ... vE`` text file; returns rows found."""
    found = 0
    dim = table.shape[1]
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                log.warning("%s:%d: expected %d values, skipped", path, lineno, dim)
                continue
            idx = vocab.stoi.get(parts[0])
            if idx is None or idx == PAD_ID:
                continue
            table[idx] = np.array(parts[1:], dtype=np.float64)
            found += 1
    return found


def pad_tokens(sentences) -> tuple:
    """Right-pad id sequences into ``(ids (B, L), mask (B, L))``."""
    if any(len(s) == 0 for s in sentences):
        raise ValueError("cannot encode an empty token sequence")
    L = max(len(s) for s in sentences)
    ids = np.full((len(sentences), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sentences), L))
    for i, s in enumerate(sentences):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def encode_batch(params: ParamStore, sentences, prefix: str = "enc.") -> BatchEncoding:
    ids, mask = pad_tokens(sentences)
    B = ids.shape[0]
    H = params[prefix + "gru_fwd.U"].shape[0]
    x = params[prefix + "emb"][ids]
    h0 = T.Tensor(np.zeros((B, H)))
    states = []
    for d, rev in (("fwd", False), ("bwd", True)):
        p = f"{prefix}gru_{d}."
        states.append(T.gru(x, h0, params[p + "W"], params[p + "U"], params[p + "bx"],
                            params[p + "bh"], mask, reverse=rev))
    S = T.concat(states, axis=-1)
    u = T.tanh(S @ params[prefix + "att.W"] + params[prefix + "att.b"])
    scores = u @ params[prefix + "att.v"] + (1.0 - mask) * NEG_INF
    alpha = T.softmax(scores, axis=-1)
    pooled = T.sum(S * T.reshape(alpha, (B, -1, 1)), axis=1)
    vectors = pooled @ params[prefix + "proj.W"] + params[prefix + "proj.b"]
    return BatchEncoding(vectors, pooled, S, mask, alpha.data)


def encode_sentence(tokens, params: ParamStore, prefix: str = "enc.") -> SentenceEncoding:
    enc = encode_batch(params, [tuple(tokens)], prefix)
    return SentenceEncoding(enc.vectors[0], enc.pooled[0], enc.states[0], enc.attention[0])


def rating_rows(delta_r, max_diff: int) -> np.ndarray:
    d = np.asarray(delta_r, dtype=np.int64)
    if np.any(np.abs(d) > max_diff):
        raise ValueError(f"rating difference outside [-{max_diff}, {max_diff}]: {delta_r}")
    return d + max_diff


def encode_rating_diff(delta_r, params: ParamStore, max_diff: int, prefix: str = "enc.") -> T.Tensor:
    """Embedding row ``delta_r + max_diff``; works elementwise on integer arrays."""
    return params[prefix + "rating"][rating_rows(delta_r, max_diff)]


def transform_reference(ref: T.Tensor, diff: T.Tensor, params: ParamStore,
                        prefix: str = "enc.") -> T.Tensor:
    """h = W2 tanh(W1 [ref; diff] + b1) + b2 over the last axis."""
    W1 = params[prefix + "mlp1.W"]
    if ref.shape[-1] + diff.shape[-1] != W1.shape[0]:
        raise ValueError(f"transform_reference: input dims {ref.shape} + {diff.shape} "
                         f"do not match weight {W1.shape}")
    hidden = T.tanh(T.concat([ref, diff], axis=-1) @ W1 + params[prefix + "mlp1.b"])
    return hidden @ params[prefix + "mlp2.W"] + params[prefix + "mlp2.b"]
