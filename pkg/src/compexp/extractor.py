"""Prototype extraction with a multi-centroid von Mises-Fisher mixture.

Each transformed reference h_i is a vMF centre; a candidate's unnormalised
score is the sum of exp(kappa * cos(x_j, h_i)) over references, kept in log
space. The vMF normaliser depends only on kappa and cancels when the scores are
normalised over the candidate pool, so it is never computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import NEG_INF


@dataclass
class ExtractionContext:
    candidates: T.Tensor  # (n, T) candidate sentence vectors
    references: T.Tensor  # (m, T) transformed references h_i
    kappa: float = 3.0

    def __post_init__(self):
        if self.candidates.ndim != 2 or self.references.ndim != 2:
            raise ValueError("candidates and references must be 2-d")
        if self.candidates.shape[0] < 1 or self.references.shape[0] < 1:
            raise ValueError("need at least one candidate and one reference")
        if self.kappa < 0:
            raise ValueError(f"kappa must be non-negative, got {self.kappa}")


@dataclass
class ExtractionResult:
    probabilities: np.ndarray
    index: int
    log_prob: float


def extraction_logits(ctx: ExtractionContext) -> T.Tensor:
    """logit_j = log sum_i exp(kappa * cos(x_j, h_i))."""
    cos = T.cosine_similarity(ctx.candidates, ctx.references)
    return T.logsumexp(cos * ctx.kappa, axis=-1)


def extraction_log_probs(ctx: ExtractionContext) -> T.Tensor:
    return T.log_softmax(extraction_logits(ctx), axis=-1)


def extraction_distribution(ctx: ExtractionContext) -> T.Tensor:
    return T.softmax(extraction_logits(ctx), axis=-1)


def batched_extraction_log_probs(candidates: T.Tensor, cand_mask: np.ndarray,
                                 references: T.Tensor, ref_mask: np.ndarray,
                                 kappa: float) -> T.Tensor:
    """Padded version: ``candidates (B, N, T)``, ``references (B, M, T)`` -> ``(B, N)``.

    Padded candidate slots get log-probability ~ -1e30; padded references are
    left out of the mixture.
    """
    cos = T.cosine_similarity(candidates, references)  # (B, N, M)
    scores = cos * kappa + ((1.0 - ref_mask) * NEG_INF)[:, None, :]
    logits = T.logsumexp(scores, axis=-1) + (1.0 - cand_mask) * NEG_INF
    return T.log_softmax(logits, axis=-1)


def sample_prototype(probs, mode: str = "argmax", rng: np.random.Generator = None):
    """Pick a candidate index; argmax breaks ties by lowest index."""
    p = np.asarray(probs, dtype=np.float64)
    if mode == "argmax":
        idx = int(np.argmax(p))
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        cdf = np.cumsum(p)
        idx = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return idx, float(np.log(p[idx]))


def extract(ctx: ExtractionContext, mode: str = "argmax", rng=None) -> ExtractionResult:
    with T.no_grad():
        probs = extraction_distribution(ctx).data
    idx, lp = sample_prototype(probs, mode, rng)
    return ExtractionResult(probs, idx, lp)


def extractor_nll(ctx: ExtractionContext, target_index: int) -> T.Tensor:
    n = ctx.candidates.shape[0]
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} not in candidate pool of size {n}")
    return -extraction_log_probs(ctx)[target_index]
