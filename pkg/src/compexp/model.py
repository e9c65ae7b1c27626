"""The assembled extract-and-refine explainer and its per-instance inputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .corpus import Corpus, LabeledSentence, Vocab
from .encoder import encode_batch, encode_rating_diff, init_encoder_params, load_embedding_file, \
    transform_reference
from .extractor import batched_extraction_log_probs, sample_prototype
from .params import ParamStore
from .refiner import apply_refinement, decode_batch, init_decoder_params, refine_direction, \
    sequence_log_probs, strip_eos


class EmptyPoolError(ValueError):
    pass


@dataclass
class Instance:
    """One (user, item, rating) explanation problem.

    ``references`` are (sentence, rating) pairs from the user profile;
    ``candidates`` come from the item profile and carry no ratings into the
    model; ``targets`` are the ground-truth sentences used only for scoring.
    """

    user_id: str
    item_id: str
    rating: int
    references: list
    candidates: list
    targets: list = field(default_factory=list)
    target_index: Optional[int] = None
    record: int = -1


def sentence_instance(corpus: Corpus, sentence: LabeledSentence, max_profile: int,
                      rng: np.random.Generator) -> Instance:
    """Extractor pretraining: the observed sentence is the target inside its item pool."""
    item = corpus.profiles.items.get(sentence.item_id)
    if item is None:
        cands = [sentence]
    else:
        cands = item.view(max_profile, rng, must_include=sentence)
    refs = corpus.user_references(sentence.user_id, max_profile, rng, exclude_record=sentence.record)
    idx = next(i for i, c in enumerate(cands) if c is sentence)
    return Instance(sentence.user_id, sentence.item_id, sentence.rating, refs, cands, [sentence], idx,
                    sentence.record)


def review_instance(corpus: Corpus, record: int, max_profile: int, rng: np.random.Generator,
                    rating: Optional[int] = None) -> Instance:
    """Generation/evaluation: pool excludes every sentence written by the target user."""
    rec = corpus.records[record]
    return request_instance(corpus, rec.user_id, rec.item_id, rec.rating if rating is None else rating,
                            max_profile, rng, exclude_record=record,
                            targets=corpus.record_sentences(record))


def request_instance(corpus: Corpus, user_id: str, item_id: str, rating: int, max_profile: int,
                     rng: np.random.Generator, exclude_record: int = -2, targets=()) -> Instance:
    lo, hi = corpus.rating_range
    if not lo <= rating <= hi:
        raise ValueError(f"rating {rating} outside range {lo}-{hi}")
    item = corpus.profiles.items.get(item_id)
    cands = item.view(max_profile, rng, exclude_user=user_id) if item is not None else []
    if not cands:
        raise EmptyPoolError(f"no extraction candidates for item {item_id!r} and user {user_id!r}")
    refs = corpus.user_references(user_id, max_profile, rng, exclude_record=exclude_record)
    return Instance(user_id, item_id, rating, refs, cands, list(targets), None, exclude_record)


@dataclass
class ExtractionPass:
    log_probs: T.Tensor        # (B, N)
    cand_mask: np.ndarray      # (B, N)
    cand_vectors: T.Tensor     # (B, N, T)
    refs: T.Tensor             # (B, M, T) transformed references
    ref_mask: np.ndarray       # (B, M)
    cand_rows: np.ndarray      # (B, N) row into the unique-sentence encoding
    encoding: object


@dataclass
class Generation:
    prototype_index: int
    prototype: LabeledSentence
    explanation: list          # token ids, EOS stripped
    emitted: list              # ids as emitted (ending in EOS when produced)
    ext_log_prob: float
    ref_log_prob: float


class CompExp:
    def __init__(self, params: ParamStore, cfg: ModelConfig, vocab: Vocab, max_rating_diff: int):
        self.params = params
        self.cfg = cfg
        self.vocab = vocab
        self.max_rating_diff = max_rating_diff

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocab, max_rating_diff: int, seed: int = 0) -> "CompExp":
        rng = np.random.default_rng(seed)
        params = ParamStore()
        init_encoder_params(params, len(vocab), cfg, max_rating_diff, rng)
        init_decoder_params(params, len(vocab), cfg, 2 * cfg.hidden, rng)
        if cfg.embedding_file:
            load_embedding_file(cfg.embedding_file, vocab, params["enc.emb"].data)
        return cls(params, cfg, vocab, max_rating_diff)

    # extraction ------------------------------------------------------------

    def extraction_pass(self, instances) -> ExtractionPass:
        rows, unique = {}, []

        def row(s):
            key = s.ids
            if key not in rows:
                rows[key] = len(unique)
                unique.append(key)
            return rows[key]

        B = len(instances)
        N = max(len(i.candidates) for i in instances)
        M = max(len(i.references) for i in instances)
        cand_rows = np.zeros((B, N), dtype=np.int64)
        ref_rows = np.zeros((B, M), dtype=np.int64)
        cand_mask = np.zeros((B, N))
        ref_mask = np.zeros((B, M))
        deltas = np.zeros((B, M), dtype=np.int64)
        for b, inst in enumerate(instances):
            if not inst.references:
                raise ValueError(f"instance for user {inst.user_id!r} has no references")
            for j, c in enumerate(inst.candidates):
                cand_rows[b, j] = row(c)
                cand_mask[b, j] = 1.0
            for i, (s, r) in enumerate(inst.references):
                ref_rows[b, i] = row(s)
                ref_mask[b, i] = 1.0
                deltas[b, i] = inst.rating - r
        enc = encode_batch(self.params, unique)
        C = enc.vectors[cand_rows]
        R = enc.vectors[ref_rows]
        H = transform_reference(R, encode_rating_diff(deltas, self.params, self.max_rating_diff),
                                self.params)
        logp = batched_extraction_log_probs(C, cand_mask, H, ref_mask, self.cfg.kappa)
        return ExtractionPass(logp, cand_mask, C, H, ref_mask, cand_rows, enc)

    # refinement ------------------------------------------------------------

    def refine(self, x: np.ndarray, refs: np.ndarray, ref_mask: np.ndarray) -> np.ndarray:
        for _ in range(self.cfg.refine_steps):
            x = apply_refinement(x, refine_direction(x, refs, self.cfg.kappa, ref_mask))
        return x

    def refined_inputs(self, ep: ExtractionPass, batch_rows, choices):
        """Refined vectors and prototype token states for (instance row, candidate) picks."""
        batch_rows = np.asarray(batch_rows, dtype=np.int64)
        choices = np.asarray(choices, dtype=np.int64)
        x = ep.cand_vectors.data[batch_rows, choices]
        xhat = self.refine(x, ep.refs.data[batch_rows], ep.ref_mask[batch_rows])
        urow = ep.cand_rows[batch_rows, choices]
        states = ep.encoding.states.data[urow]
        mask = ep.encoding.mask[urow]
        return xhat, states, mask

    # generation ------------------------------------------------------------

    def generate(self, instances, extract_mode: str = "argmax", decode_mode: str = "greedy",
                 rng: Optional[np.random.Generator] = None, samples: int = 1):
        """Returns ``(generations[b][k], ExtractionPass)`` for ``samples`` draws per instance."""
        with T.no_grad():
            ep = self.extraction_pass(instances)
        probs = np.exp(ep.log_probs.data) * ep.cand_mask
        rows, picks = [], []
        for b in range(len(instances)):
            for _ in range(samples):
                j, _ = sample_prototype(probs[b, :len(instances[b].candidates)], extract_mode, rng)
                rows.append(b)
                picks.append(j)
        xhat, states, mask = self.refined_inputs(ep, rows, picks)
        outs, ref_lp = decode_batch(self.params, xhat, states, mask, decode_mode, self.cfg.max_len, rng)
        gens = [[] for _ in instances]
        for n, (b, j) in enumerate(zip(rows, picks)):
            gens[b].append(Generation(j, instances[b].candidates[j], strip_eos(outs[n]), outs[n],
                                      float(ep.log_probs.data[b, j]), float(ref_lp[n])))
        return gens, ep

    def words(self, ids) -> list:
        return list(self.vocab.decode(ids))

    def sequence_log_probs(self, xhat, states, mask, outputs) -> T.Tensor:
        return sequence_log_probs(self.params, xhat, states, mask, outputs)
