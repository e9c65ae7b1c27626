"""Evaluation, ranked-list generation and the rating-perturbation sweep."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .corpus import Corpus, CorpusError, parse_reviews
from .metrics import EVAL_WEIGHTS, bleu, idf_bleu, load_lexicon, mean_ref_length, \
    score_human, score_instances
from .model import CompExp, EmptyPoolError, request_instance
from .training import make_refiner_pairs, pretrain_extractor, pretrain_refiner, review_instances, \
    sentence_vectors, validation_refiner_pairs

log = logging.getLogger(__name__)

EVAL_STREAM, NOISE_STREAM, REQUEST_STREAM = 11, 13, 17


def load_corpus_from_config(cfg: ExperimentConfig) -> Corpus:
    path = Path(cfg.data.reviews)
    if not path.is_file():
        raise FileNotFoundError(f"reviews file not found: {path}")
    rating_range = (cfg.data.rating_min, cfg.data.rating_max)
    with path.open(encoding="utf-8") as fh:
        records, errors = parse_reviews(fh, rating_range)
    for e in errors:
        log.warning("%s:%d: %s", path, e.line, e.message)
    return Corpus.build(records, rating_range=rating_range, min_user=cfg.data.min_user,
                        min_item=cfg.data.min_item, ratios=cfg.data.ratios, seed=cfg.seed,
                        min_freq=cfg.data.min_freq, max_sentence_len=cfg.data.max_sentence_len)


def format_summary(summary: dict) -> str:
    rows = [("# users", summary["users"]), ("# items", summary["items"]),
            ("# reviews", summary["reviews"]), ("# sentences", summary["sentences"]),
            ("vocabulary", summary["vocab"]), ("rating range", summary["rating_range"])]
    rows += [(f"{k} records", v) for k, v in summary["split_records"].items()]
    w = max(len(k) for k, _ in rows)
    return "".join(f"{k.ljust(w)}  {v}\n" for k, v in rows)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def corpus_ref_length(corpus: Corpus) -> float:
    words = [list(s.words) for s in corpus.split_sentences("train")]
    return mean_ref_length(words)


def evaluation_instances(corpus: Corpus, split: str, max_profile: int, seed: int) -> list:
    if not corpus.split_records(split):
        raise CorpusError(f"split {split!r} is empty")
    insts = review_instances(corpus, split, max_profile, [seed, EVAL_STREAM])
    if not insts:
        raise CorpusError(f"split {split!r} has no instance with a non-empty candidate pool")
    return insts


def generate_outputs(model: CompExp, instances, batch_size: int = 64) -> list:
    """Argmax extraction + greedy decoding; one Generation per instance."""
    out = []
    for s in range(0, len(instances), batch_size):
        gens, _ = model.generate(instances[s:s + batch_size])
        out.extend(g[0] for g in gens)
    return out


def evaluate_instances(model: CompExp, corpus: Corpus, instances, name: str = "CompExp",
                       lexicon=None, ref_length_mode: str = "instance") -> list:
    if ref_length_mode not in ("instance", "corpus"):
        raise ValueError(f"unknown ref_length_mode {ref_length_mode!r}")
    gens = generate_outputs(model, instances)
    outputs = [model.words(g.explanation) for g in gens]
    refs = [[list(t.words) for t in inst.targets] for inst in instances]
    ref_len = corpus_ref_length(corpus) if ref_length_mode == "corpus" else None
    return [score_instances(name, outputs, refs, corpus.idf, lexicon, ref_len),
            score_human(refs, corpus.idf)]


def evaluate_split(model: CompExp, corpus: Corpus, cfg: ExperimentConfig, split: str = "test") -> list:
    lexicon = load_lexicon(cfg.data.lexicon) if cfg.data.lexicon else None
    insts = evaluation_instances(corpus, split, cfg.train.max_profile, cfg.seed)
    return evaluate_instances(model, corpus, insts, lexicon=lexicon,
                              ref_length_mode=cfg.eval.ref_length_mode)


# ---------------------------------------------------------------------------
# ranked requests
# ---------------------------------------------------------------------------


@dataclass
class RankedRequest:
    user_id: str
    items: list  # [(item_id, rating)] in rank order

    def validate(self, rating_range) -> None:
        lo, hi = rating_range
        seen = set()
        for item_id, rating in self.items:
            if item_id in seen:
                raise ValueError(f"item {item_id!r} listed twice in request for {self.user_id!r}")
            seen.add(item_id)
            if not lo <= rating <= hi:
                raise ValueError(f"rating {rating} for item {item_id!r} outside range {lo}-{hi}")


def parse_requests(stream) -> list:
    """One JSON object per line: {"user_id": ..., "items": [[item_id, rating], ...]}."""
    reqs = []
    for n, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            reqs.append(RankedRequest(str(obj["user_id"]),
                                      [(str(i), int(r)) for i, r in obj["items"]]))
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"request line {n}: {e}") from e
    return reqs


def generate_for_request(model: CompExp, corpus: Corpus, request: RankedRequest, max_profile: int,
                         seed: int) -> list:
    """One output record per requested item, in rank order; failures become error entries."""
    request.validate(corpus.rating_range)
    records = []
    for rank, (item_id, rating) in enumerate(request.items):
        rng = np.random.default_rng([seed, REQUEST_STREAM, rank])
        base = {"user_id": request.user_id, "item_id": item_id, "rating": rating}
        try:
            inst = request_instance(corpus, request.user_id, item_id, rating, max_profile, rng)
        except EmptyPoolError as e:
            records.append({**base, "error": str(e)})
            continue
        g = generate_outputs(model, [inst])[0]
        records.append({**base, "prototype": " ".join(g.prototype.words),
                        "explanation": " ".join(model.words(g.explanation))})
    return records


# ---------------------------------------------------------------------------
# rating perturbation
# ---------------------------------------------------------------------------


def perturb_ratings(ratings, sigma: float, rating_range, rng: np.random.Generator) -> np.ndarray:
    """r + sigma*N(0,1), rounded to the nearest integer and clamped to the range."""
    ratings = np.asarray(ratings, dtype=np.float64)
    noisy = np.rint(ratings + sigma * rng.standard_normal(ratings.shape))
    return np.clip(noisy, rating_range[0], rating_range[1]).astype(np.int64)


@dataclass
class PerturbPoint:
    sigma: float
    seed: int
    bleu_1: float
    idf_bleu_1: float


def perturbation_curve(model: CompExp, corpus: Corpus, instances, sigmas, seeds: int, seed: int,
                       ref_len: Optional[float] = None) -> list:
    """Regenerate and re-score with noisy input ratings for every (sigma, noise seed)."""
    refs = [[list(t.words) for t in inst.targets] for inst in instances]
    ratings = [inst.rating for inst in instances]
    points = []
    for sigma in sigmas:
        for k in range(seeds):
            rng = np.random.default_rng([seed, NOISE_STREAM, k])
            noisy = perturb_ratings(ratings, sigma, corpus.rating_range, rng)
            insts = [dataclasses.replace(inst, rating=int(r)) for inst, r in zip(instances, noisy)]
            outs = [model.words(g.explanation) for g in generate_outputs(model, insts)]
            b = [bleu(o, r, EVAL_WEIGHTS[1]) for o, r in zip(outs, refs)]
            ib = [idf_bleu(o, r, corpus.idf, EVAL_WEIGHTS[1], ref_len) for o, r in zip(outs, refs)]
            # plain sum/len, as in score_instances, so sigma=0 reproduces evaluate exactly
            points.append(PerturbPoint(float(sigma), k, sum(b) / len(b), sum(ib) / len(ib)))
    return points


def curve_means(points) -> list:
    """[(sigma, mean bleu_1, mean idf_bleu_1)] in input sigma order."""
    sigmas = list(dict.fromkeys(p.sigma for p in points))
    out = []
    for s in sigmas:
        ps = [p for p in points if p.sigma == s]
        out.append((s, float(np.mean([p.bleu_1 for p in ps])), float(np.mean([p.idf_bleu_1 for p in ps]))))
    return out


def format_curve(points) -> str:
    lines = ["sigma\tseed\tbleu_1\tidf_bleu_1"]
    lines += [f"{p.sigma!r}\t{p.seed}\t{p.bleu_1!r}\t{p.idf_bleu_1!r}" for p in points]
    lines += [f"{s!r}\tmean\t{b!r}\t{ib!r}" for s, b, ib in curve_means(points)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# whole-run helpers
# ---------------------------------------------------------------------------


def pretrain_model(corpus: Corpus, cfg: ExperimentConfig, log_rows=None) -> CompExp:
    """Fresh model, extractor pretraining, nearest-neighbour pairs, refiner pretraining."""
    model = CompExp.create(cfg.model, corpus.vocab, corpus.max_rating_diff, cfg.seed)
    pretrain_extractor(model, corpus, cfg.train, log_rows)
    pairs = make_refiner_pairs(corpus.profiles.items, lambda s: sentence_vectors(model, s))
    pretrain_refiner(model, corpus, pairs, cfg.train, validation_refiner_pairs(model, corpus), log_rows)
    return model


def split_idf_bleu_1(model: CompExp, corpus: Corpus, split: str, max_profile: int, seed: int) -> float:
    insts = evaluation_instances(corpus, split, max_profile, seed)
    return evaluate_instances(model, corpus, insts)[0].values["idf_bleu_1"]
