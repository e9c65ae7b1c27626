"""Pretraining of extractor and refiner, then policy-gradient fine-tuning.

Fine-tuning uses the two-term estimator

    [l1*pi + l2*pi_ref - b_ref] grad log P_ref + [l3*pi + l4*pi_ext - b_ext] grad log P_ext

with b_* the mean of the bracketed reward over the Monte Carlo samples drawn
for the same instance. With ``detach_refinement`` the refined vector and
prototype states enter the decoder as constants, so the first term only
reaches decoder parameters and the second only extractor parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .corpus import Corpus, CorpusError
from .metrics import EVAL_WEIGHTS, clipped_recall, idf_bleu
from .encoder import encode_batch
from .extractor import sample_prototype
from .model import CompExp, EmptyPoolError, Generation, Instance, review_instance, sentence_instance
from .params import adam_step, clip_grad_norm
from .refiner import decode_batch, refiner_nll, strip_eos, target_outputs

log = logging.getLogger(__name__)

ENC, DEC = "enc.", "dec."


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class RewardBundle:
    pi: float
    pi_ext: float
    pi_ref: float


def compute_rewards(explanation, prototype, references, idf, weights) -> RewardBundle:
    return RewardBundle(idf_bleu(explanation, references, idf, weights),
                        idf_bleu(prototype, references, idf, weights),
                        clipped_recall(explanation, prototype, references, idf, weights))


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDivergence(f"{what} is not finite ({value}); aborting")


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _update(model: CompExp, loss: T.Tensor, cfg: TrainConfig, lr: float, prefix: str = "") -> float:
    names = model.params.names(prefix)
    model.params.zero_grad()
    loss.backward()
    norm = clip_grad_norm(model.params, cfg.grad_clip, names)
    _check_finite(norm, "gradient norm")
    adam_step(model.params, lr=lr, names=names)
    return norm


# ---------------------------------------------------------------------------
# extractor
# ---------------------------------------------------------------------------


def extractor_batch_nll(model: CompExp, instances) -> T.Tensor:
    ep = model.extraction_pass(instances)
    idx = np.array([inst.target_index for inst in instances])
    return -T.mean(ep.log_probs[np.arange(len(instances)), idx])


def extractor_validation(model: CompExp, instances, batch_size: int = 64) -> tuple:
    """(mean NLL, mean uniform baseline log n) over fixed validation instances."""
    nll, uniform = [], []
    with T.no_grad():
        for s in range(0, len(instances), batch_size):
            chunk = instances[s:s + batch_size]
            ep = model.extraction_pass(chunk)
            for b, inst in enumerate(chunk):
                nll.append(-ep.log_probs.data[b, inst.target_index])
                uniform.append(math.log(len(inst.candidates)))
    return float(np.mean(nll)), float(np.mean(uniform))


def pretrain_extractor(model: CompExp, corpus: Corpus, cfg: TrainConfig, log_rows=None) -> list:
    """Maximise the likelihood of each observed training sentence within its item pool."""
    train = corpus.split_sentences("train")
    if not train:
        raise CorpusError("empty training split")
    rng = np.random.default_rng([cfg.seed, 1])
    val_rng = np.random.default_rng([cfg.seed, 2])
    val = [sentence_instance(corpus, s, cfg.max_profile, val_rng) for s in corpus.split_sentences("valid")]
    history, best, best_nll, stale = [], None, math.inf, 0
    for epoch in range(1, cfg.ext_epochs + 1):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            insts = [sentence_instance(corpus, train[i], cfg.max_profile, rng) for i in idx]
            loss = extractor_batch_nll(model, insts)
            _check_finite(loss.item(), "extractor loss")
            _update(model, loss, cfg, cfg.ext_lr, ENC)
            losses.append(loss.item())
        row = {"stage": "extractor", "epoch": epoch, "train_nll": float(np.mean(losses))}
        if val:
            row["valid_nll"], row["valid_uniform"] = extractor_validation(model, val)
        history.append(row)
        log.info("extractor epoch %d %s", epoch, row)
        if log_rows is not None:
            log_rows.append(row)
        if not val:
            continue
        if row["valid_nll"] < best_nll - 1e-9:
            best_nll, stale = row["valid_nll"], 0
            best = {n: model.params[n].data.copy() for n in model.params.names(ENC)}
        else:
            stale += 1
            if stale >= cfg.ext_patience:
                break
    if best is not None:
        for n, v in best.items():
            model.params[n].data[...] = v
    model.params.reset_optimizer()
    return history


# ---------------------------------------------------------------------------
# refiner
# ---------------------------------------------------------------------------


def sentence_vectors(model: CompExp, sentences) -> np.ndarray:
    with T.no_grad():
        return encode_batch(model.params, [s.ids for s in sentences]).vectors.data


def make_refiner_pairs(item_profiles: dict, encode: Callable) -> list:
    """Pair every sentence (target) with its cosine-nearest neighbour in the same item profile."""
    pairs = []
    for item_id in sorted(item_profiles):
        entries = item_profiles[item_id].entries if hasattr(item_profiles[item_id], "entries") \
            else item_profiles[item_id]
        if len(entries) < 2:
            continue
        v = np.asarray(encode(entries), dtype=np.float64)
        u = v / np.linalg.norm(v, axis=1, keepdims=True)
        cos = u @ u.T
        np.fill_diagonal(cos, -np.inf)
        for i, j in enumerate(np.argmax(cos, axis=1)):
            pairs.append((entries[int(j)], entries[i]))
    return pairs


def validation_refiner_pairs(model: CompExp, corpus: Corpus) -> list:
    """Held-out pairs: each validation sentence with its nearest training sentence of the same item."""
    val = [s for s in corpus.split_sentences("valid") if s.item_id in corpus.profiles.items]
    pairs = []
    for s in val:
        pool = corpus.profiles.items[s.item_id].entries
        v = sentence_vectors(model, [s] + pool)
        u = v / np.linalg.norm(v, axis=1, keepdims=True)
        pairs.append((pool[int(np.argmax(u[1:] @ u[0]))], s))
    return pairs


def refiner_inputs(model: CompExp, corpus: Corpus, pairs, cfg: TrainConfig, rng: np.random.Generator):
    """Refined source vectors conditioned on each target's author and rating (encoder frozen)."""
    insts = [Instance(t.user_id, t.item_id, t.rating,
                      corpus.user_references(t.user_id, cfg.max_profile, rng, exclude_record=t.record),
                      [src], [t], 0, t.record) for src, t in pairs]
    with T.no_grad():
        ep = model.extraction_pass(insts)
    rows = np.arange(len(insts))
    return model.refined_inputs(ep, rows, np.zeros(len(insts), dtype=np.int64))


def refiner_batch_nll(model: CompExp, corpus: Corpus, pairs, cfg: TrainConfig, rng) -> T.Tensor:
    xhat, states, mask = refiner_inputs(model, corpus, pairs, cfg, rng)
    return refiner_nll(model.params, xhat, states, mask, [t.ids for _, t in pairs], model.cfg.max_len)


def refiner_perplexity(model: CompExp, corpus: Corpus, pairs, cfg: TrainConfig, seed) -> float:
    rng = np.random.default_rng(seed)
    total, tokens = 0.0, 0
    with T.no_grad():
        for s in range(0, len(pairs), 64):
            chunk = pairs[s:s + 64]
            nll = refiner_batch_nll(model, corpus, chunk, cfg, rng).item()
            total += nll * len(chunk)
            tokens += sum(len(target_outputs(t.ids, model.cfg.max_len)) for _, t in chunk)
    return math.exp(total / tokens)


def pretrain_refiner(model: CompExp, corpus: Corpus, pairs, cfg: TrainConfig, val_pairs=None,
                     log_rows=None, epochs: Optional[int] = None) -> list:
    """Teacher-forced NLL on (source, target) pairs; only decoder parameters move."""
    if not pairs:
        raise ValueError("no refiner training pairs")
    rng = np.random.default_rng([cfg.seed, 3])
    history, best, best_ppl, stale = [], None, math.inf, 0
    for epoch in range(1, (cfg.ref_epochs if epochs is None else epochs) + 1):
        losses = []
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            loss = refiner_batch_nll(model, corpus, [pairs[i] for i in idx], cfg, rng)
            _check_finite(loss.item(), "refiner loss")
            _update(model, loss, cfg, cfg.ref_lr, DEC)
            losses.append(loss.item())
        row = {"stage": "refiner", "epoch": epoch, "train_nll": float(np.mean(losses))}
        if val_pairs:
            row["valid_ppl"] = refiner_perplexity(model, corpus, val_pairs, cfg, [cfg.seed, 4])
        history.append(row)
        log.info("refiner epoch %d %s", epoch, row)
        if log_rows is not None:
            log_rows.append(row)
        if not val_pairs:
            continue
        if row["valid_ppl"] < best_ppl - 1e-9:
            best_ppl, stale = row["valid_ppl"], 0
            best = {n: model.params[n].data.copy() for n in model.params.names(DEC)}
        else:
            stale += 1
            if stale >= cfg.ref_patience:
                break
    if best is not None:
        for n, v in best.items():
            model.params[n].data[...] = v
    model.params.reset_optimizer()
    return history


# ---------------------------------------------------------------------------
# policy gradient
# ---------------------------------------------------------------------------


def corpus_reward_fn(model: CompExp, corpus: Corpus, weights) -> Callable:
    idf = corpus.idf

    def reward(inst: Instance, gen) -> RewardBundle:
        refs = [list(s.words) for s in inst.targets]
        return compute_rewards(model.words(gen.explanation), list(gen.prototype.words), refs, idf, weights)

    return reward


def mc_advantages(rewards: np.ndarray) -> np.ndarray:
    """Reward minus the per-row mean over Monte Carlo samples, for a ``(B, K)`` array.

    Rows are centred on their first sample before averaging so tied rewards
    give advantages that are exactly zero.
    """
    d = rewards - rewards[:, :1]
    return d - d.mean(axis=1, keepdims=True)


@dataclass
class PolicyStats:
    loss: float
    mean_pi: float
    mean_pi_ext: float
    mean_pi_ref: float
    degenerate_fraction: float


def policy_gradient(model: CompExp, instances, cfg: TrainConfig, rng: np.random.Generator,
                    reward_fn: Callable, samples: Optional[int] = None):
    """Build the surrogate loss whose gradient is the estimator; returns (loss tensor, stats)."""
    K = cfg.mc_samples if samples is None else samples
    ep = model.extraction_pass(instances)
    probs = np.exp(ep.log_probs.data) * ep.cand_mask
    rows, picks = [], []
    for b, inst in enumerate(instances):
        for _ in range(K):
            j, _ = sample_prototype(probs[b, :len(inst.candidates)], "sample", rng)
            rows.append(b)
            picks.append(j)
    rows, picks = np.array(rows), np.array(picks)
    xhat, states, mask = model.refined_inputs(ep, rows, picks)
    outs, _ = decode_batch(model.params, xhat, states, mask, "sample", model.cfg.max_len, rng)
    if not cfg.detach_refinement:
        shift = xhat - ep.cand_vectors.data[rows, picks]
        xhat = ep.cand_vectors[rows, picks] + shift
        states = ep.encoding.states[ep.cand_rows[rows, picks]]
    rewards = np.zeros((len(rows), 3))
    for n, (b, j) in enumerate(zip(rows, picks)):
        gen = Generation(int(j), instances[b].candidates[j], strip_eos(outs[n]), outs[n], 0.0, 0.0)
        rb = reward_fn(instances[b], gen)
        rewards[n] = (rb.pi, rb.pi_ext, rb.pi_ref)
    r_ref = (cfg.lambda_1 * rewards[:, 0] + cfg.lambda_2 * rewards[:, 2]).reshape(-1, K)
    r_ext = (cfg.lambda_3 * rewards[:, 0] + cfg.lambda_4 * rewards[:, 1]).reshape(-1, K)
    adv_ref = mc_advantages(r_ref).reshape(-1)
    adv_ext = mc_advantages(r_ext).reshape(-1)
    lp_ref = model.sequence_log_probs(xhat, states, mask, outs)
    lp_ext = ep.log_probs[rows, picks]
    scale = 1.0 / len(rows)
    loss = -(T.sum(lp_ref * (adv_ref * scale)) + T.sum(lp_ext * (adv_ext * scale)))
    zero = np.all(rewards.reshape(-1, K, 3)[..., 0] == 0.0, axis=1)
    stats = PolicyStats(loss.item(), float(rewards[:, 0].mean()), float(rewards[:, 1].mean()),
                        float(rewards[:, 2].mean()), float(zero.mean()))
    return loss, stats


def finetune_step(model: CompExp, instances, cfg: TrainConfig, rng, reward_fn) -> PolicyStats:
    loss, stats = policy_gradient(model, instances, cfg, rng, reward_fn)
    _check_finite(stats.loss, "policy loss")
    if stats.degenerate_fraction > 0.9:
        log.warning("%.0f%% of the batch got zero reward on every sample (degenerate policy)",
                    100 * stats.degenerate_fraction)
    _update(model, loss, cfg, cfg.ft_lr)
    return stats


def review_instances(corpus: Corpus, split: str, max_profile: int, seed) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for rec in corpus.split_records(split):
        try:
            out.append(review_instance(corpus, rec, max_profile, rng))
        except EmptyPoolError:
            log.info("record %d skipped: empty candidate pool", rec)
    return out


def mean_idf_bleu(model: CompExp, corpus: Corpus, instances, weights=EVAL_WEIGHTS[1],
                  batch_size: int = 64) -> float:
    scores = []
    for s in range(0, len(instances), batch_size):
        chunk = instances[s:s + batch_size]
        gens, _ = model.generate(chunk)
        for inst, g in zip(chunk, gens):
            refs = [list(t.words) for t in inst.targets]
            scores.append(idf_bleu(model.words(g[0].explanation), refs, corpus.idf, weights))
    return float(np.mean(scores)) if scores else float("nan")


def finetune(model: CompExp, corpus: Corpus, cfg: TrainConfig, log_rows=None,
             reward_fn: Optional[Callable] = None) -> list:
    """End-to-end policy-gradient training on training reviews."""
    reward_fn = reward_fn or corpus_reward_fn(model, corpus, cfg.reward_weights)
    rng = np.random.default_rng([cfg.seed, 5])
    train = review_instances(corpus, "train", cfg.max_profile, [cfg.seed, 6])
    if not train:
        raise CorpusError("no usable training reviews for fine-tuning")
    held = review_instances(corpus, "valid", cfg.max_profile, [cfg.seed, 7])[:cfg.ft_eval_size]
    model.params.reset_optimizer()
    history = []
    records = [inst.record for inst in train]
    for epoch in range(1, cfg.ft_epochs + 1):
        stats = []
        for idx in _batches(len(records), cfg.batch_size, rng):
            insts = []
            for i in idx:
                try:
                    insts.append(review_instance(corpus, records[i], cfg.max_profile, rng))
                except EmptyPoolError:
                    continue
            if insts:
                stats.append(finetune_step(model, insts, cfg, rng, reward_fn))
        row = {"stage": "finetune", "epoch": epoch,
               "loss": float(np.mean([s.loss for s in stats])),
               "reward_pi": float(np.mean([s.mean_pi for s in stats])),
               "reward_pi_ext": float(np.mean([s.mean_pi_ext for s in stats])),
               "reward_pi_ref": float(np.mean([s.mean_pi_ref for s in stats]))}
        if held:
            row["valid_idf_bleu_1"] = mean_idf_bleu(model, corpus, held)
        history.append(row)
        log.info("finetune epoch %d %s", epoch, row)
        if log_rows is not None:
            log_rows.append(row)
    model.params.reset_optimizer()
    return history
