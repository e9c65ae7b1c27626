"""Explanation quality metrics.

Sentences are sequences of hashable tokens (words or ids). Everything is
sentence-level; corpus figures are plain means over instances.

Repetition statistics use these fixed definitions:

* ``rep_per_len``: number of tokens that already occurred earlier in the
  same sentence, divided by sentence length.
* ``seq_rep_2``: 1 - unique bigrams / total bigrams (0 below two tokens).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

TRAIN_WEIGHTS = (0.8, 0.2, 0.0, 0.0)


def uniform_weights(order: int) -> tuple:
    return tuple([1.0 / order] * order)


EVAL_WEIGHTS = {1: uniform_weights(1), 2: uniform_weights(2), 4: uniform_weights(4)}


def ngrams(tokens: Sequence, n: int) -> list:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def clipped_ngram_counts(candidate, references, n: int) -> dict:
    """n-gram -> (count in candidate, count clipped by the max count in any reference)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = Counter(ngrams(candidate, n))
    max_ref = Counter()
    for ref in references:
        for g, c in Counter(ngrams(ref, n)).items():
            if c > max_ref[g]:
                max_ref[g] = c
    return {g: (c, min(c, max_ref[g])) for g, c in counts.items()}


def _weighted_geo_mean(weights, values) -> float:
    """exp(sum w_n log v_n) over orders with w_n > 0; None values are skipped."""
    s = 0.0
    for w, v in zip(weights, values):
        if w <= 0 or v is None:
            continue
        if v <= 0.0:
            return 0.0
        s += w * math.log(v)
    return math.exp(s)


def closest_ref_length(cand_len: int, references) -> int:
    return min((len(r) for r in references), key=lambda rl: (abs(rl - cand_len), rl))


def brevity_penalty(cand_len: int, ref_len: float) -> float:
    if cand_len == 0:
        return 0.0
    return 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)


def bleu(candidate, references, weights=EVAL_WEIGHTS[4], ref_len: Optional[float] = None) -> float:
    """Sentence BLEU with the best-match-length brevity penalty.

    A positive-weight order with zero precision (including a candidate shorter
    than that order) gives 0. Pass ``ref_len`` to override the brevity
    reference length.
    """
    if not references:
        raise ValueError("bleu needs at least one reference")
    if len(candidate) == 0:
        return 0.0
    precisions = []
    for n in range(1, len(weights) + 1):
        counts = clipped_ngram_counts(candidate, references, n)
        total = sum(c for c, _ in counts.values())
        precisions.append(sum(k for _, k in counts.values()) / total if total else 0.0)
    r = closest_ref_length(len(candidate), references) if ref_len is None else ref_len
    return brevity_penalty(len(candidate), r) * _weighted_geo_mean(weights, precisions)


def ngram_idf(gram: tuple, idf: Callable) -> float:
    """An n-gram is worth the largest IDF among its words."""
    return max(idf(w) for w in gram)


def idf_precision(candidate, references, n: int, idf: Callable) -> Optional[float]:
    """IDF-weighted clipped precision; ``None`` when the candidate has no n-grams."""
    counts = clipped_ngram_counts(candidate, references, n)
    num = den = 0.0
    for g, (c, k) in counts.items():
        v = ngram_idf(g, idf)
        num += v * k
        den += v * c
    if den == 0.0:
        return None
    return num / den


def bp_len(cand_len: int, ref_avg_len: float) -> float:
    """e^{min(1 - l_r/l_x, 0)}."""
    if cand_len <= 0:
        return 0.0
    return math.exp(min(1.0 - ref_avg_len / cand_len, 0.0))


def avg_idf(tokens, idf: Callable) -> float:
    return sum(idf(w) for w in tokens) / len(tokens)


def bp_idf(candidate, references, idf: Callable) -> float:
    """e^{min(1 - d_r/d_x, 0)} with d = mean IDF per word (references pooled)."""
    if len(candidate) == 0:
        return 0.0
    pooled = [w for r in references for w in r]
    d_r = avg_idf(pooled, idf)
    d_x = avg_idf(candidate, idf)
    return math.exp(min(1.0 - d_r / d_x, 0.0))


def mean_ref_length(references) -> float:
    return sum(len(r) for r in references) / len(references)


def idf_bleu(candidate, references, idf: Callable, weights=TRAIN_WEIGHTS,
             ref_len: Optional[float] = None) -> float:
    """BP_len * BP_IDF * exp(sum w_n log p_n).

    ``ref_len`` defaults to the mean length of ``references``; pass a
    corpus-wide average to use that instead.
    """
    if not references:
        raise ValueError("idf_bleu needs at least one reference")
    if len(candidate) == 0:
        return 0.0
    l_r = mean_ref_length(references) if ref_len is None else ref_len
    ps = [idf_precision(candidate, references, n, idf) for n in range(1, len(weights) + 1)]
    return bp_len(len(candidate), l_r) * bp_idf(candidate, references, idf) * _weighted_geo_mean(weights, ps)


def clipped_recall(explanation, prototype, references, idf: Callable, weights=TRAIN_WEIGHTS) -> float:
    """Share of the prototype's reference-supported n-grams (IDF-weighted) kept by the explanation.

    An order whose denominator is zero counts as fully retained.
    """
    if len(prototype) == 0:
        raise ValueError("clipped_recall needs a non-empty prototype")
    ratios = []
    for n in range(1, len(weights) + 1):
        counts = clipped_ngram_counts(prototype, references, n)
        in_expl = Counter(ngrams(explanation, n))
        num = den = 0.0
        for g, (_, k) in counts.items():
            if k == 0:
                continue
            v = ngram_idf(g, idf)
            num += v * min(k, in_expl[g])
            den += v * k
        ratios.append(1.0 if den == 0.0 else num / den)
    return _weighted_geo_mean(weights, ratios)


def rep_per_len(tokens) -> float:
    if len(tokens) == 0:
        raise ValueError("rep_per_len needs a non-empty sentence")
    seen, rep = set(), 0
    for t in tokens:
        if t in seen:
            rep += 1
        seen.add(t)
    return rep / len(tokens)


def seq_rep_2(tokens) -> float:
    grams = ngrams(tokens, 2)
    if not grams:
        return 0.0
    return 1.0 - len(set(grams)) / len(grams)


def feature_prf(explanation, ground_truth, lexicon) -> tuple:
    """(precision, recall) of lexicon features; recall is None when the ground truth has none."""
    if not lexicon:
        raise ValueError("feature lexicon is empty")
    lex = set(lexicon)
    ef = lex.intersection(explanation)
    gf = lex.intersection(ground_truth)
    hit = len(ef & gf)
    precision = hit / len(ef) if ef else 0.0
    recall = hit / len(gf) if gf else None
    return precision, recall


def load_lexicon(path) -> set:
    with open(path, encoding="utf-8") as fh:
        return {line.strip().lower() for line in fh if line.strip()}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("idf_bleu_1", "idf_bleu_2", "idf_bleu_4", "bleu_1", "bleu_2", "bleu_4",
                  "avg_length", "idf_per_word", "rep_per_len", "seq_rep_2",
                  "feature_precision", "feature_recall")
_SCALED = {"idf_bleu_1", "idf_bleu_2", "idf_bleu_4", "bleu_1", "bleu_2", "bleu_4"}


@dataclass
class ScoreReport:
    name: str
    values: dict = field(default_factory=dict)
    count: int = 0

    def get(self, key) -> Optional[float]:
        return self.values.get(key)


def _mean(xs) -> Optional[float]:
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def score_instances(name: str, outputs, references_list, idf: Callable, lexicon=None,
                    ref_len: Optional[float] = None) -> ScoreReport:
    """Average every metric over instances (outputs[i] vs references_list[i])."""
    per = {k: [] for k in REPORT_COLUMNS}
    for out, refs in zip(outputs, references_list):
        out = list(out)
        l_r = mean_ref_length(refs) if ref_len is None else ref_len
        for k in (1, 2, 4):
            per[f"idf_bleu_{k}"].append(idf_bleu(out, refs, idf, EVAL_WEIGHTS[k], l_r))
            per[f"bleu_{k}"].append(bleu(out, refs, EVAL_WEIGHTS[k]))
        per["avg_length"].append(len(out))
        if out:
            per["idf_per_word"].append(avg_idf(out, idf))
            per["rep_per_len"].append(rep_per_len(out))
        per["seq_rep_2"].append(seq_rep_2(out))
        if lexicon:
            gt = [w for r in refs for w in r]
            p, r = feature_prf(out, gt, lexicon)
            if r is not None:
                per["feature_precision"].append(p)
                per["feature_recall"].append(r)
    values = {k: _mean(v) for k, v in per.items()}
    return ScoreReport(name, values, len(outputs))


def score_human(references_list, idf: Callable) -> ScoreReport:
    """Length, IDF/word and repetition of ground-truth sentences (no overlap scores)."""
    sents = [list(s) for refs in references_list for s in refs]
    values = {k: None for k in REPORT_COLUMNS}
    values["avg_length"] = _mean(len(s) for s in sents)
    values["idf_per_word"] = _mean(avg_idf(s, idf) for s in sents)
    values["rep_per_len"] = _mean(rep_per_len(s) for s in sents)
    values["seq_rep_2"] = _mean(seq_rep_2(s) for s in sents)
    return ScoreReport("Human", values, len(sents))


def _fmt(key, v) -> str:
    if v is None:
        return "/"
    if key in _SCALED:
        return f"{100.0 * v:.2f}"
    if key in ("avg_length", "idf_per_word"):
        return f"{v:.2f}"
    return f"{v:.4f}"


def format_table(reports) -> str:
    header = ("model", "IDF-BLEU-1", "IDF-BLEU-2", "IDF-BLEU-4", "BLEU-1", "BLEU-2", "BLEU-4",
              "AvgLen", "IDF/word", "rep/l", "seq_rep_2", "F-prec", "F-rec")
    rows = [header] + [(r.name,) + tuple(_fmt(k, r.values.get(k)) for k in REPORT_COLUMNS)
                       for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def format_tsv(reports) -> str:
    lines = ["\t".join(("model",) + REPORT_COLUMNS)]
    for r in reports:
        lines.append("\t".join([r.name] + ["" if r.values.get(k) is None else repr(float(r.values[k]))
                                           for k in REPORT_COLUMNS]))
    return "\n".join(lines) + "\n"
