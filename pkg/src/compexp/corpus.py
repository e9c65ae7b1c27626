"""Review ingestion: parsing, sentence segmentation, filtering, profiles, IDF.

The corpus artifact written by :meth:`Corpus.save` is a UTF-8 text file whose
first line is the magic header ``COMPEXP-CORPUS 1``; the rest of the file is a
single JSON document with sorted keys.
"""

from __future__ import annotations

import json
import logging
import math
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)

CORPUS_MAGIC = "COMPEXP-CORPUS 1"

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

SPLITS = ("train", "valid", "test")


class CorpusError(ValueError):
    pass


class EmptyCorpusError(CorpusError):
    pass


class ProfileLookupError(KeyError):
    pass


@dataclass(frozen=True)
class ReviewRecord:
    user_id: str
    item_id: str
    rating: int
    text: str
    aspect: Optional[str] = None


@dataclass(frozen=True)
class LabeledSentence:
    words: tuple
    rating: int
    user_id: str
    item_id: str
    record: int = -1
    ids: tuple = ()

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class ParseError:
    line: int
    message: str


def parse_reviews(stream: Iterable[str], rating_range=(1, 5)):
    """Parse line-delimited JSON reviews.

    Returns ``(records, errors)``; malformed lines are skipped and reported
    with their 1-based line number instead of aborting the whole parse.
    """
    lo, hi = rating_range
    records, errors = [], []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(ParseError(lineno, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            errors.append(ParseError(lineno, "record is not an object"))
            continue
        missing = [k for k in ("user_id", "item_id", "rating", "text") if k not in obj]
        if missing:
            errors.append(ParseError(lineno, "missing field(s): " + ", ".join(missing)))
            continue
        rating = obj["rating"]
        if isinstance(rating, bool) or not isinstance(rating, (int, float)) or rating != int(rating):
            errors.append(ParseError(lineno, f"rating {rating!r} is not an integer"))
            continue
        rating = int(rating)
        if not lo <= rating <= hi:
            errors.append(ParseError(lineno, f"rating {rating} outside range {lo}-{hi}"))
            continue
        text = str(obj["text"])
        if not text.strip():
            errors.append(ParseError(lineno, "empty text"))
            continue
        aspect = obj.get("aspect")
        records.append(ReviewRecord(str(obj["user_id"]), str(obj["item_id"]), rating, text,
                                    None if aspect is None else str(aspect)))
    for err in errors:
        log.warning("line %d skipped: %s", err.line, err.message)
    return records, errors


_TERMINATORS = re.compile(r"[.!?]+")


def tokenize(text: str) -> tuple:
    words = (w.strip(string.punctuation) for w in text.lower().split())
    return tuple(w for w in words if w)


def segment_sentences(record: ReviewRecord, record_index: int = -1) -> list:
    """Split on ``. ! ?``, lowercase, whitespace-tokenise.

    Always returns at least one sentence, possibly with no words.
    """
    pieces = [tokenize(p) for p in _TERMINATORS.split(record.text)]
    pieces = [p for p in pieces if p] or [()]
    return [LabeledSentence(p, record.rating, record.user_id, record.item_id, record_index)
            for p in pieces]


def recursive_filter(records: list, min_user: int, min_item: int) -> list:
    """Drop sparse users and items repeatedly until every survivor meets both thresholds."""
    if min_user < 1 or min_item < 1:
        raise ValueError("thresholds must be >= 1")
    kept = list(records)
    while True:
        users = Counter(r.user_id for r in kept)
        items = Counter(r.item_id for r in kept)
        nxt = [r for r in kept if users[r.user_id] >= min_user and items[r.item_id] >= min_item]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise EmptyCorpusError("recursive filtering removed every record")
    return kept


def _review_key(record: ReviewRecord) -> tuple:
    return (record.user_id, record.item_id)


def split_dataset(records: list, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded split by review; aspect records of one review stay together."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    keys = sorted({_review_key(r) for r in records})
    order = np.random.default_rng(seed).permutation(len(keys))
    n_train = int(round(ratios[0] * len(keys)))
    n_valid = int(round(ratios[1] * len(keys)))
    if n_train == 0 or n_valid == 0 or len(keys) - n_train - n_valid <= 0:
        raise CorpusError(f"ratios {ratios} leave an empty split for {len(keys)} reviews")
    assign = {}
    for rank, idx in enumerate(order):
        assign[keys[idx]] = 0 if rank < n_train else 1 if rank < n_train + n_valid else 2
    parts = ([], [], [])
    for r in records:
        parts[assign[_review_key(r)]].append(r)
    return parts


@dataclass
class Vocab:
    itos: list

    def __post_init__(self):
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, sentences: Iterable[LabeledSentence], min_freq: int = 2) -> "Vocab":
        counts = Counter(w for s in sentences for w in s.words)
        words = sorted((w for w, c in counts.items() if c >= min_freq and w not in SPECIALS),
                       key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + words)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, words) -> tuple:
        return tuple(self.stoi.get(w, UNK_ID) for w in words)

    def decode(self, ids) -> tuple:
        return tuple(self.itos[i] for i in ids)


@dataclass
class IdfTable:
    num_sentences: int
    sentence_counts: dict

    def __post_init__(self):
        S = self.num_sentences
        self.table = {g: math.log(S / c) + 1.0 for g, c in self.sentence_counts.items()}
        self.unseen = math.log(S) + 1.0

    def idf(self, word) -> float:
        return self.table.get(word, self.unseen)

    def __call__(self, word) -> float:
        return self.table.get(word, self.unseen)


def build_idf(train_sentences: Iterable[LabeledSentence]) -> IdfTable:
    """IDF(g) = ln(S / s_g) + 1 over training sentences; unseen words count as s_g = 1."""
    S, counts = 0, Counter()
    for s in train_sentences:
        S += 1
        counts.update(set(s.words))
    if S == 0:
        raise CorpusError("cannot build IDF table from zero sentences")
    return IdfTable(S, dict(counts))


@dataclass
class UserProfile:
    user_id: str
    entries: list  # (LabeledSentence, rating)

    def view(self, max_profile: int, rng: np.random.Generator, exclude_record: int = -2) -> list:
        pool = [e for e in self.entries if e[0].record != exclude_record]
        return _subsample(pool, max_profile, rng)


@dataclass
class ItemProfile:
    item_id: str
    entries: list  # LabeledSentence; ratings kept only for training-target lookup

    def view(self, max_profile: int, rng: np.random.Generator, exclude_user: Optional[str] = None,
             must_include=None) -> list:
        pool = [s for s in self.entries
                if s is not must_include and (exclude_user is None or s.user_id != exclude_user)]
        if must_include is None:
            return _subsample(pool, max_profile, rng)
        picked = _subsample(pool, max_profile - 1, rng)
        pos = int(rng.integers(len(picked) + 1))
        return picked[:pos] + [must_include] + picked[pos:]


def _subsample(pool: list, k: int, rng: np.random.Generator) -> list:
    if len(pool) <= k:
        return list(pool)
    idx = np.sort(rng.choice(len(pool), size=k, replace=False))
    return [pool[i] for i in idx]


@dataclass
class ProfileStore:
    users: dict
    items: dict

    def user(self, user_id: str) -> UserProfile:
        try:
            return self.users[user_id]
        except KeyError:
            raise ProfileLookupError(f"no profile for user {user_id!r}") from None

    def item(self, item_id: str) -> ItemProfile:
        try:
            return self.items[item_id]
        except KeyError:
            raise ProfileLookupError(f"no profile for item {item_id!r}") from None


def build_profiles(sentences: Iterable[LabeledSentence]) -> ProfileStore:
    """Group sentences into user and item profiles.

    Profiles keep every entry; size limits are applied per use through ``view``.
    """
    users, items = defaultdict(list), defaultdict(list)
    for s in sentences:
        users[s.user_id].append((s, s.rating))
        items[s.item_id].append(s)
    return ProfileStore({u: UserProfile(u, e) for u, e in users.items()},
                        {i: ItemProfile(i, e) for i, e in items.items()})


@dataclass
class Corpus:
    """Filtered, split, tokenised review corpus; read-only after construction."""

    records: list
    splits: list  # split index per record: 0 train, 1 valid, 2 test
    sentences: list
    vocab: Vocab
    rating_range: tuple
    max_sentence_len: int
    profiles: ProfileStore = field(init=False)
    idf: IdfTable = field(init=False)

    def __post_init__(self):
        self.rating_range = tuple(self.rating_range)
        train = self.split_sentences("train")
        self.profiles = build_profiles(train)
        self.idf = build_idf(train)
        self._by_record = defaultdict(list)
        for s in self.sentences:
            self._by_record[s.record].append(s)

    @property
    def max_rating_diff(self) -> int:
        return self.rating_range[1] - self.rating_range[0]

    @classmethod
    def build(cls, records: list, *, rating_range=(1, 5), min_user: int = 20, min_item: int = 20,
              ratios=(0.8, 0.1, 0.1), seed: int = 0, min_freq: int = 2,
              max_sentence_len: int = 25) -> "Corpus":
        records = recursive_filter(records, min_user, min_item)
        train, valid, test = split_dataset(records, ratios, seed)
        split_of = {}
        for k, part in enumerate((train, valid, test)):
            for r in part:
                split_of[id(r)] = k
        splits = [split_of[id(r)] for r in records]
        sentences = []
        for idx, r in enumerate(records):
            for s in segment_sentences(r, idx):
                words = s.words[:max_sentence_len]
                if words:
                    sentences.append(LabeledSentence(words, s.rating, s.user_id, s.item_id, idx))
        vocab = Vocab.build((s for s in sentences if splits[s.record] == 0), min_freq)
        sentences = [LabeledSentence(s.words, s.rating, s.user_id, s.item_id, s.record,
                                     vocab.encode(s.words)) for s in sentences]
        return cls(records, splits, sentences, vocab, tuple(rating_range), max_sentence_len)

    def split_of(self, sentence_or_record) -> str:
        rec = sentence_or_record if isinstance(sentence_or_record, int) else sentence_or_record.record
        return SPLITS[self.splits[rec]]

    def split_sentences(self, split: str) -> list:
        k = SPLITS.index(split)
        return [s for s in self.sentences if self.splits[s.record] == k]

    def split_records(self, split: str) -> list:
        k = SPLITS.index(split)
        return [i for i, sp in enumerate(self.splits) if sp == k and self._by_record_has(i)]

    def _by_record_has(self, idx: int) -> bool:
        return bool(self._by_record.get(idx))

    def record_sentences(self, idx: int) -> list:
        return list(self._by_record.get(idx, ()))

    def user_references(self, user_id: str, max_profile: int, rng: np.random.Generator,
                        exclude_record: int = -2) -> list:
        """Reference entries for a user, or a global sample when the user has none (cold start)."""
        prof = self.profiles.users.get(user_id)
        refs = prof.view(max_profile, rng, exclude_record) if prof is not None else []
        if refs:
            return refs
        pool = [(s, s.rating) for s in self.split_sentences("train") if s.record != exclude_record]
        return _subsample(pool, max_profile, rng)

    def summary(self) -> dict:
        return {
            "users": len({r.user_id for r in self.records}),
            "items": len({r.item_id for r in self.records}),
            "reviews": len({_review_key(r) for r in self.records}),
            "records": len(self.records),
            "sentences": len(self.sentences),
            "vocab": len(self.vocab),
            "rating_range": f"{self.rating_range[0]} - {self.rating_range[1]}",
            "split_records": {name: self.splits.count(k) for k, name in enumerate(SPLITS)},
        }

    # serialisation ---------------------------------------------------------

    def to_text(self) -> str:
        payload = {
            "rating_range": list(self.rating_range),
            "max_sentence_len": self.max_sentence_len,
            "vocab": self.vocab.itos,
            "records": [[r.user_id, r.item_id, r.rating, r.text, r.aspect] for r in self.records],
            "splits": self.splits,
            "sentences": [[list(s.words), s.record] for s in self.sentences],
            "idf": {"S": self.idf.num_sentences, "counts": self.idf.sentence_counts},
        }
        return CORPUS_MAGIC + "\n" + json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "Corpus":
        header, _, body = text.partition("\n")
        if header != CORPUS_MAGIC:
            raise CorpusError("not a corpus artifact (bad magic header)")
        p = json.loads(body)
        records = [ReviewRecord(u, i, r, t, a) for u, i, r, t, a in p["records"]]
        vocab = Vocab(p["vocab"])
        sentences = []
        for words, rec in p["sentences"]:
            r = records[rec]
            sentences.append(LabeledSentence(tuple(words), r.rating, r.user_id, r.item_id, rec,
                                             vocab.encode(words)))
        return cls(records, p["splits"], sentences, vocab, tuple(p["rating_range"]),
                   p["max_sentence_len"])

    @classmethod
    def load(cls, path) -> "Corpus":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))
