"""Deterministic synthetic hotel-review corpus for desk-scale runs and tests.

Hotels have a latent quality and a feature set; a review's rating mixes the
hotel quality with a per-user bias, and the adjective in every sentence
tracks that rating. Users have soft phrasing preferences (a favourite
template, two favourite intensifiers, a favourite adjective variant), so
style narrows down the author without identifying them. About a thousand
sentences are produced by default.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FEATURES = ("pool", "breakfast", "staff", "room", "location", "wifi", "bed", "lobby", "bar",
            "view", "parking", "gym", "shower", "restaurant", "spa", "balcony")
ADJECTIVES = {1: ("terrible", "awful"), 2: ("poor", "bad"), 3: ("okay", "decent"),
              4: ("good", "nice"), 5: ("excellent", "amazing")}
INTENSIFIERS = ("really", "very", "quite", "super", "truly", "so")
TEMPLATES = ("the {f} was {i} {a}", "{i} {a} {f}", "i found the {f} {i} {a}",
             "we thought the {f} was {i} {a}")
CLOSERS = {1: "would not stay here again", 2: "would not stay here again",
           3: "it was an average stay", 4: "would {i} recommend this hotel",
           5: "would {i} recommend this hotel"}


def generate_reviews(n_users: int = 30, n_items: int = 20, per_user: int = 12, seed: int = 7) -> list:
    rng = np.random.default_rng(seed)
    users = []
    for u in range(n_users):
        users.append(dict(id=f"u{u:02d}", template=int(rng.integers(len(TEMPLATES))),
                          intensifiers=[INTENSIFIERS[k] for k in
                                        rng.choice(len(INTENSIFIERS), size=2, replace=False)],
                          variant=int(rng.integers(2)), bias=float(rng.normal(0.0, 0.5))))
    items = [dict(id=f"h{c:02d}", quality=float(rng.uniform(1.5, 4.5)),
                  features=[FEATURES[k] for k in rng.choice(len(FEATURES), size=4, replace=False)])
             for c in range(n_items)]
    reviews = []
    for user in users:
        for c in sorted(rng.choice(n_items, size=per_user, replace=False)):
            item = items[c]
            raw = item["quality"] + user["bias"] + rng.normal(0.0, 0.6)
            rating = int(np.clip(np.rint(raw), 1, 5))
            n_sent = int(rng.integers(2, 4))
            feats = [item["features"][k] for k in rng.choice(4, size=n_sent, replace=False)]
            sents = []
            for f in feats:
                t = user["template"] if rng.random() < 0.5 else int(rng.integers(len(TEMPLATES)))
                v = user["variant"] if rng.random() < 0.8 else 1 - user["variant"]
                i = user["intensifiers"][int(rng.integers(2))]
                sents.append(TEMPLATES[t].format(f=f, i=i, a=ADJECTIVES[rating][v]))
            if rng.random() < 0.5:
                sents.append(CLOSERS[rating].format(i=user["intensifiers"][0]))
            text = ". ".join(sents) + "."
            reviews.append({"user_id": user["id"], "item_id": item["id"], "rating": rating,
                            "text": text})
    return reviews


def write_toy_corpus(out_dir, **kwargs) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reviews = generate_reviews(**kwargs)
    rpath = out / "toy_reviews.jsonl"
    rpath.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in reviews), encoding="utf-8")
    lpath = out / "toy_lexicon.txt"
    lpath.write_text("".join(f + "\n" for f in FEATURES), encoding="utf-8")
    return {"reviews": str(rpath), "lexicon": str(lpath)}


def bundled_paths() -> dict:
    base = Path(__file__).parent / "data"
    return {"reviews": str(base / "toy_reviews.jsonl"), "lexicon": str(base / "toy_lexicon.txt")}
