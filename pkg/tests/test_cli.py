import json
import shutil

import numpy as np
import pytest
import yaml

from compexp import pipeline
from compexp.cli import main
from compexp.config import load_config
from compexp.corpus import Corpus
from compexp.model import Generation
from compexp.pipeline import RankedRequest, generate_for_request, parse_requests, perturb_ratings

FEATURES = ["pool", "bed", "view", "staff", "bar", "wifi", "gym", "spa", "lobby", "room"]
ADJ = {1: "awful", 2: "poor", 3: "okay", 4: "good", 5: "superb"}
STYLE = ["honestly", "overall", "sadly", "frankly", "basically", "truly", "really"]


def fixture_reviews():
    """60 reviews: u0-u5 x i0-i8, u0-u4 on i9, and one review by u6 that filtering drops."""
    pairs = [(u, i) for u in range(6) for i in range(9)] + [(u, 9) for u in range(5)] + [(6, 0)]
    out = []
    for u, i in pairs:
        r = 1 + (u + 2 * i) % 5
        out.append({"user_id": f"u{u}", "item_id": f"i{i}", "rating": r,
                    "text": f"{STYLE[u]} the {FEATURES[i]} was {ADJ[r]}."})
    return out


def write_setup(d, **train):
    reviews = d / "reviews.jsonl"
    reviews.write_text("".join(json.dumps(r) + "\n" for r in fixture_reviews()), encoding="utf-8")
    (d / "lexicon.txt").write_text("\n".join(FEATURES) + "\n", encoding="utf-8")
    dims = {k: 8 for k in ("emb_dim", "hidden", "att_dim", "transform_dim", "dec_emb_dim", "dec_hidden")}
    cfg = {"data": {"reviews": "reviews.jsonl", "lexicon": "lexicon.txt", "min_user": 2, "min_item": 2,
                    "min_freq": 1},
           "model": {**dims, "rating_dim": 3, "max_len": 8},
           "train": {"ext_epochs": 2, "ref_epochs": 2, "ft_epochs": 1, "mc_samples": 2, "batch_size": 8,
                     **train},
           "eval": {"sigmas": [0.0, 2.0], "perturb_seeds": 2},
           "out_dir": "run", "seed": 3}
    path = d / "run.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


def run(*argv):
    return main([str(a) for a in argv])


def summary_table(path):
    rows = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.rpartition("  ")
        rows[key.strip()] = value.strip()
    return rows


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_setup(d)
    for cmd in ("ingest", "pretrain-extractor", "pretrain-refiner", "finetune"):
        assert run(cmd, "--config", cfg) == 0, cmd
    return cfg, d / "run"


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def test_ingest_summary_hand_tally(tmp_path, capsys):
    cfg = write_setup(tmp_path)
    assert run("ingest", "--config", cfg) == 0
    t = summary_table(tmp_path / "run" / "summary.txt")
    assert (t["# users"], t["# items"], t["# reviews"], t["# sentences"]) == ("6", "10", "59", "59")
    assert t["rating range"] == "1 - 5"
    # 59 reviews: round(0.8*59)=47 train, round(0.1*59)=6 valid, 6 test
    assert (t["train records"], t["valid records"], t["test records"]) == ("47", "6", "6")
    assert "# users" in capsys.readouterr().out


def test_ingest_is_byte_identical_across_runs(tmp_path):
    cfg = write_setup(tmp_path)
    assert run("ingest", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("ingest", "--config", cfg, "--out", tmp_path / "b") == 0
    for name in ("corpus.cxc", "summary.txt", "config.resolved.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_input_file_names_path(tmp_path, capsys):
    cfg = write_setup(tmp_path)
    (tmp_path / "reviews.jsonl").unlink()
    assert run("ingest", "--config", cfg) != 0
    assert "reviews.jsonl" in capsys.readouterr().err


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_setup(tmp_path)
    run("ingest", "--config", cfg, "--seed", 11)
    resolved = json.loads((tmp_path / "run" / "config.resolved.json").read_text())
    assert resolved["seed"] == 11 and resolved["train"]["seed"] == 11


def test_commands_need_prior_artifacts(tmp_path, capsys):
    cfg = write_setup(tmp_path)
    assert run("pretrain-extractor", "--config", cfg) == 2
    assert "ingest" in capsys.readouterr().err
    run("ingest", "--config", cfg)
    assert run("evaluate", "--config", cfg) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_make_toy_writes_loadable_config(tmp_path, capsys):
    assert run("make-toy", tmp_path / "toy") == 0
    cfg = load_config(tmp_path / "toy" / "toy.yaml")
    assert cfg.model.hidden == 64 and cfg.data.min_user == 5


# ---------------------------------------------------------------------------
# training artifacts
# ---------------------------------------------------------------------------


def test_training_writes_checkpoints_and_logs(trained):
    _, out = trained
    for name in ("extractor.cxps", "refiner.cxps", "model.cxps"):
        assert (out / name).read_bytes()[:8] == b"CXPARAM\0"
    head = (out / "log_finetune.tsv").read_text().splitlines()[0].split("\t")
    assert head[:3] == ["stage", "epoch", "loss"] and "valid_idf_bleu_1" in head
    assert len((out / "log_extractor.tsv").read_text().splitlines()) >= 2


def test_checkpoint_shape_mismatch_is_reported(trained, tmp_path, capsys):
    cfg, out = trained
    raw = yaml.safe_load(cfg.read_text())
    raw["model"]["hidden"] = 5
    raw["data"] = {**raw["data"], "reviews": str(cfg.parent / "reviews.jsonl"),
                   "lexicon": str(cfg.parent / "lexicon.txt")}
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump(raw))
    shutil.copy(out / "corpus.cxc", tmp_path / "corpus.cxc")
    assert run("evaluate", "--config", other, "--out", tmp_path, "--checkpoint", out / "model.cxps") == 2
    assert "shape" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def write_request(path, user="u0", items=(("i1", 5), ("nowhere", 3), ("i2", 1))):
    path.write_text(json.dumps({"user_id": user, "items": [list(x) for x in items]}) + "\n")
    return path


def test_generate_keeps_rank_order_and_isolates_errors(trained, tmp_path):
    cfg, out = trained
    req = write_request(tmp_path / "req.jsonl")
    assert run("generate", "--config", cfg, "--request", req) == 0
    recs = [json.loads(x) for x in (out / "generations.jsonl").read_text().splitlines()]
    assert [r["item_id"] for r in recs] == ["i1", "nowhere", "i2"]
    assert "error" in recs[1] and "explanation" not in recs[1]
    for r in (recs[0], recs[2]):
        assert set(r) == {"user_id", "item_id", "rating", "prototype", "explanation"}


def test_generate_is_deterministic(trained, tmp_path):
    cfg, out = trained
    req = write_request(tmp_path / "req.jsonl")
    run("generate", "--config", cfg, "--request", req)
    first = (out / "generations.jsonl").read_bytes()
    run("generate", "--config", cfg, "--request", req)
    assert (out / "generations.jsonl").read_bytes() == first


def test_generate_never_extracts_the_users_own_sentences(trained):
    _, out = trained
    corpus = Corpus.load(out / "corpus.cxc")
    own = {s.words for s in corpus.sentences if s.user_id == "u0"}
    req = RankedRequest("u0", [(f"i{i}", 3) for i in range(10)])
    recs = generate_for_request(load_model(trained, corpus), corpus, req, 10, 0)
    assert all(tuple(r["prototype"].split()) not in own for r in recs)


def load_model(trained, corpus):
    from compexp.cli import Run
    cfg, out = trained
    return Run(load_config(cfg), out).model(corpus, out / "model.cxps")


def test_bad_requests(trained, tmp_path, capsys):
    cfg, _ = trained
    dup = write_request(tmp_path / "dup.jsonl", items=(("i1", 5), ("i1", 4)))
    assert run("generate", "--config", cfg, "--request", dup) == 2
    assert "twice" in capsys.readouterr().err
    off = write_request(tmp_path / "off.jsonl", items=(("i1", 9),))
    assert run("generate", "--config", cfg, "--request", off) == 2
    with pytest.raises(ValueError):
        parse_requests(["{not json"])


@pytest.mark.slow
def test_rating_vector_changes_trained_output(toy_runs):
    model, corpus = toy_runs.get(0)["finetuned"], toy_runs.corpus
    user = corpus.records[corpus.split_records("test")[0]].user_id
    items = sorted(corpus.profiles.items)[:5]
    low = generate_for_request(model, corpus, RankedRequest(user, [(i, 1) for i in items]), 10, 0)
    high = generate_for_request(model, corpus, RankedRequest(user, [(i, 5) for i in items]), 10, 0)
    assert any(a["explanation"] != b["explanation"] for a, b in zip(low, high))


# ---------------------------------------------------------------------------
# evaluate and perturb
# ---------------------------------------------------------------------------


def tsv_rows(path):
    lines = path.read_text().splitlines()
    head = lines[0].split("\t")
    return {row.split("\t")[0]: dict(zip(head, row.split("\t"))) for row in lines[1:]}


def test_evaluate_report_and_human_row(trained):
    cfg, out = trained
    assert run("evaluate", "--config", cfg) == 0
    rows = tsv_rows(out / "report.tsv")
    corpus = Corpus.load(out / "corpus.cxc")
    lens = [len(s) for rec in corpus.split_records("test") for s in corpus.record_sentences(rec)]
    assert float(rows["Human"]["avg_length"]) == pytest.approx(sum(lens) / len(lens), abs=1e-12)
    assert rows["Human"]["idf_bleu_1"] == ""
    assert 0.0 <= float(rows["CompExp"]["idf_bleu_1"]) <= 1.0
    text = (out / "report.txt").read_text()
    assert "IDF-BLEU-1" in text and "Human" in text


def test_ground_truth_output_scores_100(trained, monkeypatch):
    cfg, out = trained

    def oracle(model, instances, batch_size=64):
        return [Generation(0, inst.candidates[0], list(inst.targets[0].ids), [], 0.0, 0.0) for inst in instances]

    monkeypatch.setattr(pipeline, "generate_outputs", oracle)
    assert run("evaluate", "--config", cfg, "--split", "valid") == 0
    assert float(tsv_rows(out / "report.tsv")["CompExp"]["idf_bleu_1"]) == 1.0
    assert " 100.00" in (out / "report.txt").read_text()


def test_evaluate_empty_split_errors(trained, tmp_path, capsys):
    cfg, out = trained
    header, body = (out / "corpus.cxc").read_text().split("\n", 1)
    payload = json.loads(body)
    payload["splits"] = [0 if s == 2 else s for s in payload["splits"]]
    (tmp_path / "corpus.cxc").write_text(header + "\n" + json.dumps(payload) + "\n")
    shutil.copy(out / "model.cxps", tmp_path / "model.cxps")
    assert run("evaluate", "--config", cfg, "--out", tmp_path) == 2
    assert "empty" in capsys.readouterr().err


def test_perturb_sigma_zero_equals_evaluate(trained):
    cfg, out = trained
    run("evaluate", "--config", cfg)
    assert run("perturb", "--config", cfg, "--sigmas", 0) == 0
    ev = tsv_rows(out / "report.tsv")["CompExp"]
    lines = [x.split("\t") for x in (out / "perturb.tsv").read_text().splitlines()[1:]]
    assert len(lines) == 2 + 1
    for sigma, seed, b, ib in lines:
        assert float(ib) == float(ev["idf_bleu_1"]) and float(b) == float(ev["bleu_1"])


def test_perturb_is_reproducible(trained):
    cfg, out = trained
    run("perturb", "--config", cfg)
    first = (out / "perturb.tsv").read_bytes()
    run("perturb", "--config", cfg)
    assert (out / "perturb.tsv").read_bytes() == first
    assert first.decode().count("\tmean\t") == 2


def test_perturb_ratings_rounds_and_clamps():
    r = perturb_ratings([1, 3, 5], 0.0, (1, 5), np.random.default_rng(0))
    np.testing.assert_array_equal(r, [1, 3, 5])
    r = perturb_ratings(np.full(1000, 3), 5.0, (1, 5), np.random.default_rng(0))
    assert r.min() == 1 and r.max() == 5 and r.dtype.kind == "i"
