"""Command-line entry point: ``compexp <command> --config run.yaml [--seed N] [--out DIR]``.

Artifacts written to the output directory:

* ``corpus.cxc``            ingest: filtered corpus, splits, vocabulary, IDF statistics
* ``summary.txt``           ingest: dataset summary table
* ``extractor.cxps``        pretrain-extractor checkpoint
* ``refiner.cxps``          pretrain-refiner checkpoint (extractor + decoder)
* ``model.cxps``            finetune checkpoint
* ``log_<stage>.tsv``       per-epoch training curves
* ``report.txt/.tsv``       evaluate
* ``generations.jsonl``     generate
* ``perturb.tsv``           perturb
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig, config_to_dict, load_config
from .corpus import Corpus, CorpusError, ProfileLookupError
from .metrics import format_table, format_tsv
from .model import CompExp
from .params import ParamStore
from .pipeline import corpus_ref_length, evaluate_split, evaluation_instances, format_curve, \
    format_summary, generate_for_request, load_corpus_from_config, parse_requests, perturbation_curve
from .toydata import write_toy_corpus
from .training import TrainingDivergence, finetune, make_refiner_pairs, pretrain_extractor, \
    pretrain_refiner, sentence_vectors, validation_refiner_pairs

log = logging.getLogger("compexp")

CORPUS_FILE = "corpus.cxc"
STAGE_FILES = {"extractor": "extractor.cxps", "refiner": "refiner.cxps", "finetune": "model.cxps"}


def write_log(path: Path, rows) -> None:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join("" if k not in r else repr(r[k]) if isinstance(r[k], float) else str(r[k])
                               for k in keys))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class Run:
    """Resolved config plus the artifact directory for one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out

    def corpus(self) -> Corpus:
        path = self.out / CORPUS_FILE
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `compexp ingest` first")
        return Corpus.load(path)

    def model(self, corpus: Corpus, checkpoint=None) -> CompExp:
        model = CompExp.create(self.cfg.model, corpus.vocab, corpus.max_rating_diff, self.cfg.seed)
        if checkpoint is not None:
            path = Path(checkpoint)
            if not path.exists():
                raise FileNotFoundError(f"checkpoint not found: {path}")
            stored = ParamStore.load(path)
            missing = sorted(set(model.params.names()) - set(stored.names()))
            if missing:
                raise ValueError(f"{path}: checkpoint lacks {', '.join(missing[:3])}")
            for n in model.params.names():
                if stored[n].shape != model.params[n].shape:
                    raise ValueError(f"{path}: {n} has shape {stored[n].shape}, "
                                     f"config expects {model.params[n].shape}")
            model.params.load_values(stored)
        return model

    def latest_checkpoint(self) -> Path:
        for stage in ("finetune", "refiner"):
            p = self.out / STAGE_FILES[stage]
            if p.exists():
                return p
        raise FileNotFoundError(f"no trained checkpoint in {self.out}; run pretrain-refiner first")


def cmd_ingest(run: Run, args) -> None:
    corpus = load_corpus_from_config(run.cfg)
    corpus.save(run.out / CORPUS_FILE)
    table = format_summary(corpus.summary())
    (run.out / "summary.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)


def cmd_pretrain_extractor(run: Run, args) -> None:
    corpus = run.corpus()
    model = run.model(corpus)
    rows = []
    pretrain_extractor(model, corpus, run.cfg.train, rows)
    write_log(run.out / "log_extractor.tsv", rows)
    model.params.save(run.out / STAGE_FILES["extractor"])


def cmd_pretrain_refiner(run: Run, args) -> None:
    corpus = run.corpus()
    model = run.model(corpus, args.checkpoint or run.out / STAGE_FILES["extractor"])
    pairs = make_refiner_pairs(corpus.profiles.items, lambda s: sentence_vectors(model, s))
    val_pairs = validation_refiner_pairs(model, corpus)
    rows = []
    pretrain_refiner(model, corpus, pairs, run.cfg.train, val_pairs, rows)
    write_log(run.out / "log_refiner.tsv", rows)
    model.params.save(run.out / STAGE_FILES["refiner"])


def cmd_finetune(run: Run, args) -> None:
    corpus = run.corpus()
    model = run.model(corpus, args.checkpoint or run.out / STAGE_FILES["refiner"])
    rows = []
    finetune(model, corpus, run.cfg.train, rows)
    write_log(run.out / "log_finetune.tsv", rows)
    model.params.save(run.out / STAGE_FILES["finetune"])


def cmd_generate(run: Run, args) -> None:
    corpus = run.corpus()
    model = run.model(corpus, args.checkpoint or run.latest_checkpoint())
    with open(args.request, encoding="utf-8") as fh:
        requests = parse_requests(fh)
    lines = []
    for req in requests:
        for rec in generate_for_request(model, corpus, req, run.cfg.train.max_profile, run.cfg.seed):
            if "error" in rec:
                log.warning("user %s item %s: %s", rec["user_id"], rec["item_id"], rec["error"])
            lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    text = "".join(line + "\n" for line in lines)
    (run.out / "generations.jsonl").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_evaluate(run: Run, args) -> None:
    corpus = run.corpus()
    model = run.model(corpus, args.checkpoint or run.latest_checkpoint())
    reports = evaluate_split(model, corpus, run.cfg, args.split)
    table = format_table(reports)
    (run.out / "report.txt").write_text(table, encoding="utf-8")
    (run.out / "report.tsv").write_text(format_tsv(reports), encoding="utf-8")
    sys.stdout.write(table)


def cmd_perturb(run: Run, args) -> None:
    corpus = run.corpus()
    model = run.model(corpus, args.checkpoint or run.latest_checkpoint())
    insts = evaluation_instances(corpus, args.split, run.cfg.train.max_profile, run.cfg.seed)
    ref_len = corpus_ref_length(corpus) if run.cfg.eval.ref_length_mode == "corpus" else None
    sigmas = args.sigmas if args.sigmas else run.cfg.eval.sigmas
    points = perturbation_curve(model, corpus, insts, sigmas, run.cfg.eval.perturb_seeds,
                                run.cfg.seed, ref_len)
    text = format_curve(points)
    (run.out / "perturb.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_make_toy(args) -> None:
    out = Path(args.dir)
    paths = write_toy_corpus(out)
    cfg = {
        "data": {"reviews": Path(paths["reviews"]).name, "lexicon": Path(paths["lexicon"]).name,
                 "min_user": 5, "min_item": 5},
        "model": {k: 64 for k in ("emb_dim", "hidden", "att_dim", "transform_dim", "dec_emb_dim",
                                  "dec_hidden")},
        "out_dir": "run",
    }
    (out / "toy.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    print(out / "toy.yaml")


COMMANDS = {
    "ingest": cmd_ingest,
    "pretrain-extractor": cmd_pretrain_extractor,
    "pretrain-refiner": cmd_pretrain_refiner,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "perturb": cmd_perturb,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compexp", description="Comparative explanation generator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="artifact directory (default: config out_dir)")
        if name not in ("ingest", "pretrain-extractor"):
            sp.add_argument("--checkpoint", default=None, help="parameter file to start from")
        if name in ("evaluate", "perturb"):
            sp.add_argument("--split", default="test", choices=("train", "valid", "test"))
        if name == "generate":
            sp.add_argument("--request", required=True,
                            help='JSON lines: {"user_id": ..., "items": [[item_id, rating], ...]}')
        if name == "perturb":
            sp.add_argument("--sigmas", type=float, nargs="+", default=None)
    toy = sub.add_parser("make-toy", help="write the synthetic toy corpus and a matching config")
    toy.add_argument("dir")
    return p


def resolve_run(args) -> Run:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    base = Path(args.config).parent
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    if not args.out and not out.is_absolute():
        out = base / out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(
        json.dumps(config_to_dict(cfg), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return Run(cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "make-toy":
            cmd_make_toy(args)
        else:
            COMMANDS[args.command](resolve_run(args), args)
    except (ConfigError, CorpusError, ProfileLookupError, FileNotFoundError, ValueError,
            TrainingDivergence) as e:
        print(f"compexp {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
