"""Command-line entry point.

Every subcommand reads and writes artifacts below ``--out``.  Missing upstream
artifacts are built on demand from the same configuration, so e.g.
``dualqe predict`` on a fresh directory runs the whole pipeline.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import corpus as C
from . import pipeline as P
from .config import load_config
from .estimator import TASKS
from .evaluation import filter_corpus, format_table, metrics_json

log = logging.getLogger("dualqe")

SPLITS = ("train", "dev", "test")


class Workspace:
    def __init__(self, root, cfg):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, *parts):
        return self.root.joinpath(*parts)

    # -- stages --------------------------------------------------------------
    def data(self, rebuild=False):
        d = self.path("data")
        if rebuild or not (d / "lexicon.json").exists():
            log.info("generating synthetic data in %s", d)
            with staging(d) as tmp:
                P.save_data(tmp, P.generate_data(self.cfg))
        return P.load_data(d)

    def tokenizer(self, rebuild=False):
        f = self.path("bpe", "tokenizer.json")
        if rebuild or not f.exists():
            data = self.data()
            log.info("training BPE (%d merges)", self.cfg.bpe_merges)
            with staging(f.parent) as tmp:
                P.train_tokenizer(self.cfg, data).save(tmp / "tokenizer.json")
        return C.Tokenizer.load(f)

    def nmt(self, rebuild=False):
        d = self.path("nmt")
        tok = self.tokenizer()
        if rebuild or not (d / "manifest.json").exists():
            data = self.data()
            log.info("training dual-learning predictor (%d steps)", self.cfg.nmt_steps)
            predictor = P.train_nmt(self.cfg, tok, data.parallel)
            with staging(d) as tmp:
                P.save_nmt(tmp, predictor)
        return P.load_nmt(d, tok)

    def xlm(self, rebuild=False):
        if not self.cfg.use_xlm:
            return None
        d = self.path("xlm")
        tok = self.tokenizer()
        if rebuild or not (d / "manifest.json").exists():
            data = self.data()
            log.info("pretraining cross-lingual LM (%d steps)", self.cfg.xlm_steps)
            model = P.train_xlm(self.cfg, tok, data.parallel)
            with staging(d) as tmp:
                P.save_xlm(tmp, model)
        return P.load_xlm(d, tok)

    def feature_meta(self):
        return {"use_xlm": self.cfg.use_xlm, "use_f_dual": self.cfg.use_f_dual}

    def features(self, split, rebuild=False):
        d = self.path("features", split)
        if not rebuild and (d / "manifest.json").exists():
            examples, manifest = P.load_features(d)
            if all(manifest.get(k) == v for k, v in self.feature_meta().items()):
                return examples
            log.info("feature cache %s was built with other settings; rebuilding", d)
        tok, predictor, xlm = self.tokenizer(), self.nmt(), self.xlm()
        samples = getattr(self.data().qe, split)
        log.info("extracting features for %s (%d samples)", split, len(samples))
        examples = P.examples_for_samples(tok, predictor, xlm, samples, self.cfg.use_f_dual)
        with staging(d) as tmp:
            P.save_features(tmp, examples, self.feature_meta())
        return P.load_features(d)[0]

    def estimator(self, task, rebuild=False):
        d = self.path("estimator", task)
        tok = self.tokenizer()
        if rebuild or not (d / "manifest.json").exists():
            train, dev = self.features("train"), self.features("dev")
            models, reports = P.train_estimators(self.cfg, train, dev, (task,))
            with staging(d) as tmp:
                P.save_estimator(tmp, models[task], task, tok.vocab.hash())
                r = reports[task]
                (tmp / "training.json").write_text(metrics_json(
                    {"losses": r.losses, "dev_scores": r.dev_scores, "best_epoch": r.best_epoch,
                     "best_score": r.best_score}), encoding="utf-8")
        return P.load_estimator(d, task, tok.vocab.hash())

    def system(self):
        return P.QESystem(self.tokenizer(), self.nmt(), self.xlm(),
                          {t: self.estimator(t) for t in TASKS}, self.cfg.use_f_dual, self.cfg.tag_threshold)


@contextlib.contextmanager
def staging(target):
    """Write into ``<target>.partial`` and move it into place only on success."""
    target = Path(target)
    tmp = target.with_name(target.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    tmp.rename(target)


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(ws, args):
    data = ws.data(rebuild=True)
    print(json.dumps({name: len(s) for name, s in data.qe.splits().items()} | {"parallel": len(data.parallel)}))


def cmd_train_bpe(ws, args):
    tok = ws.tokenizer(rebuild=True)
    print(f"vocabulary size {len(tok.vocab)}")


def cmd_train_nmt(ws, args):
    ws.nmt(rebuild=True)
    print(f"predictor saved to {ws.path('nmt')}")


def cmd_train_xlm(ws, args):
    if not ws.cfg.use_xlm:
        raise ValueError("use_xlm is false in this configuration")
    ws.xlm(rebuild=True)
    print(f"cross-lingual LM saved to {ws.path('xlm')}")


def cmd_extract_features(ws, args):
    for split in args.splits:
        ws.features(split, rebuild=True)
    print(f"features written to {ws.path('features')}")


def cmd_train_estimator(ws, args):
    tasks = TASKS if args.task == "all" else (args.task,)
    for task in tasks:
        ws.estimator(task, rebuild=True)
    print(f"estimators saved to {ws.path('estimator')}")


def _write_predictions(ws, split, examples, preds):
    lines = ["sentence_id\thter_hat"] + [f"{i}\t{p.hter_hat:.6f}" for i, p in enumerate(preds)]
    write_text(ws.path("predictions", f"{split}.sentence.tsv"), "\n".join(lines) + "\n")
    lines = ["sentence_id\tposition\tkind\tp_bad\ttag"]
    for i, p in enumerate(preds):
        for kind, probs, tags in (("word", p.word_probs, p.word_tags), ("gap", p.gap_probs, p.gap_tags)):
            lines.extend(f"{i}\t{j}\t{kind}\t{pb:.6f}\t{C.BAD if t else C.OK}" for j, (pb, t) in enumerate(zip(probs, tags)))
    write_text(ws.path("predictions", f"{split}.word.tsv"), "\n".join(lines) + "\n")


def _predict(ws, split):
    examples = ws.features(split)
    models = {t: ws.estimator(t) for t in TASKS}
    preds = P.qe_predictions(models, examples, ws.cfg.tag_threshold, ws.cfg.use_xlm)
    _write_predictions(ws, split, examples, preds)
    return examples, preds


def cmd_predict(ws, args):
    _predict(ws, args.split)
    print(f"predictions written to {ws.path('predictions')}")


def cmd_evaluate(ws, args):
    examples, preds = _predict(ws, args.split)
    metrics = P.evaluate_predictions(examples, preds)
    write_text(ws.path(f"metrics.{args.split}.json"), metrics_json(metrics))
    print(format_table([{"metric": k, "value": float(v)} for k, v in sorted(metrics.items())], ["metric", "value"]))


def cmd_ablate(ws, args):
    rows = P.ablation(ws.cfg, ws.data(), ws.tokenizer())
    write_text(ws.path("ablation.json"), metrics_json({"rows": rows}))
    table = format_table(rows, ["system", "experts", "xlm", "f_dual", "pearson", "mae", "rmse", "mcc", "f1_bad", "f1_ok"])
    write_text(ws.path("ablation.txt"), table + "\n")
    print(table)


def cmd_ensemble(ws, args):
    report = P.ensemble(ws.cfg, ws.features("train"), ws.features("dev"), ws.features("test"))
    write_text(ws.path("ensemble.json"), metrics_json(report))
    rows = [dict(s) for s in report["systems"]] + [{"system": "stacked", "test_pearson": report["test_pearson"]}]
    print(format_table(rows, ["system", "pool_mode", "test_pearson"]))


def _load_pairs_lenient(directory):
    """Like ``load_parallel`` but keeps empty lines (as unscoreable pairs)."""
    d = Path(directory)
    if not (d / "src.txt").exists() or not (d / "tgt.txt").exists():
        raise FileNotFoundError(f"{d} must contain src.txt and tgt.txt")
    src = (d / "src.txt").read_text(encoding="utf-8").splitlines()
    tgt = (d / "tgt.txt").read_text(encoding="utf-8").splitlines()
    if len(src) != len(tgt):
        raise ValueError(f"{d}: {len(src)} source lines but {len(tgt)} target lines")
    flags = None
    if (d / "corrupted.txt").exists():
        flags = [line.strip() == "1" for line in (d / "corrupted.txt").read_text(encoding="utf-8").splitlines()]
    return [RawPair(tuple(s.split()), tuple(t.split())) for s, t in zip(src, tgt)], flags


class RawPair:
    __slots__ = ("source", "target", "style_id")

    def __init__(self, source, target, style_id=None):
        self.source, self.target, self.style_id = source, target, style_id


def cmd_filter(ws, args):
    if args.input is None:
        fc = P.make_filtering_corpus(ws.cfg, ws.data().lexicon)
        pairs, flags = fc.pairs, fc.flags
        C.save_parallel(ws.path("filter", "input"), pairs, flags)
    else:
        pairs, flags = _load_pairs_lenient(args.input)
    system = ws.system()
    kept, removed, report, scores = filter_corpus(pairs, system.score_pairs, ws.cfg.drop_fraction, flags)
    for name, subset in (("kept", kept), ("removed", removed)):
        d = ws.path("filter", name)
        d.mkdir(parents=True, exist_ok=True)
        write_text(d / "src.txt", "".join(" ".join(p.source) + "\n" for p in subset))
        write_text(d / "tgt.txt", "".join(" ".join(p.target) + "\n" for p in subset))
    write_text(ws.path("filter", "scores.txt"), "".join(f"{s:.6f}\n" for s in scores))
    write_text(ws.path("filter", "report.json"), metrics_json(report.to_dict()))
    print(metrics_json(report.to_dict()), end="")


def cmd_filtering_experiment(ws, args):
    report = P.filtering_experiment(ws.cfg, ws.system(), ws.data().lexicon)
    write_text(ws.path("filtering.json"), metrics_json(report))
    rows = [{"seed": r["seed"], "bleu_unfiltered": r["bleu_unfiltered"], "bleu_filtered": r["bleu_filtered"]}
            for r in report["runs"]]
    print(format_table(rows, ["seed", "bleu_unfiltered", "bleu_filtered"]))
    print(f"removal precision {report['filter']['precision']}, recall {report['filter']['recall']}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic parallel corpus and QE splits"),
    "train-bpe": (cmd_train_bpe, "train the BPE tokenizer"),
    "train-nmt": (cmd_train_nmt, "train the dual-learning mixture predictor"),
    "train-xlm": (cmd_train_xlm, "pretrain the cross-lingual masked LM"),
    "extract-features": (cmd_extract_features, "compute and cache QE features"),
    "train-estimator": (cmd_train_estimator, "train the Bi-GRU estimator heads"),
    "predict": (cmd_predict, "write sentence and word/gap predictions"),
    "evaluate": (cmd_evaluate, "score predictions against gold labels"),
    "ablate": (cmd_ablate, "run the four-row module ablation"),
    "ensemble": (cmd_ensemble, "stack several sentence estimators"),
    "filter": (cmd_filter, "drop the pairs with the highest predicted HTER"),
    "filtering-experiment": (cmd_filtering_experiment, "compare NMT retraining on filtered and unfiltered corpora"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="dualqe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "extract-features":
            p.add_argument("--splits", nargs="+", choices=SPLITS, default=list(SPLITS))
        elif name == "train-estimator":
            p.add_argument("--task", choices=(*TASKS, "all"), default="all")
        elif name in ("predict", "evaluate"):
            p.add_argument("--split", choices=SPLITS, default="test")
        elif name == "filter":
            p.add_argument("--input", type=Path, help="directory with src.txt/tgt.txt (default: generate a noisy corpus)")
    return parser


def resolve_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if args.config is not None and not args.config.exists():
        raise FileNotFoundError(f"config file {args.config} does not exist")
    return load_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        ws = Workspace(cfg.out, cfg)
        ws.root.mkdir(parents=True, exist_ok=True)
        cfg.write(ws.root)
        start = time.time()
        COMMANDS[args.command][0](ws, args)
        write_text(ws.path("provenance", f"{args.command}.json"), json.dumps({
            "command": args.command,
            "argv": sys.argv[1:] if argv is None else list(argv),
            "version": __version__,
            "numpy": np.__version__,
            "wall_time_s": round(time.time() - start, 3),
            "config": cfg.to_dict(),
        }, indent=2, sort_keys=True) + "\n")
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"dualqe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
