"""Stage functions wiring data, predictors, features and estimators together.

Every stage is a plain function of a ``RunConfig`` (plus the artifacts it
consumes), so the CLI, the ablation runner and the tests share one code path.
"""

from __future__ import annotations

import itertools
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corpus as C
from .checkpoint import load_arrays, load_checkpoint, save_arrays, save_checkpoint
from .estimator import (
    TASKS,
    EstimatorConfig,
    EstimatorExample,
    EstimatorModel,
    QEPrediction,
    _prepare,
    predict_task,
    stack_ensemble,
    train_estimator,
)
from .evaluation import combined_tags, corpus_bleu, filter_corpus, mae_rmse, pearson, word_eval
from .features import assemble_nmt_features_batch, assemble_xlm_features_batch, feature_width
from .nmt import PRIMAL, DualNMTPredictor, NMTConfig, TrainSchedule, train_predictor
from .xlm import XLMConfig, XLMEncoder, XLMSchedule, pretrain_xlm

log = logging.getLogger(__name__)


def derive_seed(base, tag):
    """Independent, reproducible seed for one stage of a run."""
    return int(np.random.SeedSequence([int(base), zlib.crc32(tag.encode())]).generate_state(1)[0])


# -- data --------------------------------------------------------------------

@dataclass
class SyntheticData:
    lexicon: C.Lexicon
    parallel: list
    qe: C.QEDataset


def corruption_config(cfg):
    return C.CorruptionConfig(cfg.sub_rate, cfg.del_rate, cfg.ins_rate, cfg.rate_jitter)


def generate_data(cfg):
    lexicon = C.make_lexicon(derive_seed(cfg.seed, "lexicon"), cfg.lexicon_words, cfg.lexicon_tables)
    parallel = C.gen_parallel(derive_seed(cfg.seed, "parallel"), cfg.n_parallel, lexicon, cfg.styles,
                              cfg.min_len, cfg.max_len)
    qe_pairs = C.gen_parallel(derive_seed(cfg.seed, "qe-pairs"), cfg.n_qe, lexicon, cfg.styles,
                              cfg.min_len, cfg.max_len)
    qe = C.make_qe_dataset(qe_pairs, corruption_config(cfg), derive_seed(cfg.seed, "qe-labels"), tuple(cfg.splits))
    return SyntheticData(lexicon, parallel, qe)


def save_data(directory, data):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "lexicon.json").write_text(json.dumps(data.lexicon.to_json(), indent=1), encoding="utf-8")
    C.save_parallel(d / "parallel", data.parallel)
    for name, samples in data.qe.splits().items():
        C.save_qe_files(d / "qe" / name, samples)
    stats = {name: C.dataset_statistics(s) for name, s in data.qe.splits().items()}
    (d / "statistics.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_data(directory):
    d = Path(directory)
    lexicon = C.Lexicon.from_json(json.loads((d / "lexicon.json").read_text(encoding="utf-8")))
    parallel, _ = C.load_parallel(d / "parallel")
    splits = {name: C.load_qe_files(d / "qe" / name) for name in ("train", "dev", "test")}
    return SyntheticData(lexicon, parallel, C.QEDataset(**splits))


def train_tokenizer(cfg, data):
    sentences = [p.source for p in data.parallel] + [p.target for p in data.parallel]
    for samples in data.qe.splits().values():
        for s in samples:
            sentences.extend([s.source, s.mt] + ([s.pe] if s.pe is not None else []))
    return C.build_tokenizer(sentences, cfg.bpe_merges, experts=max(cfg.experts, cfg.filter_experts, 1))


def encode_pairs(tokenizer, pairs):
    src = [tokenizer.encode(p.source)[0] for p in pairs]
    tgt = [tokenizer.encode(p.target)[0] for p in pairs]
    return src, tgt


# -- predictors ----------------------------------------------------------------

def nmt_config(cfg, tokenizer, experts=None):
    return NMTConfig(len(tokenizer.vocab), cfg.d_model, cfg.heads, cfg.layers, cfg.ff_dim,
                     cfg.experts if experts is None else experts)


def train_nmt(cfg, tokenizer, pairs, experts=None, dual=None, steps=None, seed_tag="nmt", callback=None, every=250):
    predictor = DualNMTPredictor(nmt_config(cfg, tokenizer, experts), tokenizer.vocab, derive_seed(cfg.seed, seed_tag))
    src, tgt = encode_pairs(tokenizer, pairs)
    schedule = TrainSchedule(steps=cfg.nmt_steps if steps is None else steps, batch_size=cfg.nmt_batch, lr=cfg.nmt_lr,
                             warmup=cfg.warmup, clip_norm=cfg.clip_norm, beta1=cfg.beta1, beta2=cfg.beta2)
    train_predictor(predictor, src, tgt, schedule, derive_seed(cfg.seed, seed_tag + "-batches"),
                    dual=cfg.dual if dual is None else dual, callback=callback, every=every)
    return predictor


def train_xlm(cfg, tokenizer, pairs):
    model = XLMEncoder(XLMConfig(len(tokenizer.vocab), cfg.d_model, cfg.heads, cfg.xlm_layers, cfg.ff_dim),
                       tokenizer.vocab, derive_seed(cfg.seed, "xlm"))
    src, tgt = encode_pairs(tokenizer, pairs)
    schedule = XLMSchedule(steps=cfg.xlm_steps, batch_size=cfg.xlm_batch, lr=cfg.xlm_lr, warmup=cfg.warmup,
                           clip_norm=cfg.clip_norm, beta1=cfg.beta1, beta2=cfg.beta2, tlm_mix=cfg.tlm_mix,
                           select_rate=cfg.select_rate)
    pretrain_xlm(model, src, tgt, schedule, derive_seed(cfg.seed, "xlm-batches"))
    return model


def save_nmt(directory, predictor):
    save_checkpoint(directory, predictor, "nmt", predictor.hyperparameters(), predictor.vocab.hash())


def load_nmt(directory, tokenizer):
    arrays, manifest = load_arrays(directory)
    del arrays
    predictor = DualNMTPredictor(NMTConfig(**manifest["hyperparameters"]), tokenizer.vocab)
    load_checkpoint(directory, predictor, kind="nmt", vocab_hash=tokenizer.vocab.hash())
    return predictor


def save_xlm(directory, model):
    save_checkpoint(directory, model, "xlm", model.hyperparameters(), model.vocab.hash())


def load_xlm(directory, tokenizer):
    _, manifest = load_arrays(directory)
    model = XLMEncoder(XLMConfig(**manifest["hyperparameters"]), tokenizer.vocab)
    load_checkpoint(directory, model, kind="xlm", vocab_hash=tokenizer.vocab.hash())
    return model


# -- features ----------------------------------------------------------------

def _binary(tags):
    return np.array([t == C.BAD for t in tags], dtype=np.int64)


def build_examples(tokenizer, predictor, xlm, sources, mts, samples=None, use_f_dual=True):
    """Estimator inputs for (source words, mt words) pairs; labels come from ``samples``."""
    src_ids, mt_ids, word_index = [], [], []
    for s, m in zip(sources, mts):
        src_ids.append(tokenizer.encode(s)[0])
        ids, wi = tokenizer.encode(m)
        mt_ids.append(ids)
        word_index.append(wi)
    nmt = assemble_nmt_features_batch(predictor, src_ids, mt_ids, word_index, use_dual=use_f_dual)
    xlm_feats = assemble_xlm_features_batch(xlm, src_ids, mt_ids, predictor.experts, word_index) if xlm else None
    examples = []
    for i, f in enumerate(nmt):
        ex = EstimatorExample(f.values, None if xlm_feats is None else xlm_feats[i].values, np.asarray(word_index[i]))
        if samples is not None:
            s = samples[i]
            ex.hter = s.hter
            ex.word_tags = _binary(s.word_tags)
            ex.gap_tags = _binary(s.gap_tags)
        examples.append(ex)
    return examples


def examples_for_samples(tokenizer, predictor, xlm, samples, use_f_dual=True):
    return build_examples(tokenizer, predictor, xlm, [s.source for s in samples], [s.mt for s in samples],
                          samples, use_f_dual)


def save_features(directory, examples, meta=None):
    arrays = {}
    for i, ex in enumerate(examples):
        arrays[f"{i}/nmt"] = ex.nmt
        if ex.xlm is not None:
            arrays[f"{i}/xlm"] = ex.xlm
        arrays[f"{i}/word_index"] = ex.word_index
        arrays[f"{i}/hter"] = np.array([ex.hter])
        arrays[f"{i}/word_tags"] = ex.word_tags
        arrays[f"{i}/gap_tags"] = ex.gap_tags
    save_arrays(directory, arrays, dict(meta or {}, kind="features", records=len(examples)))


def load_features(directory):
    arrays, manifest = load_arrays(directory)
    if manifest.get("kind") != "features":
        raise ValueError(f"{directory} is not a feature cache")
    out = []
    for i in range(manifest["records"]):
        out.append(EstimatorExample(
            arrays[f"{i}/nmt"], arrays.get(f"{i}/xlm"), arrays[f"{i}/word_index"].astype(np.int64),
            float(arrays[f"{i}/hter"][0]), arrays[f"{i}/word_tags"].astype(np.int64),
            arrays[f"{i}/gap_tags"].astype(np.int64)))
    return out, manifest


# -- estimators ----------------------------------------------------------------

def estimator_config(cfg, input_dim, use_xlm=True):
    w_nmt, w_xlm = (cfg.w_nmt, cfg.w_xlm) if use_xlm else (1.0, 0.0)
    return EstimatorConfig(input_dim, cfg.hidden, cfg.head_hidden, cfg.pool_mode, cfg.top_k, w_nmt, w_xlm)


def train_estimators(cfg, train, dev, tasks=TASKS, seed_tag="estimator", pool_mode=None):
    use_xlm = train[0].xlm is not None
    models, reports = {}, {}
    for task in tasks:
        ecfg = estimator_config(cfg, train[0].nmt.shape[1], use_xlm)
        if pool_mode is not None:
            ecfg.pool_mode = pool_mode
        model = EstimatorModel(ecfg, derive_seed(cfg.seed, f"{seed_tag}-{task}"))
        reports[task] = train_estimator(model, train, task, epochs=cfg.est_epochs, lr=cfg.est_lr,
                                        batch_size=cfg.est_batch, seed=derive_seed(cfg.seed, f"{seed_tag}-{task}-batches"),
                                        dev_examples=dev, bad_weight=cfg.bad_weight, use_xlm=use_xlm)
        models[task] = model
    return models, reports


def save_estimator(directory, model, task, vocab_hash):
    """Only the GRU and ``task``'s head are stored, so a checkpoint serves exactly one task."""
    hidden, out = model.head(task)
    arrays = {f"gru.{n}": p.data for n, p in model.gru.named_parameters()}
    arrays.update({f"{task}_hidden.{n}": p.data for n, p in hidden.named_parameters()})
    arrays.update({f"{task}_out.{n}": p.data for n, p in out.named_parameters()})
    arrays.update(model.extra_arrays())
    save_arrays(directory, arrays, {"kind": "estimator", "task": task, "hyperparameters": model.hyperparameters(),
                                    "vocab_hash": vocab_hash})


def load_estimator(directory, task, vocab_hash=None):
    arrays, manifest = load_arrays(directory)
    if manifest.get("kind") != "estimator":
        raise ValueError(f"{directory} is not an estimator checkpoint")
    if vocab_hash is not None and manifest.get("vocab_hash") != vocab_hash:
        raise ValueError("vocabulary hash mismatch between estimator checkpoint and tokenizer")
    model = EstimatorModel(EstimatorConfig(**manifest["hyperparameters"]))
    hidden, out = model.head(task)
    wanted = {f"gru.{n}": p for n, p in model.gru.named_parameters()}
    wanted.update({f"{task}_hidden.{n}": p for n, p in hidden.named_parameters()})
    wanted.update({f"{task}_out.{n}": p for n, p in out.named_parameters()})
    for name, p in wanted.items():
        if name not in arrays:
            raise ValueError(f"checkpoint has no tensor {name}: it was saved for the {manifest.get('task')!r} task, "
                             f"not {task!r}")
        if tuple(arrays[name].shape) != p.shape:
            raise ValueError(f"tensor {name}: checkpoint shape {arrays[name].shape} does not match head shape {p.shape}")
    for name, p in wanted.items():
        p.data = arrays[name].astype(p.dtype)
    model.load_extra_arrays(arrays)
    return model


# -- evaluation ----------------------------------------------------------------

def predict_all(models, examples, use_xlm=True):
    """Run whichever task models are present; returns {task: predictions}."""
    return {task: predict_task(m, task, _prepare(examples, task, use_xlm)) for task, m in models.items()}


def qe_predictions(models, examples, threshold=0.5, use_xlm=True):
    preds = predict_all(models, examples, use_xlm)
    out = []
    for i, ex in enumerate(examples):
        n = ex.n_words
        words = preds["word"][i] if "word" in preds else np.zeros(n)
        gaps = preds["gap"][i] if "gap" in preds else np.zeros(n + 1)
        hter = preds["sentence"][i] if "sentence" in preds else 0.0
        out.append(QEPrediction(hter, np.asarray(words), np.asarray(gaps), threshold))
    return out


def evaluate_predictions(examples, predictions):
    """Sentence and combined word+gap metrics (plus word-only / gap-only)."""
    gold = np.array([ex.hter for ex in examples])
    hat = np.array([p.hter_hat for p in predictions])
    metrics = {}
    try:
        metrics["pearson"] = pearson(hat, gold)
    except ValueError:
        metrics["pearson"] = float("nan")
    metrics["mae"], metrics["rmse"] = mae_rmse(hat, gold)
    gold_comb = combined_tags([ex.word_tags for ex in examples], [ex.gap_tags for ex in examples])
    pred_comb = combined_tags([p.word_tags for p in predictions], [p.gap_tags for p in predictions])
    for name, g, p in (
        ("combined", gold_comb, pred_comb),
        ("word", np.concatenate([ex.word_tags for ex in examples]), np.concatenate([p.word_tags for p in predictions])),
        ("gap", np.concatenate([ex.gap_tags for ex in examples]), np.concatenate([p.gap_tags for p in predictions])),
    ):
        rep = word_eval(g, p)
        metrics[f"{name}_mcc"] = rep.mcc
        metrics[f"{name}_f1_bad"] = rep.f1_bad
        metrics[f"{name}_f1_ok"] = rep.f1_ok
    return metrics


# -- full QE system ------------------------------------------------------------

@dataclass
class QESystem:
    tokenizer: C.Tokenizer
    predictor: DualNMTPredictor
    xlm: XLMEncoder | None
    estimators: dict = field(default_factory=dict)
    use_f_dual: bool = True
    threshold: float = 0.5

    def examples(self, samples):
        return examples_for_samples(self.tokenizer, self.predictor, self.xlm, samples, self.use_f_dual)

    def predict(self, samples):
        return qe_predictions(self.estimators, self.examples(samples), self.threshold, self.xlm is not None)

    def score_pairs(self, pairs):
        """Sentence HTER estimates treating each target as the MT output."""
        ex = build_examples(self.tokenizer, self.predictor, self.xlm, [p.source for p in pairs],
                            [p.target for p in pairs], use_f_dual=self.use_f_dual)
        return np.asarray(predict_task(self.estimators["sentence"], "sentence",
                                       _prepare(ex, "sentence", self.xlm is not None)))


def build_system(cfg, data, tokenizer=None, tasks=TASKS, predictor=None, xlm=None):
    """Train every component of the QE system from synthetic data."""
    tokenizer = tokenizer or train_tokenizer(cfg, data)
    predictor = predictor or train_nmt(cfg, tokenizer, data.parallel)
    if cfg.use_xlm and xlm is None:
        xlm = train_xlm(cfg, tokenizer, data.parallel)
    system = QESystem(tokenizer, predictor, xlm if cfg.use_xlm else None, use_f_dual=cfg.use_f_dual,
                      threshold=cfg.tag_threshold)
    train = system.examples(data.qe.train)
    dev = system.examples(data.qe.dev)
    system.estimators, reports = train_estimators(cfg, train, dev, tasks)
    return system, {"train": train, "dev": dev}, reports


# -- ablation ----------------------------------------------------------------

ABLATION_ROWS = ("NMT-only", "+XLM", "+mixture&dual", "+f_dual")


def ablation(cfg, data, tokenizer=None):
    """Four configurations, each adding one module to the previous row."""
    tokenizer = tokenizer or train_tokenizer(cfg, data)
    plain = train_nmt(cfg, tokenizer, data.parallel, experts=1, dual=False, seed_tag="ablation-nmt")
    full = train_nmt(cfg, tokenizer, data.parallel)
    xlm = train_xlm(cfg, tokenizer, data.parallel)
    settings = {
        "NMT-only": (plain, None, False),
        "+XLM": (plain, xlm, False),
        "+mixture&dual": (full, xlm, False),
        "+f_dual": (full, xlm, True),
    }
    rows = []
    for name in ABLATION_ROWS:
        predictor, x, f_dual = settings[name]
        system = QESystem(tokenizer, predictor, x, use_f_dual=f_dual, threshold=cfg.tag_threshold)
        train, dev = system.examples(data.qe.train), system.examples(data.qe.dev)
        test = system.examples(data.qe.test)
        system.estimators, _ = train_estimators(cfg, train, dev, seed_tag=f"ablation-{name}")
        m = evaluate_predictions(test, qe_predictions(system.estimators, test, cfg.tag_threshold, x is not None))
        rows.append({"system": name, "experts": predictor.experts, "xlm": x is not None, "f_dual": f_dual,
                     "width": feature_width(predictor.experts, predictor.config.d_model),
                     "pearson": m["pearson"], "mae": m["mae"], "rmse": m["rmse"],
                     "mcc": m["combined_mcc"], "f1_bad": m["combined_f1_bad"], "f1_ok": m["combined_f1_ok"]})
    return rows


# -- stacking ensemble -----------------------------------------------------------

def ensemble(cfg, train, dev, test):
    """Stack several sentence estimators (varying seed and pooling mode).

    Each system is trained on ``train``; its dev predictions are therefore
    out-of-sample.  The ridge stacker is cross-validated on dev and scored
    on test.
    """
    use_xlm = train[0].xlm is not None
    dev_cols, test_cols, systems = [], [], []
    for j in range(cfg.ensemble_systems):
        mode = "mean" if j % 2 == 0 else "max"
        models, _ = train_estimators(cfg, train, dev, ("sentence",), seed_tag=f"ensemble-{j}", pool_mode=mode)
        m = models["sentence"]
        dev_cols.append(predict_task(m, "sentence", _prepare(dev, "sentence", use_xlm)))
        test_cols.append(predict_task(m, "sentence", _prepare(test, "sentence", use_xlm)))
        systems.append({"system": f"estimator-{j}", "pool_mode": mode})
    dev_gold = np.array([e.hter for e in dev])
    test_gold = np.array([e.hter for e in test])
    stack = stack_ensemble(np.array(dev_cols).T, dev_gold, cfg.ensemble_folds, cfg.ridge_lambda,
                           derive_seed(cfg.seed, "ensemble-folds"))
    for s, col in zip(systems, test_cols):
        s["test_pearson"] = pearson(np.array(col), test_gold)
    stacked = np.clip(stack.predict(np.array(test_cols).T), 0.0, 1.0)
    return {
        "systems": systems,
        "weights": stack.weights.tolist(),
        "intercept": stack.intercept,
        "dev_cv_pearson": pearson(stack.cv_predictions, dev_gold),
        "test_pearson": pearson(stacked, test_gold),
    }


# -- expert specialization ----------------------------------------------------------

def expert_specialization(predictor, tokenizer, lexicon, sources, styles, max_len=40):
    """Match experts to generator styles by greedy-decoding held-out sources.

    ``accuracy[z][s]`` is the fraction of sources for which expert ``z``'s
    output equals the style-``s`` translation exactly.  The expert-to-style
    assignment maximises total accuracy over all one-to-one matchings.
    """
    src_ids = [tokenizer.encode(s)[0] for s in sources]
    hyps = []
    for z in range(predictor.experts):
        hyps.append([tuple(tokenizer.decode(t)) for t, _ in predictor.greedy_decode_batch(src_ids, z, max_len)])
    refs = [[lexicon.translate(s, style) for s in sources] for style in range(styles)]
    acc = np.array([[np.mean([h == r for h, r in zip(hyps[z], refs[s])]) for s in range(styles)]
                    for z in range(predictor.experts)])
    k = min(predictor.experts, styles)
    best, match = -1.0, None
    for experts in itertools.permutations(range(predictor.experts), k):
        total = sum(acc[z, s] for s, z in enumerate(experts))
        if total > best:
            best, match = total, {int(z): s for s, z in enumerate(experts)}
    distinct = np.mean([len({hyps[z][i] for z in range(predictor.experts)}) == predictor.experts
                        for i in range(len(sources))])
    return {"accuracy": acc.tolist(), "matching": match,
            "matched_accuracy": {z: float(acc[z, s]) for z, s in match.items()},
            "distinct_fraction": float(distinct)}


# -- corpus filtering ----------------------------------------------------------------

@dataclass
class FilteringCorpus:
    pairs: list
    flags: list
    dev: list


def make_filtering_corpus(cfg, lexicon):
    clean = C.gen_parallel(derive_seed(cfg.seed, "filter-pairs"), cfg.filter_pairs, lexicon, cfg.filter_styles,
                           cfg.min_len, cfg.max_len)
    noisy, flags = C.corrupt_corpus(clean, cfg.corrupt_fraction, C.CorruptionConfig(cfg.sub_rate, cfg.del_rate, cfg.ins_rate),
                                    derive_seed(cfg.seed, "filter-corrupt"))
    dev = C.gen_parallel(derive_seed(cfg.seed, "filter-dev"), cfg.filter_dev_pairs, lexicon, cfg.filter_styles,
                         cfg.min_len, cfg.max_len)
    return FilteringCorpus(noisy, flags, dev)


def bleu_of(predictor, tokenizer, dev_pairs, max_len=40):
    """Corpus BLEU of greedy output on ``dev_pairs``; with several experts the best expert is reported."""
    src, _ = encode_pairs(tokenizer, dev_pairs)
    refs = [list(p.target) for p in dev_pairs]
    best = 0.0
    for z in range(predictor.experts):
        hyps = [tokenizer.decode(toks) for toks, _ in predictor.greedy_decode_batch(src, z, max_len, PRIMAL)]
        best = max(best, corpus_bleu(hyps, refs))
    return best


def retrain_bleu(cfg, tokenizer, pairs, dev, seed):
    """Train a fresh predictor on ``pairs``; mean BLEU of its best checkpoints."""
    scores = []

    def callback(step, predictor):
        scores.append(bleu_of(predictor, tokenizer, dev))

    run_cfg = _with(cfg, seed=seed)
    train_nmt(run_cfg, tokenizer, pairs, experts=cfg.filter_experts, steps=cfg.filter_nmt_steps,
              seed_tag="filter-nmt", callback=callback, every=cfg.filter_eval_every)
    top = sorted(scores, reverse=True)[: cfg.bleu_checkpoints]
    return float(np.mean(top)), scores


def _with(cfg, **changes):
    return replace(cfg, **changes)


def filtering_experiment(cfg, system, lexicon, seeds=None):
    """Filter a noisy corpus with the QE system and compare retraining BLEU."""
    fc = make_filtering_corpus(cfg, lexicon)
    kept, removed, report, scores = filter_corpus(fc.pairs, system.score_pairs, cfg.drop_fraction, fc.flags)
    runs = []
    for seed in (cfg.filter_seeds if seeds is None else seeds):
        unf, unf_curve = retrain_bleu(cfg, system.tokenizer, fc.pairs, fc.dev, seed)
        fil, fil_curve = retrain_bleu(cfg, system.tokenizer, kept, fc.dev, seed)
        runs.append({"seed": seed, "bleu_unfiltered": unf, "bleu_filtered": fil,
                     "curve_unfiltered": unf_curve, "curve_filtered": fil_curve})
        log.info("filtering seed %s: unfiltered %.4f filtered %.4f", seed, unf, fil)
    return {
        "filter": report.to_dict(),
        "runs": runs,
        "filtered_wins": sum(r["bleu_filtered"] >= r["bleu_unfiltered"] for r in runs),
    }
