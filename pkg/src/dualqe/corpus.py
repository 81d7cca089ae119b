"""Tokenisation, synthetic parallel data, QE label synthesis and dataset files.

The synthetic translation task: a source sentence is a uniform random word
sequence; its translation under style ``s`` reverses the sentence and maps
every word through a style-specific bijection onto the target lexicon.
Distinct styles give genuinely different valid translations of one source.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .editdist import align, levenshtein

OK, BAD = "OK", "BAD"

PAD, EOS, UNK, MASK, LANG_SRC, LANG_TGT = "<pad>", "</s>", "<unk>", "<mask>", "<lang:src>", "<lang:tgt>"
BASE_SPECIALS = (PAD, EOS, UNK, MASK, LANG_SRC, LANG_TGT)
CONT = "@@"  # suffix marking a subword that does not end its word


def sos_token(z):
    return f"<sos:{z + 1}>"


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# vocabulary and BPE
# ---------------------------------------------------------------------------

class Vocabulary:
    """Dense token <-> id map.

    Ids 0-5 are PAD, EOS, UNK, MASK, LANG_SRC, LANG_TGT; the next ``experts``
    ids are the expert start tokens SOS_1..SOS_K; regular tokens follow in
    the order given.
    """

    def __init__(self, tokens, experts=1):
        if experts < 1:
            raise ValueError("need at least one expert start token")
        specials = list(BASE_SPECIALS) + [sos_token(z) for z in range(experts)]
        self.experts = experts
        self.itos = specials + [t for t in dict.fromkeys(tokens) if t not in specials]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    pad_id = 0
    eos_id = 1
    unk_id = 2
    mask_id = 3
    lang_src_id = 4
    lang_tgt_id = 5

    @property
    def n_special(self):
        return len(BASE_SPECIALS) + self.experts

    def sos_id(self, z):
        if not 0 <= z < self.experts:
            raise ValueError(f"expert {z} out of range [0, {self.experts})")
        return len(BASE_SPECIALS) + z

    @property
    def sos_ids(self):
        return [self.sos_id(z) for z in range(self.experts)]

    def encode(self, tokens):
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def hash(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def to_json(self):
        return {"experts": self.experts, "tokens": self.itos[self.n_special:]}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["tokens"], experts=obj["experts"])


@dataclass
class MergeTable:
    rules: list = field(default_factory=list)

    def __len__(self):
        return len(self.rules)

    def ranks(self):
        return {tuple(r): i for i, r in enumerate(self.rules)}

    def to_json(self):
        return [list(r) for r in self.rules]

    @classmethod
    def from_json(cls, obj):
        return cls([tuple(r) for r in obj])


def train_bpe(word_freq, num_merges):
    """Greedy most-frequent-pair merges; ties go to the lexicographically smallest pair."""
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    words = {tuple(w): c for w, c in word_freq.items() if w}
    rules = []
    for _ in range(num_merges):
        pairs = Counter()
        for symbols, count in words.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += count
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        rules.append(best)
        merged = best[0] + best[1]
        new_words = {}
        for symbols, count in words.items():
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            key = tuple(out)
            new_words[key] = new_words.get(key, 0) + count
        words = new_words
    return MergeTable(rules)


def _apply_merges(word, ranks):
    symbols = list(word)
    while len(symbols) > 1:
        best_rank, best_i = None, None
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_i = r, i
        if best_rank is None:
            break
        pair = (symbols[best_i], symbols[best_i + 1])
        out = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
                out.append(pair[0] + pair[1])
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    return symbols


def segment(word, merges, word_index=0):
    """Split ``word`` into subwords; returns ``(pieces, word_indices)``."""
    if not word:
        raise ValueError("cannot segment an empty word")
    ranks = merges if isinstance(merges, dict) else merges.ranks()
    pieces = _apply_merges(word, ranks)
    return pieces, [word_index] * len(pieces)


class Tokenizer:
    """Word <-> subword-id conversion using a merge table and vocabulary."""

    def __init__(self, merges, vocab):
        self.merges = merges
        self.vocab = vocab
        self._ranks = merges.ranks()
        self._cache = {}

    def pieces(self, word):
        cached = self._cache.get(word)
        if cached is None:
            parts, _ = segment(word, self._ranks)
            cached = [p + CONT for p in parts[:-1]] + [parts[-1]]
            self._cache[word] = cached
        return cached

    def encode(self, words):
        """Returns ``(ids, word_index)`` with one word index per subword."""
        ids, index = [], []
        for w, word in enumerate(words):
            for piece in self.pieces(word):
                ids.append(self.vocab.stoi.get(piece, self.vocab.unk_id))
                index.append(w)
        return ids, index

    def decode(self, ids):
        words, current = [], ""
        for i in ids:
            tok = self.vocab.itos[i]
            if i < self.vocab.n_special:
                continue
            if tok.endswith(CONT):
                current += tok[: -len(CONT)]
            else:
                words.append(current + tok)
                current = ""
        if current:
            words.append(current)
        return words

    def to_json(self):
        return {"merges": self.merges.to_json(), "vocab": self.vocab.to_json()}

    @classmethod
    def from_json(cls, obj):
        return cls(MergeTable.from_json(obj["merges"]), Vocabulary.from_json(obj["vocab"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_tokenizer(sentences, num_merges, experts):
    """Train BPE on the words of ``sentences`` and build a covering vocabulary."""
    freq = Counter(w for sent in sentences for w in sent)
    merges = train_bpe(freq, num_merges)
    ranks = merges.ranks()
    tokens = set()
    for word in freq:
        parts = _apply_merges(word, ranks)
        tokens.update(p + CONT for p in parts[:-1])
        tokens.add(parts[-1])
    for ch in {c for word in freq for c in word}:
        tokens.update((ch, ch + CONT))
    return Tokenizer(merges, Vocabulary(sorted(tokens), experts=experts))


# ---------------------------------------------------------------------------
# synthetic parallel data
# ---------------------------------------------------------------------------

SOURCE_ALPHABET = "abcdefghijklm"
TARGET_ALPHABET = "nopqrstuvwxyz"


@dataclass(frozen=True)
class Lexicon:
    """Source/target word lists plus one bijection per translation style.

    ``tables[s][i]`` is the target-word index that source word ``i`` maps to
    under style ``s``.
    """

    source_words: tuple
    target_words: tuple
    tables: tuple

    @property
    def max_styles(self):
        return len(self.tables)

    def translate(self, source, style):
        index = {w: i for i, w in enumerate(self.source_words)}
        table = self.tables[style]
        return tuple(self.target_words[table[index[w]]] for w in reversed(source))

    def to_json(self):
        return {"source_words": list(self.source_words), "target_words": list(self.target_words),
                "tables": [list(t) for t in self.tables]}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["source_words"]), tuple(obj["target_words"]),
                   tuple(tuple(t) for t in obj["tables"]))


def _random_words(rng, alphabet, n, min_len, max_len):
    words = set()
    while len(words) < n:
        length = int(rng.integers(min_len, max_len + 1))
        words.add("".join(rng.choice(list(alphabet), size=length)))
    return tuple(sorted(words))


def make_lexicon(seed, n_words=24, n_tables=5, min_len=2, max_len=3):
    """Random lexicons and ``n_tables`` mutually disagreeing bijections.

    Table ``s`` is a base permutation rotated by ``s``, so any two styles map
    every source word to different target words.
    """
    if n_tables > n_words:
        raise ValueError("cannot build more disagreeing tables than words")
    rng = _rng(seed)
    src = _random_words(rng, SOURCE_ALPHABET, n_words, min_len, max_len)
    tgt = _random_words(rng, TARGET_ALPHABET, n_words, min_len, max_len)
    base = rng.permutation(n_words)
    tables = tuple(tuple(int(base[(i + s) % n_words]) for i in range(n_words)) for s in range(n_tables))
    return Lexicon(src, tgt, tables)


@dataclass(frozen=True)
class ParallelPair:
    source: tuple
    target: tuple
    style_id: int | None = None

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError("parallel pair sides must be non-empty")


def gen_parallel(seed, n_pairs, lexicon, style_count, min_len=4, max_len=12):
    if style_count < 1 or n_pairs < 1:
        raise ValueError("style_count and n_pairs must be >= 1")
    if style_count > lexicon.max_styles:
        raise ValueError(f"style_count {style_count} exceeds the {lexicon.max_styles} mapping tables")
    rng = _rng(seed)
    n_words = len(lexicon.source_words)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        src = tuple(lexicon.source_words[i] for i in rng.integers(0, n_words, size=length))
        style = int(rng.integers(0, style_count))
        pairs.append(ParallelPair(src, lexicon.translate(src, style), style))
    return pairs


# ---------------------------------------------------------------------------
# QE labels
# ---------------------------------------------------------------------------

def corrupt(pe, sub_rate, del_rate, ins_rate, seed, candidates=None):
    """Corrupt a post-edit into a pseudo machine translation with exact tags.

    Each post-edit word independently becomes a substitution (BAD word), a
    deletion (the gap where it went missing is BAD), an insertion (a BAD
    word emitted before the kept word) or is kept unchanged (OK).
    Returns ``(mt, word_tags, gap_tags)``; ``gap_tags[j]`` is the gap before
    mt word ``j``.
    """
    for r in (sub_rate, del_rate, ins_rate):
        if not 0 <= r < 1:
            raise ValueError("corruption rates must lie in [0, 1)")
    if sub_rate + del_rate + ins_rate >= 1:
        raise ValueError("corruption rates must sum to less than 1")
    rng = _rng(seed)
    pool = sorted(set(candidates if candidates is not None else pe))

    def other(tok):
        choices = [c for c in pool if c != tok]
        return choices[int(rng.integers(len(choices)))] if choices else tok

    while True:
        mt, words, gaps = [], [], [OK]
        for tok in pe:
            u = rng.random()
            if u < sub_rate:
                mt.append(other(tok))
                words.append(BAD)
                gaps.append(OK)
            elif u < sub_rate + del_rate:
                gaps[-1] = BAD
            elif u < sub_rate + del_rate + ins_rate:
                mt.extend((other(tok), tok))
                words.extend((BAD, OK))
                gaps.extend((OK, OK))
            else:
                mt.append(tok)
                words.append(OK)
                gaps.append(OK)
        if mt:
            return mt, words, gaps


def tags_from_alignment(mt, pe):
    """Word and gap tags implied by a minimum edit alignment of mt to pe."""
    words = [OK] * len(mt)
    gaps = [OK] * (len(mt) + 1)
    pos = 0
    for op, i, _ in align(mt, pe):
        if op in ("sub", "ins"):
            words[i] = BAD
        if op == "del":
            gaps[pos] = BAD
        else:
            pos = i + 1
    return words, gaps


def compute_hter(mt, pe):
    """Word-level edit distance over the MT length, clamped to [0, 1]."""
    if len(mt) == 0:
        raise ValueError("HTER needs a non-empty machine translation")
    return min(1.0, max(0.0, levenshtein(mt, pe) / len(mt)))


@dataclass
class QESample:
    source: tuple
    mt: tuple
    word_tags: tuple
    gap_tags: tuple
    hter: float
    pe: tuple | None = None

    def __post_init__(self):
        self.source, self.mt = tuple(self.source), tuple(self.mt)
        self.word_tags, self.gap_tags = tuple(self.word_tags), tuple(self.gap_tags)
        if self.pe is not None:
            self.pe = tuple(self.pe)
        if len(self.word_tags) != len(self.mt):
            raise ValueError(f"{len(self.word_tags)} word tags for {len(self.mt)} mt words")
        if len(self.gap_tags) != len(self.word_tags) + 1:
            raise ValueError(f"{len(self.gap_tags)} gap tags for {len(self.mt)} mt words (need {len(self.mt) + 1})")
        if not 0.0 <= self.hter <= 1.0:
            raise ValueError(f"hter {self.hter} outside [0, 1]")


@dataclass(frozen=True)
class CorruptionConfig:
    sub_rate: float = 0.12
    del_rate: float = 0.04
    ins_rate: float = 0.04
    # per-sentence rate multiplier drawn from U(1 - jitter, 1 + jitter)
    rate_jitter: float = 1.0

    def rates_for(self, rng):
        scale = 1.0 + self.rate_jitter * (2.0 * rng.random() - 1.0) if self.rate_jitter else 1.0
        rates = np.array([self.sub_rate, self.del_rate, self.ins_rate]) * max(scale, 0.0)
        total = rates.sum()
        if total >= 0.95:
            rates *= 0.95 / total
        return tuple(float(r) for r in rates)


@dataclass
class QEDataset:
    train: list
    dev: list
    test: list

    def splits(self):
        return {"train": self.train, "dev": self.dev, "test": self.test}


def make_qe_samples(pairs, config, seed):
    candidates = sorted({w for p in pairs for w in p.target})
    samples = []
    for i, pair in enumerate(pairs):
        rng = np.random.default_rng([int(seed), i])
        sub, dele, ins = config.rates_for(rng)
        mt, words, gaps = corrupt(pair.target, sub, dele, ins, rng, candidates)
        samples.append(QESample(pair.source, mt, words, gaps, round(compute_hter(mt, pair.target), 4), pair.target))
    return samples


def make_qe_dataset(pairs, config, seed, proportions=(0.7, 0.15, 0.15)):
    if not pairs:
        raise ValueError("need at least one pair")
    samples = make_qe_samples(pairs, config, seed)
    n = len(samples)
    n_train = int(round(proportions[0] * n))
    n_dev = int(round(proportions[1] * n))
    return QEDataset(samples[:n_train], samples[n_train:n_train + n_dev], samples[n_train + n_dev:])


def dataset_statistics(samples):
    """Per-split summary mirroring a WMT QE data card."""
    if not samples:
        return {"num_samples": 0}
    hter = np.array([s.hter for s in samples])
    bad = np.array([s.word_tags.count(BAD) / len(s.word_tags) for s in samples])
    return {
        "num_samples": len(samples),
        "avg_src_len": float(np.mean([len(s.source) for s in samples])),
        "avg_tgt_len": float(np.mean([len(s.mt) for s in samples])),
        "avg_hter": float(hter.mean()),
        "min_hter": float(hter.min()),
        "max_hter": float(hter.max()),
        "avg_bad_ratio": float(bad.mean()),
        "min_bad_ratio": float(bad.min()),
        "max_bad_ratio": float(bad.max()),
    }


def corrupt_corpus(pairs, fraction, config, seed):
    """Replace the targets of a random ``fraction`` of pairs with corrupted ones.

    Returns the new pairs and a boolean flag per pair (True = corrupted).
    """
    rng = np.random.default_rng(seed)
    n = len(pairs)
    chosen = set(rng.choice(n, size=int(round(fraction * n)), replace=False).tolist())
    candidates = sorted({w for p in pairs for w in p.target})
    out, flags = [], []
    for i, pair in enumerate(pairs):
        if i in chosen:
            srng = np.random.default_rng([int(seed), i])
            mt = pair.target
            while tuple(mt) == tuple(pair.target):  # a flagged pair must actually differ
                mt, _, _ = corrupt(pair.target, config.sub_rate, config.del_rate, config.ins_rate, srng, candidates)
            out.append(ParallelPair(pair.source, tuple(mt), pair.style_id))
            flags.append(True)
        else:
            out.append(pair)
            flags.append(False)
    return out, flags


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:  # universal newlines fold CRLF
        return [line.rstrip("\n") for line in fh]


def save_qe_files(directory, samples):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_lines(d / "src.txt", (" ".join(s.source) for s in samples))
    _write_lines(d / "mt.txt", (" ".join(s.mt) for s in samples))
    if samples and all(s.pe is not None for s in samples):
        _write_lines(d / "pe.txt", (" ".join(s.pe) for s in samples))
    elif (d / "pe.txt").exists():
        os.remove(d / "pe.txt")
    _write_lines(d / "hter.txt", (f"{s.hter:.4f}" for s in samples))
    _write_lines(d / "word_tags.txt", (" ".join(s.word_tags) for s in samples))
    _write_lines(d / "gap_tags.txt", (" ".join(s.gap_tags) for s in samples))


def load_qe_files(directory):
    d = Path(directory)
    src = _read_lines(d / "src.txt")
    mt = _read_lines(d / "mt.txt")
    hter = _read_lines(d / "hter.txt")
    wtags = _read_lines(d / "word_tags.txt")
    gtags = _read_lines(d / "gap_tags.txt")
    pe = _read_lines(d / "pe.txt") if (d / "pe.txt").exists() else None
    counts = {"src": len(src), "mt": len(mt), "hter": len(hter), "word_tags": len(wtags), "gap_tags": len(gtags)}
    if pe is not None:
        counts["pe"] = len(pe)
    if len(set(counts.values())) != 1:
        raise ValueError(f"line counts differ across files in {d}: {counts}")
    samples = []
    for n in range(len(mt)):
        line = n + 1
        m = mt[n].split()
        w = wtags[n].split()
        g = gtags[n].split()
        if len(w) != len(m):
            raise ValueError(f"line {line}: {len(w)} word tags for {len(m)} mt tokens")
        if len(g) != len(m) + 1:
            raise ValueError(f"line {line}: {len(g)} gap tags for {len(m)} mt tokens (need {len(m) + 1})")
        bad = set(w + g) - {OK, BAD}
        if bad:
            raise ValueError(f"line {line}: unknown tags {sorted(bad)}")
        try:
            score = float(hter[n])
        except ValueError:
            raise ValueError(f"line {line}: bad hter value {hter[n]!r}") from None
        samples.append(QESample(tuple(src[n].split()), tuple(m), tuple(w), tuple(g), score,
                                tuple(pe[n].split()) if pe is not None else None))
    return samples


def save_parallel(directory, pairs, flags=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_lines(d / "src.txt", (" ".join(p.source) for p in pairs))
    _write_lines(d / "tgt.txt", (" ".join(p.target) for p in pairs))
    _write_lines(d / "style.txt", ("-" if p.style_id is None else str(p.style_id) for p in pairs))
    if flags is not None:
        _write_lines(d / "corrupted.txt", ("1" if f else "0" for f in flags))


def load_parallel(directory):
    d = Path(directory)
    src = _read_lines(d / "src.txt")
    tgt = _read_lines(d / "tgt.txt")
    if len(src) != len(tgt):
        raise ValueError(f"{d}: {len(src)} source lines but {len(tgt)} target lines")
    styles = _read_lines(d / "style.txt") if (d / "style.txt").exists() else ["-"] * len(src)
    pairs = [ParallelPair(tuple(s.split()), tuple(t.split()), None if st == "-" else int(st))
             for s, t, st in zip(src, tgt, styles)]
    flags = None
    if (d / "corrupted.txt").exists():
        flags = [line == "1" for line in _read_lines(d / "corrupted.txt")]
    return pairs, flags
