"""Synthetic multilingual corpora, vocabulary, sampling, and batching.

Languages are deterministic, invertible transforms of a small stochastic
base grammar, so every parallel pair carries a known word-level alignment.
The tokenizer is whitespace splitting over this closed lexicon; a single
vocabulary is shared across all languages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

RESERVED_TOKENS = ["<pad>", "<mask>", "<bos>", "<eos>", "<sep>"]

LANGUAGE_KINDS = ("base", "permuted", "reversed", "affix")


class Vocab:
    """Token/id bijection with fixed reserved ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = list(RESERVED_TOKENS)
        seen = set(self.id_to_token)
        for tok in tokens:
            if tok in seen:
                raise ValueError(f"duplicate token {tok!r}")
            seen.add(tok)
            self.id_to_token.append(tok)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.token_to_id[w] for w in words]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tokens[:len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError("vocab file does not start with the reserved tokens")
        return cls(tokens[len(RESERVED_TOKENS):])


@dataclass(frozen=True)
class LanguageSpec:
    lang: str
    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in LANGUAGE_KINDS:
            raise ValueError(f"unknown language kind {self.kind!r}")


@dataclass
class CorpusStats:
    counts: Dict[str, int]
    alpha: float

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if any(m <= 0 for m in self.counts.values()):
            raise ValueError("all language counts must be positive")


def language_sampling_probs(stats: CorpusStats) -> np.ndarray:
    """p_j = m_j^alpha / sum_k m_k^alpha, over the languages in stats order."""
    m = np.array(list(stats.counts.values()), dtype=np.float64)
    if np.any(m <= 0):
        raise ValueError("all language counts must be positive")
    weights = m ** stats.alpha
    return weights / weights.sum()


class ToyGrammar:
    """Clause grammar whose function words agree with content-word features.

    Every sentence reads subject-NP, particle, verb, object-NP, where a noun
    phrase is determiner, adjective, noun, classifier. The determiner surface
    is fixed by the noun's gender, the classifier by the noun's class, and
    the particle by the verb's class; adjectives are restricted per noun and
    argument nouns per verb. Function words (the anchors) keep the same
    surface in every language while content words are relexified, so masked
    anchors are a prediction target shared across languages and anchor
    agreement is only checkable against the neighbouring content words.
    """

    def __init__(self, seed: int = 9):
        rng = np.random.default_rng(seed)
        self.dets = ["da", "di", "du", "do"]
        self.clfs = ["xa", "xi", "xu", "xo"]
        self.parts = ["ko", "ku", "ke", "ka"]
        self.adjs = [f"aj{i}" for i in range(10)]
        self.nouns = [f"no{i}" for i in range(20)]
        self.verbs = [f"vb{i}" for i in range(12)]
        self.anchors = self.dets + self.clfs + self.parts
        self.words = self.adjs + self.nouns + self.verbs
        self.gender = {n: int(rng.integers(4)) for n in range(len(self.nouns))}
        self.noun_class = {n: int(rng.integers(4)) for n in range(len(self.nouns))}
        self.verb_class = {v: int(rng.integers(4)) for v in range(len(self.verbs))}
        self.noun_adjs = {n: rng.choice(len(self.adjs), size=3, replace=False)
                          for n in range(len(self.nouns))}
        # subject and object sets overlap on a 5-noun core, with two
        # role-exclusive extras each, so argument roles carry information
        self.verb_subj: Dict[int, np.ndarray] = {}
        self.verb_obj: Dict[int, np.ndarray] = {}
        for v in range(len(self.verbs)):
            core = rng.choice(len(self.nouns), size=5, replace=False)
            rest = [n for n in range(len(self.nouns)) if n not in core]
            extra = rng.choice(len(rest), size=4, replace=False)
            self.verb_subj[v] = np.concatenate(
                [core, [rest[extra[0]], rest[extra[1]]]])
            self.verb_obj[v] = np.concatenate(
                [core, [rest[extra[2]], rest[extra[3]]]])

    def noun_phrase(self, noun: int, adj: int) -> List[str]:
        return [self.dets[self.gender[noun]], self.adjs[adj],
                self.nouns[noun], self.clfs[self.noun_class[noun]]]

    def sample_sentence(self, rng: np.random.Generator) -> List[str]:
        v = int(rng.integers(len(self.verbs)))
        subj = int(self.verb_subj[v][rng.integers(7)])
        obj = int(self.verb_obj[v][rng.integers(7)])
        while obj == subj:
            obj = int(self.verb_obj[v][rng.integers(7)])
        sa = int(self.noun_adjs[subj][rng.integers(3)])
        oa = int(self.noun_adjs[obj][rng.integers(3)])
        return (self.noun_phrase(subj, sa)
                + [self.parts[self.verb_class[v]], self.verbs[v]]
                + self.noun_phrase(obj, oa))


def token_map(spec: LanguageSpec, grammar: ToyGrammar) -> Dict[str, str]:
    """Deterministic base-word -> language-surface mapping.

    Anchors keep their surface in every language; only content words are
    relexified or decorated.
    """
    keep = {w: w for w in grammar.anchors}
    if spec.kind == "base":
        return {**keep, **{w: w for w in grammar.words}}
    if spec.kind == "permuted":
        perm = np.random.default_rng(spec.seed).permutation(len(grammar.words))
        return {**keep, **{w: f"{spec.lang}:{grammar.words[perm[i]]}"
                           for i, w in enumerate(grammar.words)}}
    if spec.kind == "reversed":
        return {**keep, **{w: f"{spec.lang}:{w}" for w in grammar.words}}
    return {**keep, **{w: f"{spec.lang}:{w}~ka" for w in grammar.words}}  # affix


def transform_sentence(sentence: List[str], spec: LanguageSpec,
                       grammar: ToyGrammar) -> List[str]:
    mapped = [token_map(spec, grammar)[w] for w in sentence]
    return mapped[::-1] if spec.kind == "reversed" else mapped


def invert_sentence(sentence: List[str], spec: LanguageSpec,
                    grammar: ToyGrammar) -> List[str]:
    inverse = {v: k for k, v in token_map(spec, grammar).items()}
    words = sentence[::-1] if spec.kind == "reversed" else sentence
    return [inverse[w] for w in words]


def gold_alignment(spec: LanguageSpec, length: int) -> List[Tuple[int, int]]:
    """Known base-index <-> transformed-index pairs for one sentence."""
    if spec.kind == "reversed":
        return [(i, length - 1 - i) for i in range(length)]
    return [(i, i) for i in range(length)]


@dataclass
class Corpus:
    vocab: Vocab
    specs: List[LanguageSpec]
    mono: Dict[str, List[List[int]]]
    parallel: Dict[str, List[Tuple[List[int], List[int]]]]   # keyed by non-base lang

    @property
    def base_lang(self) -> str:
        return next(s.lang for s in self.specs if s.kind == "base")


def build_vocab(specs: Sequence[LanguageSpec],
                grammar: ToyGrammar | None = None) -> Vocab:
    grammar = grammar or ToyGrammar()
    tokens: List[str] = list(grammar.anchors)
    for spec in specs:
        mapping = token_map(spec, grammar)
        tokens.extend(mapping[w] for w in grammar.words)
    return Vocab(tokens)


def synth_corpus(specs: Sequence[LanguageSpec], n_sentences: int,
                 rng: np.random.Generator,
                 grammar: ToyGrammar | None = None) -> Corpus:
    """Monolingual corpus per language plus base<->lang parallel corpora.

    One shared set of base sentences underlies all corpora: each language's
    monolingual text is its transform of those sentences and each parallel
    corpus pairs a base sentence with its transform. Seeing the same content
    monolingually in every language and in paired form is what lets the
    pair objectives bind the languages' representations together.
    """
    specs = list(specs)
    base_specs = [s for s in specs if s.kind == "base"]
    if len(specs) < 2 or len(base_specs) != 1:
        raise ValueError("need >=2 languages with exactly one base language")
    grammar = grammar or ToyGrammar()
    vocab = build_vocab(specs, grammar)

    sentences = [grammar.sample_sentence(rng) for _ in range(n_sentences)]
    mono: Dict[str, List[List[int]]] = {}
    parallel: Dict[str, List[Tuple[List[int], List[int]]]] = {}
    for spec in specs:
        transformed = [vocab.encode(transform_sentence(s, spec, grammar))
                       for s in sentences]
        mono[spec.lang] = transformed
        if spec.kind != "base":
            parallel[spec.lang] = [(vocab.encode(s), t)
                                   for s, t in zip(sentences, transformed)]
    return Corpus(vocab, specs, mono, parallel)


@dataclass
class Batch:
    sequences: List[List[int]]
    languages: List[str]

    def total_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


class DynamicBatcher:
    """Token-budget batching over language pools sampled per p_j.

    Draws one sequence per slot (language chosen by the temperature-balanced
    probabilities), buffers draws, sorts by length, and chunks greedily so
    each batch stays within the budget with bounded padding waste. Sequences
    longer than the budget are skipped and counted in `skipped`.
    """

    def __init__(self, pools: Dict[str, List[List[int]]], token_budget: int,
                 rng: np.random.Generator, stats: CorpusStats,
                 n_draws: int | None = None, buffer_size: int = 256):
        if token_budget <= 0:
            raise ValueError("token budget must be positive")
        self.pools = pools
        self.budget = token_budget
        self.rng = rng
        self.langs = list(stats.counts)
        self.probs = language_sampling_probs(stats)
        total = sum(len(pools.get(l, [])) for l in self.langs)
        self.remaining = total if n_draws is None else n_draws
        if total == 0:
            self.remaining = 0
        self.buffer_size = buffer_size
        self.skipped = 0
        self._pending: List[Batch] = []
        self._carry: List[Tuple[List[int], str]] = []

    def __iter__(self) -> Iterator[Batch]:
        return self

    def _fill(self) -> None:
        drawn: List[Tuple[List[int], str]] = list(self._carry)
        self._carry = []
        while self.remaining > 0 and len(drawn) < self.buffer_size:
            lang = self.langs[self.rng.choice(len(self.langs), p=self.probs)]
            pool = self.pools[lang]
            seq = pool[self.rng.integers(len(pool))]
            self.remaining -= 1
            if len(seq) > self.budget:
                self.skipped += 1
                continue
            drawn.append((seq, lang))
        drawn.sort(key=lambda item: len(item[0]))
        batch_seqs: List[List[int]] = []
        batch_langs: List[str] = []
        used = 0
        for seq, lang in drawn:
            if batch_seqs and used + len(seq) > self.budget:
                self._pending.append(Batch(batch_seqs, batch_langs))
                batch_seqs, batch_langs, used = [], [], 0
            batch_seqs.append(seq)
            batch_langs.append(lang)
            used += len(seq)
        if batch_seqs:
            # an underfull trailing chunk waits for the next buffer so only
            # the very last batch of the stream may fall below half budget
            if used < self.budget // 2 and self.remaining > 0:
                self._carry = list(zip(batch_seqs, batch_langs))
            else:
                self._pending.append(Batch(batch_seqs, batch_langs))

    def __next__(self) -> Batch:
        while not self._pending:
            if self.remaining <= 0 and not self._carry:
                raise StopIteration
            self._fill()
        return self._pending.pop(0)


def dynamic_batch(pools: Dict[str, List[List[int]]], token_budget: int,
                  rng: np.random.Generator, stats: CorpusStats,
                  n_draws: int | None = None) -> DynamicBatcher:
    return DynamicBatcher(pools, token_budget, rng, stats, n_draws)


def save_corpus_files(corpus: Corpus, outdir) -> List[str]:
    """Write vocab, per-language mono files, and per-pair parallel files.

    Mono format: one sentence per line, "<lang>\\t<tokens>". Parallel format:
    "<base tokens>\\t<translated tokens>".
    """
    import os
    written = []
    vocab_path = os.path.join(outdir, "vocab.txt")
    corpus.vocab.save(vocab_path)
    written.append(vocab_path)
    for lang, seqs in corpus.mono.items():
        path = os.path.join(outdir, f"mono_{lang}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            for ids in seqs:
                fh.write(f"{lang}\t{' '.join(corpus.vocab.decode(ids))}\n")
        written.append(path)
    base = corpus.base_lang
    for lang, pairs in corpus.parallel.items():
        path = os.path.join(outdir, f"parallel_{base}_{lang}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            for e_ids, f_ids in pairs:
                fh.write(f"{' '.join(corpus.vocab.decode(e_ids))}\t"
                         f"{' '.join(corpus.vocab.decode(f_ids))}\n")
        written.append(path)
    return written
