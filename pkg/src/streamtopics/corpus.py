"""Corpus handling for streaming topic models.

Text normalization, per-timestep vocabulary construction with frequency
and document-frequency pruning, sparse bag-of-words encoding, stream
batching, synthetic stream generation with ground truth, and ingestion
of pretrained word embeddings with a deterministic fallback initializer.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

__all__ = [
    "Vocabulary",
    "Document",
    "RawDocument",
    "StreamBatch",
    "WordEmbeddings",
    "EmbeddingTable",
    "GroundTruth",
    "default_stopwords",
    "load_stopwords",
    "load_lemma_map",
    "tokenize_normalize",
    "build_vocabulary",
    "to_bow",
    "make_stream",
    "generate_synthetic_stream",
    "synthetic_vocabulary",
    "make_synthetic_topics",
    "load_word_embeddings",
    "load_corpus_jsonl",
]


# ---------------------------------------------------------------------------
# normalization


def default_stopwords() -> frozenset[str]:
    """Bundled English stopword list, one token per line."""
    text = resources.files("streamtopics").joinpath("data/stopwords_en.txt").read_text("utf-8")
    return frozenset(tok for tok in text.split() if tok)


def load_stopwords(path) -> frozenset[str]:
    """Read a stopword file (UTF-8 plain text, one token per line)."""
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.strip().lower() for line in fh if line.strip())


def load_lemma_map(path) -> dict[str, str]:
    """Read a lemma map file with lines ``token lemma``."""
    lemma = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"lemma map line {lineno}: expected 'token lemma', got {line!r}")
            lemma[parts[0].lower()] = parts[1].lower()
    return lemma


def tokenize_normalize(raw, stopwords=frozenset(), lemma_map=None):
    """Normalize raw text into a list of filtered tokens.

    Lowercases, turns apostrophes and every other non-alphanumeric
    character into spaces, splits on whitespace, applies the optional
    lemma map, then keeps tokens that are alphabetic, longer than two
    characters, and not stopwords. An empty result is allowed.
    """
    text = raw.lower()
    cleaned = "".join(ch if ch.isalnum() else " " for ch in text)
    tokens = []
    for tok in cleaned.split():
        if lemma_map is not None:
            tok = lemma_map.get(tok, tok)
        if len(tok) > 2 and tok.isalpha() and tok not in stopwords:
            tokens.append(tok)
    return tokens


# ---------------------------------------------------------------------------
# vocabulary and documents


@dataclass(frozen=True)
class Vocabulary:
    """Pruned token inventory with contiguous lexicographic ids."""

    tokens: tuple
    index: dict = field(repr=False)
    doc_freq: tuple = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index


def build_vocabulary(docs, min_count=2, max_doc_frac=0.7) -> Vocabulary:
    """Build a vocabulary from tokenized documents.

    Tokens with corpus frequency below ``min_count`` are removed, as are
    tokens present in more than ``max_doc_frac`` of the documents. Ids
    are assigned in lexicographic order. Raises if pruning removes
    every token.
    """
    if not docs:
        raise ValueError("cannot build a vocabulary from zero documents")
    freq = Counter()
    doc_freq = Counter()
    for tokens in docs:
        freq.update(tokens)
        doc_freq.update(set(tokens))
    n_docs = len(docs)
    kept = sorted(
        tok
        for tok, c in freq.items()
        if c >= min_count and doc_freq[tok] <= max_doc_frac * n_docs
    )
    if not kept:
        raise ValueError("vocabulary pruning removed every token")
    index = {tok: i for i, tok in enumerate(kept)}
    return Vocabulary(
        tokens=tuple(kept),
        index=index,
        doc_freq=tuple(doc_freq[tok] for tok in kept),
    )


@dataclass(frozen=True)
class Document:
    """Bag-of-words document with sparse counts over vocabulary ids."""

    id: str
    timestep: int
    counts: dict
    label: str | None = None

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class RawDocument:
    """Tokenized document before vocabulary lookup."""

    id: str
    tokens: tuple
    timestep: int = 0
    label: str | None = None


def to_bow(tokens, vocab: Vocabulary, doc_id="", timestep=0, label=None) -> Document:
    """Encode a token list as sparse counts; out-of-vocabulary tokens drop.

    Raises if no token of the document is in the vocabulary.
    """
    counts = Counter(vocab.index[tok] for tok in tokens if tok in vocab.index)
    if not counts:
        raise ValueError(f"document {doc_id!r} has no in-vocabulary token")
    return Document(id=doc_id, timestep=timestep, counts=dict(counts), label=label)


@dataclass(frozen=True)
class StreamBatch:
    """All documents of one timestep plus the vocabulary built from them.

    Documents whose every token was pruned away cannot be encoded and
    are recorded in ``dropped_ids`` so the stream still partitions its
    input.
    """

    t: int
    documents: tuple
    vocabulary: Vocabulary
    dropped_ids: tuple = ()


def _batch_from_group(t, group, min_count, max_doc_frac) -> StreamBatch:
    vocab = build_vocabulary(
        [doc.tokens for doc in group], min_count=min_count, max_doc_frac=max_doc_frac
    )
    documents = []
    dropped = []
    for doc in group:
        try:
            documents.append(
                to_bow(doc.tokens, vocab, doc_id=doc.id, timestep=t, label=doc.label)
            )
        except ValueError:
            dropped.append(doc.id)
    return StreamBatch(
        t=t, documents=tuple(documents), vocabulary=vocab, dropped_ids=tuple(dropped)
    )


def make_stream(raw_docs, batch_size=None, min_count=2, max_doc_frac=0.7):
    """Partition raw documents into per-timestep batches.

    With ``batch_size`` set, the ordered corpus is sliced into
    consecutive chunks that become timesteps 0, 1, ... Otherwise
    documents are grouped by their own timestep field, which must form
    a contiguous range starting at 0 with no empty step. Each batch
    builds its vocabulary independently with the given pruning
    settings. Note that tiny batches interact badly with the default
    document-frequency cap: in a single-document batch every token is
    in 100 percent of documents, so such streams need a relaxed
    ``max_doc_frac``.
    """
    raw_docs = list(raw_docs)
    if not raw_docs:
        raise ValueError("empty corpus")
    if batch_size is not None:
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        groups = [raw_docs[i : i + batch_size] for i in range(0, len(raw_docs), batch_size)]
    else:
        seen = {}
        for doc in raw_docs:
            seen.setdefault(doc.timestep, []).append(doc)
        steps = sorted(seen)
        if steps != list(range(len(steps))):
            missing = sorted(set(range(max(steps) + 1)) - set(steps))
            raise ValueError(f"timesteps are not contiguous from 0; empty steps {missing}")
        groups = [seen[t] for t in steps]
    return [
        _batch_from_group(t, group, min_count, max_doc_frac)
        for t, group in enumerate(groups)
    ]


# ---------------------------------------------------------------------------
# synthetic streams


def synthetic_vocabulary(v: int):
    """Deterministic token names for ids 0..v-1, alphabetic and length > 2."""
    if v < 1:
        raise ValueError("vocabulary size must be positive")
    width = 2
    while 26**width < v:
        width += 1
    tokens = []
    for i in range(v):
        digits = []
        x = i
        for _ in range(width):
            digits.append(chr(ord("a") + x % 26))
            x //= 26
        tokens.append("w" + "".join(reversed(digits)))
    return tokens


def make_synthetic_topics(k_real: int, v: int, concentration=0.1, seed=0) -> np.ndarray:
    """Draw ``k_real`` sparse word distributions over a size-``v`` vocabulary."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70706963]))
    return rng.dirichlet(np.full(v, concentration), size=k_real)


@dataclass(frozen=True)
class GroundTruth:
    """What the synthetic generator actually did.

    ``raw_docs`` keeps the pre-pruning token stream so generator-level
    statistics stay checkable after vocabulary pruning.
    """

    active_sets: tuple
    k_real: tuple
    doc_topics: dict
    topic_word_dists: np.ndarray
    tokens: tuple
    raw_docs: tuple = ()

    def to_dict(self) -> dict:
        return {
            "active_sets": [list(s) for s in self.active_sets],
            "k_real": list(self.k_real),
            "doc_topics": dict(self.doc_topics),
        }


def generate_synthetic_stream(
    schedule,
    topic_word_dists,
    docs_per_step,
    doc_length,
    seed=0,
    min_count=2,
    max_doc_frac=0.7,
):
    """Simulate a topic stream and return (batches, ground truth).

    ``schedule`` is a sequence of per-timestep active-topic sets. Every
    document draws its topic uniformly from the step's active set and
    its tokens i.i.d. from that topic's word distribution. Fully
    deterministic given the seed.
    """
    dists = np.asarray(topic_word_dists, dtype=np.float64)
    if dists.ndim != 2:
        raise ValueError("topic_word_dists must be a K_real x V matrix")
    k_real_total, v = dists.shape
    if not np.allclose(dists.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("topic_word_dists rows must sum to 1")
    if docs_per_step < 1:
        raise ValueError("docs_per_step must be positive")
    if doc_length < 1:
        raise ValueError("doc_length must be positive")
    schedule = [sorted(set(step)) for step in schedule]
    for t, active in enumerate(schedule):
        if not active:
            raise ValueError(f"empty active-topic set at timestep {t}")
        if active[0] < 0 or active[-1] >= k_real_total:
            raise ValueError(f"timestep {t} references an unknown topic")

    tokens = synthetic_vocabulary(v)
    step_seeds = np.random.SeedSequence(seed).spawn(len(schedule))
    raw_docs = []
    doc_topics = {}
    for t, active in enumerate(schedule):
        rng = np.random.default_rng(step_seeds[t])
        for i in range(docs_per_step):
            k = int(active[rng.integers(len(active))])
            ids = rng.choice(v, size=doc_length, p=dists[k])
            doc_id = f"t{t:03d}_d{i:05d}"
            raw_docs.append(
                RawDocument(
                    id=doc_id,
                    tokens=tuple(tokens[j] for j in ids),
                    timestep=t,
                    label=f"topic{k}",
                )
            )
            doc_topics[doc_id] = k
    batches = make_stream(raw_docs, min_count=min_count, max_doc_frac=max_doc_frac)
    truth = GroundTruth(
        active_sets=tuple(tuple(s) for s in schedule),
        k_real=tuple(len(s) for s in schedule),
        doc_topics=doc_topics,
        topic_word_dists=dists,
        tokens=tuple(tokens),
        raw_docs=tuple(raw_docs),
    )
    return batches, truth


# ---------------------------------------------------------------------------
# word embeddings


@dataclass(frozen=True)
class WordEmbeddings:
    """Fixed word-embedding rows aligned with a vocabulary."""

    matrix: np.ndarray
    L: int
    coverage: float


def _fallback_embedding(token: str, L: int, seed: int) -> np.ndarray:
    """Deterministic zero-mean Gaussian row with variance 1/L.

    The per-token entropy comes from a hash of the token string, so the
    same token maps to the same row in every timestep and every run
    with the same seed.
    """
    digest = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest(), "big")
    rng = np.random.default_rng(np.random.SeedSequence([seed, digest]))
    return rng.normal(0.0, 1.0 / np.sqrt(L), size=L)


class EmbeddingTable:
    """Global token-to-vector table backing per-timestep embedding rows."""

    def __init__(self, vectors: dict | None, L: int, seed: int = 0):
        self.vectors = vectors or {}
        self.L = int(L)
        self.seed = int(seed)

    @classmethod
    def from_file(cls, path, L: int, seed: int = 0) -> "EmbeddingTable":
        """Parse a text embedding file with lines ``token v1 ... vL``."""
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                token, values = parts[0], parts[1:]
                if len(values) != L:
                    raise ValueError(
                        f"embedding file line {lineno}: expected {L} values, got {len(values)}"
                    )
                try:
                    vectors[token] = np.array([float(x) for x in values], dtype=np.float64)
                except ValueError as exc:
                    raise ValueError(f"embedding file line {lineno}: malformed value") from exc
        return cls(vectors, L, seed)

    def rows_for(self, vocab: Vocabulary) -> WordEmbeddings:
        """Embedding rows for a vocabulary, with fallback rows where needed."""
        rows = np.empty((vocab.size, self.L), dtype=np.float64)
        matched = 0
        for i, tok in enumerate(vocab.tokens):
            vec = self.vectors.get(tok)
            if vec is None:
                rows[i] = _fallback_embedding(tok, self.L, self.seed)
            else:
                rows[i] = vec
                matched += 1
        coverage = matched / vocab.size if vocab.size else 0.0
        return WordEmbeddings(matrix=rows, L=self.L, coverage=coverage)


def load_word_embeddings(path, vocab: Vocabulary, L: int, seed: int = 0) -> WordEmbeddings:
    """Load pretrained embeddings for a vocabulary from a text file.

    Rows for tokens missing from the file come from the documented
    fallback initializer. Malformed lines raise with their line number.
    """
    return EmbeddingTable.from_file(path, L, seed).rows_for(vocab)


# ---------------------------------------------------------------------------
# corpus files


def load_corpus_jsonl(path, stopwords=frozenset(), lemma_map=None):
    """Read a JSON-lines corpus into tokenized RawDocuments.

    Each line holds an object with fields id, text, timestep, and an
    optional label.
    """
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"corpus line {lineno}: invalid JSON") from exc
            try:
                doc_id = str(obj["id"])
                text = obj["text"]
                timestep = int(obj["timestep"])
            except KeyError as exc:
                raise ValueError(f"corpus line {lineno}: missing field {exc}") from exc
            tokens = tokenize_normalize(text, stopwords, lemma_map)
            docs.append(
                RawDocument(
                    id=doc_id,
                    tokens=tuple(tokens),
                    timestep=timestep,
                    label=obj.get("label"),
                )
            )
    return docs
