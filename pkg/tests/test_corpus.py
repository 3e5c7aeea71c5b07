import re
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamtopics.corpus import (
    EmbeddingTable,
    RawDocument,
    build_vocabulary,
    default_stopwords,
    generate_synthetic_stream,
    load_corpus_jsonl,
    load_word_embeddings,
    make_stream,
    make_synthetic_topics,
    synthetic_vocabulary,
    to_bow,
    tokenize_normalize,
)

# ---------------------------------------------------------------------------
# tokenize_normalize


def test_tokenize_spec_example():
    assert tokenize_normalize("The car's RED engine!!", {"the"}) == ["car", "red", "engine"]


def test_tokenize_short_and_punct_only():
    assert tokenize_normalize("a b!!") == []


def test_tokenize_drops_digits_and_applies_lemma_map():
    assert tokenize_normalize("b2b meeting") == ["meeting"]
    assert tokenize_normalize("cars and engines", {"and"}, {"cars": "car"}) == [
        "car",
        "engines",
    ]


def _reference_normalize(raw, stopwords):
    # independently written oracle: regex split instead of per-char scan
    words = re.split(r"[\W_]+", raw.lower())
    return [w for w in words if len(w) > 2 and w.isalpha() and w not in stopwords]


@given(st.lists(st.text(max_size=30), max_size=40))
def test_tokenize_matches_reference_normalizer(texts):
    stop = {"the", "and", "with"}
    for raw in texts:
        assert tokenize_normalize(raw, stop) == _reference_normalize(raw, stop)


def test_tokenize_matches_reference_on_big_sample():
    rng = np.random.default_rng(7)
    alphabet = list("abcdefgh XY'.,!?23-_é")
    stop = default_stopwords()
    for _ in range(1000):
        raw = "".join(rng.choice(alphabet, size=rng.integers(0, 80)))
        assert tokenize_normalize(raw, stop) == _reference_normalize(raw, stop)


# ---------------------------------------------------------------------------
# build_vocabulary


def test_vocab_doc_frac_pruning():
    # "the" is in every document, "keep" in 6 of 10, fillers in 2 of 10
    docs = [["the", f"fill{i // 2}"] + (["keep"] if i < 6 else []) for i in range(10)]
    vocab = build_vocabulary(docs)
    assert "the" not in vocab
    assert "keep" in vocab
    assert "fill0" in vocab


def test_vocab_min_count_pruning():
    docs = [["solo", "pair"], ["pair", "other"], ["other", "aaa"]]
    vocab = build_vocabulary(docs)
    assert "solo" not in vocab
    assert set(vocab.tokens) == {"pair", "other"}


def test_vocab_exactly_at_doc_frac_kept():
    docs = [["border", "fill"] if i < 7 else ["fill", "pad"] for i in range(10)]
    vocab = build_vocabulary(docs, max_doc_frac=0.7)
    assert "border" in vocab  # 7/10 is not strictly above 0.7


def test_vocab_empty_after_pruning_raises():
    with pytest.raises(ValueError):
        build_vocabulary([["once"], ["solo"]])


def test_vocab_ids_lexicographic():
    vocab = build_vocabulary([["zebra", "apple"], ["zebra", "apple", "mango"], ["mango"]])
    assert vocab.tokens == ("apple", "mango", "zebra")
    assert [vocab.index[t] for t in vocab.tokens] == [0, 1, 2]


@given(
    st.lists(
        st.lists(st.sampled_from(["aaa", "bbb", "ccc", "ddd", "eee", "fff"]), max_size=8),
        min_size=1,
        max_size=50,
    )
)
def test_vocab_matches_bruteforce_filter(docs):
    freq = Counter(t for d in docs for t in d)
    doc_freq = Counter(t for d in docs for t in set(d))
    expected = {
        t for t, c in freq.items() if c >= 2 and doc_freq[t] / len(docs) <= 0.7
    }
    if not expected:
        with pytest.raises(ValueError):
            build_vocabulary(docs)
    else:
        assert set(build_vocabulary(docs).tokens) == expected


@given(
    st.lists(
        st.lists(st.sampled_from(["aaa", "bbb", "ccc", "ddd", "eee"]), max_size=6),
        min_size=1,
        max_size=30,
    )
)
def test_vocab_pruning_idempotent(docs):
    try:
        vocab = build_vocabulary(docs)
    except ValueError:
        return
    # keep emptied documents so the doc-frequency denominator is unchanged
    filtered = [[t for t in d if t in vocab.index] for d in docs]
    again = build_vocabulary(filtered)
    assert again.tokens == vocab.tokens


# ---------------------------------------------------------------------------
# to_bow


def _vocab_of(*tokens):
    # each token appears twice across 2 of 3 docs: frequency 2, doc-frac 2/3
    return build_vocabulary([list(tokens), list(tokens), ["qqq"]])


def test_to_bow_counts():
    vocab = _vocab_of("car", "red")
    doc = to_bow(["car", "car", "red"], vocab)
    assert doc.counts == {vocab.index["car"]: 2, vocab.index["red"]: 1}
    assert doc.total == 3


def test_to_bow_all_oov_raises():
    vocab = _vocab_of("car", "red")
    with pytest.raises(ValueError):
        to_bow(["unknown"], vocab)


@given(st.lists(st.sampled_from(["aaa", "bbb", "ccc", "zzz"]), min_size=1, max_size=30))
def test_to_bow_matches_tally_and_total(tokens):
    vocab = _vocab_of("aaa", "bbb", "ccc")
    in_vocab = [t for t in tokens if t in vocab.index]
    if not in_vocab:
        with pytest.raises(ValueError):
            to_bow(tokens, vocab)
        return
    doc = to_bow(tokens, vocab)
    tally = Counter(vocab.index[t] for t in in_vocab)
    assert doc.counts == dict(tally)
    assert doc.total == len(in_vocab)


# ---------------------------------------------------------------------------
# make_stream


def _raw(i, tokens, t=0, label=None):
    return RawDocument(id=f"d{i}", tokens=tuple(tokens), timestep=t, label=label)


def test_make_stream_slicing_5500_into_11():
    pool = [["alpha", "beta"], ["gamma", "delta"], ["omega", "sigma"]]
    docs = [_raw(i, pool[i % 3]) for i in range(5500)]
    batches = make_stream(docs, batch_size=500)
    assert len(batches) == 11
    assert all(len(b.documents) == 500 for b in batches)
    assert [b.t for b in batches] == list(range(11))


def test_make_stream_single_doc():
    # a single-document batch needs the doc-frequency cap relaxed
    batches = make_stream(
        [_raw(0, ["aaa", "aaa", "bbb", "bbb"])], batch_size=1, max_doc_frac=1.0
    )
    assert len(batches) == 1
    assert batches[0].documents[0].total == 4


def test_make_stream_noncontiguous_timesteps_raises():
    docs = [_raw(0, ["aaa", "aaa"], t=0), _raw(1, ["aaa", "aaa"], t=2)]
    with pytest.raises(ValueError):
        make_stream(docs, max_doc_frac=1.0)


def test_make_stream_partition_and_labels():
    pool = [["aaa", "bbb"], ["ccc", "ddd"], ["eee", "fff"], ["ggg", "hhh"]]
    docs = [
        _raw(i, pool[i % 4], t=i % 3, label=("x" if i % 2 else "y"))
        for i in range(30)
    ]
    batches = make_stream(docs)
    seen = [d.id for b in batches for d in b.documents] + [
        i for b in batches for i in b.dropped_ids
    ]
    assert sorted(seen) == sorted(d.id for d in docs)
    for t, batch in enumerate(batches):
        expected = Counter(d.label for d in docs if d.timestep == t)
        assert Counter(d.label for d in batch.documents) == expected


def test_make_stream_records_dropped_docs():
    pool = [["aaa", "bbb"], ["ccc", "ddd"]]
    docs = [_raw(i, pool[i % 2], t=0) for i in range(4)] + [
        _raw(9, ["orphan"], t=0)  # frequency 1, pruned, doc becomes empty
    ]
    (batch,) = make_stream(docs)
    assert batch.dropped_ids == ("d9",)
    assert len(batch.documents) == 4


# ---------------------------------------------------------------------------
# synthetic streams


def test_synthetic_vocabulary_names():
    tokens = synthetic_vocabulary(700)
    assert len(set(tokens)) == 700
    assert all(t.isalpha() and len(t) > 2 for t in tokens)
    assert tokens == sorted(tokens)


def default_schedule():
    return [[0, 1, 2]] * 7 + [[0, 2, 3]] * 3 + [[0, 2, 3, 4]]


def test_synthetic_stream_schedule_and_k_real():
    dists = make_synthetic_topics(5, 60, seed=3)
    batches, truth = generate_synthetic_stream(default_schedule(), dists, 40, 30, seed=5)
    assert len(batches) == 11
    assert truth.k_real == (3,) * 10 + (4,)
    for t, batch in enumerate(batches):
        labels = {truth.doc_topics[d.id] for d in batch.documents}
        assert labels <= set(truth.active_sets[t])


def test_synthetic_stream_single_topic_single_step():
    dists = make_synthetic_topics(1, 40, seed=1)
    batches, truth = generate_synthetic_stream(
        [[0]], dists, 10, 20, seed=2, max_doc_frac=1.0
    )
    assert len(batches) == 1
    assert set(truth.doc_topics.values()) == {0}
    assert all(d.label == "topic0" for d in batches[0].documents)


def test_synthetic_stream_deterministic():
    dists = make_synthetic_topics(3, 50, seed=9)
    a, _ = generate_synthetic_stream([[0, 1], [1, 2]], dists, 25, 15, seed=11)
    b, _ = generate_synthetic_stream([[0, 1], [1, 2]], dists, 25, 15, seed=11)
    assert a == b


def test_synthetic_stream_empty_active_set_raises():
    dists = make_synthetic_topics(2, 30, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_stream([[0], []], dists, 5, 10, seed=0)


def test_synthetic_topic_frequencies_converge():
    # 1e5 tokens per topic reproduce the word distribution within L1 0.05
    dists = make_synthetic_topics(2, 50, concentration=0.5, seed=4)
    n_docs, doc_len = 1000, 100
    _, truth = generate_synthetic_stream([[0], [1]], dists, n_docs, doc_len, seed=6)
    token_id = {tok: i for i, tok in enumerate(truth.tokens)}
    for k in (0, 1):
        counts = np.zeros(50)
        for doc in truth.raw_docs:
            if truth.doc_topics[doc.id] == k:
                for tok in doc.tokens:
                    counts[token_id[tok]] += 1
        assert counts.sum() == n_docs * doc_len
        emp = counts / counts.sum()
        assert np.abs(emp - dists[k]).sum() < 0.05


# ---------------------------------------------------------------------------
# word embeddings


def test_embeddings_full_coverage(tmp_path):
    vocab = _vocab_of("car", "red")
    path = tmp_path / "vecs.txt"
    path.write_text("car 1.0 2.0\nred -0.5 0.25\n")
    emb = load_word_embeddings(path, vocab, L=2)
    assert emb.coverage == 1.0
    assert emb.matrix[vocab.index["car"]].tolist() == [1.0, 2.0]
    assert emb.matrix[vocab.index["red"]].tolist() == [-0.5, 0.25]


def test_embeddings_empty_file(tmp_path):
    vocab = _vocab_of("car", "red")
    path = tmp_path / "vecs.txt"
    path.write_text("")
    emb = load_word_embeddings(path, vocab, L=4)
    assert emb.coverage == 0.0
    assert emb.matrix.shape == (2, 4)
    # variance of fallback rows is 1/L in expectation; just check determinism
    again = load_word_embeddings(path, vocab, L=4)
    assert np.array_equal(emb.matrix, again.matrix)


def test_embeddings_half_coverage_and_byte_equality(tmp_path):
    vocab = _vocab_of("car", "red", "sky", "sea")
    path = tmp_path / "vecs.txt"
    path.write_text("car 1.5 -2.25 3.0\nsky 0.125 4.5 -1.75\n")
    emb = load_word_embeddings(path, vocab, L=3)
    assert emb.coverage == 0.5
    assert emb.matrix[vocab.index["car"]].tolist() == [1.5, -2.25, 3.0]
    assert emb.matrix[vocab.index["sky"]].tolist() == [0.125, 4.5, -1.75]


def test_embeddings_malformed_line_raises(tmp_path):
    vocab = _vocab_of("car", "red")
    bad_dim = tmp_path / "bad_dim.txt"
    bad_dim.write_text("car 1.0\n")
    with pytest.raises(ValueError, match="line 1"):
        load_word_embeddings(bad_dim, vocab, L=2)
    bad_val = tmp_path / "bad_val.txt"
    bad_val.write_text("car 1.0 2.0\nred 1.0 oops\n")
    with pytest.raises(ValueError, match="line 2"):
        load_word_embeddings(bad_val, vocab, L=2)


def test_embedding_table_rows_stable_across_vocabularies():
    table = EmbeddingTable(None, L=8, seed=3)
    va = _vocab_of("car", "red")
    vb = _vocab_of("car", "sky")
    ra = table.rows_for(va)
    rb = table.rows_for(vb)
    assert np.array_equal(ra.matrix[va.index["car"]], rb.matrix[vb.index["car"]])


# ---------------------------------------------------------------------------
# corpus files


def test_load_corpus_jsonl(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text(
        '{"id": "a", "text": "The red car", "timestep": 0, "label": "autos"}\n'
        '{"id": "b", "text": "blue sky above", "timestep": 1}\n'
    )
    docs = load_corpus_jsonl(path, stopwords={"the"})
    assert docs[0].tokens == ("red", "car")
    assert docs[0].label == "autos"
    assert docs[1].timestep == 1
    assert docs[1].label is None


def test_load_corpus_jsonl_missing_field(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text('{"id": "a", "timestep": 0}\n')
    with pytest.raises(ValueError, match="line 1"):
        load_corpus_jsonl(path)
