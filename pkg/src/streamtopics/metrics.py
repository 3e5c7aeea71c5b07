"""Topic-quality metrics and evaluation exports.

Coherence and diversity read the top words of each topic; the
dispersion score compares predicted topic counts across several
initializations against the true count, and the combined score
multiplies dispersion by one minus the averaged quality. Frequency
series, labeled count matrices, and a shared 2-D projection cover the
run artifacts that the evaluation step writes to disk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations, permutations

import numpy as np

NPMI_EPS = 1e-12


@dataclass(frozen=True)
class MetricReport:
    """Quality scores for a set of runs sharing one corpus."""

    tc: float
    td: float
    h: float
    k_pred: dict
    e: tuple
    delta: float
    p: float
    k_real: float

    def __post_init__(self):
        if not 0.0 <= self.td <= 1.0:
            raise ValueError("topic diversity must lie in [0, 1]")
        if self.delta < 0.0 or self.p < 0.0:
            raise ValueError("dispersion and combined score must be nonnegative")

    def to_json(self) -> dict:
        return {
            "tc": self.tc,
            "td": self.td,
            "h": self.h,
            "k_pred": {str(k): v for k, v in sorted(self.k_pred.items())},
            "e": list(self.e),
            "delta": self.delta,
            "p": self.p,
            "k_real": self.k_real,
        }


def top_words(beta, k, n=10) -> list:
    """Token ids of the n most probable words in column k, ties by id."""
    beta = np.asarray(beta, dtype=np.float64)
    if n > beta.shape[0]:
        raise ValueError(f"requested {n} words from a {beta.shape[0]}-word vocabulary")
    order = np.argsort(-beta[:, k], kind="stable")
    return [int(i) for i in order[:n]]


def topic_diversity(topics) -> float:
    """Fraction of distinct tokens across the per-topic top-word lists."""
    lists = [list(t) for t in topics]
    if not lists:
        raise ValueError("no topics given")
    n = len(lists[0])
    if any(len(t) != n for t in lists) or n == 0:
        raise ValueError("every topic needs the same nonzero number of top words")
    distinct = len({w for t in lists for w in t})
    return distinct / (n * len(lists))


def _doc_word_sets(ref_docs):
    sets = []
    for doc in ref_docs:
        words = doc.counts.keys() if hasattr(doc, "counts") else doc
        sets.append(frozenset(words))
    if not sets:
        raise ValueError("reference corpus is empty")
    return sets


def topic_coherence(topics, ref_docs, mode="npmi") -> float:
    """Average per-topic coherence of the given top-word lists.

    npmi scores unordered pairs by normalized pointwise mutual
    information over document-level co-occurrence with additive
    smoothing; umass scores ordered pairs by the smoothed conditional
    log ratio log((D_ij + 1)/D_j). Pairs touching words absent from
    the reference corpus are skipped.
    """
    if mode not in ("npmi", "umass"):
        raise ValueError(f"unknown coherence mode: {mode!r}")
    docs = _doc_word_sets(ref_docs)
    n_docs = len(docs)
    vocab = set().union(*docs)
    doc_count = {}
    for words in docs:
        for w in words:
            doc_count[w] = doc_count.get(w, 0) + 1

    def pair_count(u, v):
        return sum(1 for words in docs if u in words and v in words)

    topic_means = []
    for topic in topics:
        scores = []
        if mode == "npmi":
            for u, v in combinations(topic, 2):
                if u not in vocab or v not in vocab:
                    continue
                d_uv = pair_count(u, v)
                if d_uv == n_docs:
                    scores.append(1.0)
                    continue
                p_uv = d_uv / n_docs
                p_u = doc_count[u] / n_docs
                p_v = doc_count[v] / n_docs
                log_joint = np.log(p_uv + NPMI_EPS)
                scores.append(float((log_joint - np.log(p_u * p_v)) / -log_joint))
        else:
            for u, v in permutations(topic, 2):
                if u not in vocab or v not in vocab:
                    continue
                scores.append(float(np.log((pair_count(u, v) + 1) / doc_count[v])))
        if scores:
            topic_means.append(float(np.mean(scores)))
    if not topic_means:
        raise ValueError("every word pair was skipped; corpus does not cover the topics")
    return float(np.mean(topic_means))


def harmonic_mean(tc, td) -> float:
    """2 tc td / (tc + td) for positive inputs."""
    if tc <= 0.0 or td <= 0.0:
        raise ValueError("harmonic mean needs positive inputs")
    return 2.0 * tc * td / (tc + td)


def dispersion_delta(k_preds, k_real):
    """Per-initialization errors e_i = |K_pred - K_real| and their spread."""
    k_preds = [float(k) for k in k_preds]
    if len(k_preds) < 2:
        raise ValueError("dispersion needs at least two initializations")
    e = tuple(abs(k - k_real) for k in k_preds)
    return e, max(e) - min(e)


def p_metric(delta, h) -> float:
    """delta * (1 - h); zero when dispersion vanishes or quality is perfect."""
    if delta < 0.0:
        raise ValueError("dispersion must be nonnegative")
    return delta * (1.0 - h)


def aggregate_report(tc_by_init, td_by_init, k_pred_by_init, k_real) -> MetricReport:
    """Combine per-initialization scores into one report.

    The harmonic mean is computed per initialization and averaged
    arithmetically before entering the combined score.
    """
    inits = sorted(k_pred_by_init)
    if sorted(tc_by_init) != inits or sorted(td_by_init) != inits:
        raise ValueError("score dictionaries must share the same initializations")
    h = float(np.mean([harmonic_mean(tc_by_init[k], td_by_init[k]) for k in inits]))
    e, delta = dispersion_delta([k_pred_by_init[k] for k in inits], k_real)
    return MetricReport(
        tc=float(np.mean([tc_by_init[k] for k in inits])),
        td=float(np.mean([td_by_init[k] for k in inits])),
        h=h,
        k_pred=dict(k_pred_by_init),
        e=e,
        delta=delta,
        p=p_metric(delta, h),
        k_real=float(k_real),
    )


def topic_frequency_series(registry, doc_argmax):
    """Fractions of documents per global topic id at each timestep.

    ``doc_argmax[t]`` lists each document's argmax local topic at t;
    the registry's per-timestep map turns local indices into global
    ids. Returns (matrix global-ids x timesteps, ids, timesteps).
    """
    ts = sorted(doc_argmax)
    gids = sorted(registry.birth)
    gid_row = {g: i for i, g in enumerate(gids)}
    F = np.zeros((len(gids), len(ts)))
    for col, t in enumerate(ts):
        local_map = registry.id_maps[t]
        labels = list(doc_argmax[t])
        if not labels:
            continue
        for local in labels:
            if local not in local_map:
                raise ValueError(f"local topic {local} unknown at timestep {t}")
            F[gid_row[local_map[local]], col] += 1.0
        F[:, col] /= len(labels)
    return F, gids, ts


def topic_term_count_matrix(doc_labels, doc_gids):
    """Topic-by-category count matrix with inverse column weights.

    Tallies (global topic, label) pairs and divides each column by its
    total count. Returns (matrix, topic ids, category labels).
    """
    labels = list(doc_labels)
    gids_in = list(doc_gids)
    if len(labels) != len(gids_in):
        raise ValueError("labels and topic assignments must align")
    if not labels or any(lab is None for lab in labels):
        raise ValueError("count matrix needs a fully labeled corpus")
    cats = sorted(set(labels))
    topics = sorted(set(gids_in))
    M = np.zeros((len(topics), len(cats)))
    trow = {g: i for i, g in enumerate(topics)}
    ccol = {c: j for j, c in enumerate(cats)}
    for lab, gid in zip(labels, gids_in):
        M[trow[gid], ccol[lab]] += 1.0
    M /= M.sum(axis=0, keepdims=True)
    return M, topics, cats


def pca_project(embeddings, dims=2) -> np.ndarray:
    """Project points onto their leading principal axes.

    Centers the rows, eigendecomposes the point-by-point Gram matrix,
    and returns the component scores; all timesteps share the one
    projection computed from the stacked input.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.shape[0] < 3:
        raise ValueError("projection needs at least three points")
    if not 1 <= dims <= min(X.shape):
        raise ValueError(f"cannot extract {dims} components from shape {X.shape}")
    Xc = X - X.mean(axis=0)
    gram = Xc @ Xc.T
    mu, U = np.linalg.eigh(gram)
    mu = np.maximum(mu[::-1][:dims], 0.0)
    U = U[:, ::-1][:, :dims]
    return U * np.sqrt(mu)


def frequency_series_to_csv(F, gids, ts, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [str(t) for t in ts])
        for gid, row in zip(gids, np.asarray(F)):
            writer.writerow([gid] + [f"{x:.10g}" for x in row])


def count_matrix_to_csv(M, topics, cats, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["topic"] + [str(c) for c in cats])
        for gid, row in zip(topics, np.asarray(M)):
            writer.writerow([gid] + [f"{x:.10g}" for x in row])


def pca_to_csv(ids, ts, coords, path) -> None:
    coords = np.asarray(coords)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "t", "x", "y"])
        for i, t, (x, y) in zip(ids, ts, coords):
            writer.writerow([i, t, f"{x:.10g}", f"{y:.10g}"])
