"""Topic correspondence across consecutive timesteps.

The default matcher solves an unbalanced OT problem over cosine costs
with multiplicative MM updates, then classifies each current topic by
thresholding its best plan entry against a scale T derived from the
embedding covariance. An epsilon-neighbor matcher and the discrete
averaging merge provide the baseline used for comparison runs. The
registry turns per-step assignments into persistent topic identities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_EPS_DIV = 1e-16


@dataclass
class TransportPlan:
    """Unbalanced transport plan between two topic sets."""

    P: np.ndarray
    a: np.ndarray
    b: np.ndarray
    r: float
    converged: bool
    n_iter: int
    objectives: list | None = None


@dataclass(frozen=True)
class TopicAssignment:
    """Partition of the source topics into matched and new."""

    matches: tuple
    new_topics: tuple
    threshold: float

    def __post_init__(self):
        seen = sorted([m[0] for m in self.matches] + list(self.new_topics))
        if len(set(seen)) != len(seen):
            raise ValueError("a source topic appears twice in the assignment")


@dataclass
class TopicRegistry:
    """Persistent topic identities folded over timesteps."""

    next_id: int = 0
    id_maps: dict = field(default_factory=dict)
    birth: dict = field(default_factory=dict)
    freq: dict = field(default_factory=dict)

    def timesteps(self):
        return sorted(self.id_maps)

    def k_pred_series(self):
        return {t: len(m) for t, m in self.id_maps.items()}


def cosine_cost(A, B) -> np.ndarray:
    """Pairwise cosine distances 1 - cos(A_i, B_j)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine cost undefined for zero-norm embedding rows")
    return 1.0 - (A @ B.T) / np.outer(na, nb)


def kl_generalized(x, y) -> float:
    """sum x log(x/y) - x + y with the 0 log 0 = 0 convention."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pos = x > 0.0
    return float(np.sum(x[pos] * np.log(x[pos] / y[pos])) - x.sum() + y.sum())


def uot_objective(P, C, a, b, r) -> float:
    """<C, P> plus the two relaxed-marginal KL penalties."""
    return float(np.sum(C * P)) + r * (
        kl_generalized(P.sum(axis=1), a) + kl_generalized(P.sum(axis=0), b)
    )


def uot_mm(C, a, b, r=0.09, max_iter=1000, tol=1e-9, track_objective=False) -> TransportPlan:
    """Unbalanced OT with KL marginal relaxation, multiplicative updates.

    Starts from the product plan a b^T and rescales with the square
    roots of the marginal ratios under the half-cost kernel; each
    update cannot increase the objective. Stops when the plan moves
    less than ``tol`` in max norm; otherwise the final iterate comes
    back with ``converged=False``.
    """
    C = np.asarray(C, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a <= 0.0) or np.any(b <= 0.0):
        raise ValueError("marginal masses must be positive")
    kernel = np.sqrt(np.outer(a, b)) * np.exp(-C / (2.0 * r))
    P = np.outer(a, b)
    objectives = [uot_objective(P, C, a, b, r)] if track_objective else None
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        row = np.sqrt(P.sum(axis=1)) + _EPS_DIV
        col = np.sqrt(P.sum(axis=0)) + _EPS_DIV
        new = kernel * P / np.outer(row, col)
        delta = float(np.abs(new - P).max())
        P = new
        if track_objective:
            objectives.append(uot_objective(P, C, a, b, r))
        if delta < tol:
            converged = True
            break
    if not np.isfinite(P).all():
        raise ValueError("transport plan diverged to non-finite values")
    return TransportPlan(
        P=P, a=a, b=b, r=r, converged=converged, n_iter=n_iter, objectives=objectives
    )


def match_threshold(alpha_t, alpha_prev, eps=0.01, eps_ridge=1e-6) -> float:
    """T = sqrt(largest eigenvalue of the stacked covariance) * eps."""
    stack = np.vstack([np.asarray(alpha_t), np.asarray(alpha_prev)])
    if stack.shape[0] < 2:
        raise ValueError("need at least two stacked rows for the threshold")
    cov = np.cov(stack, rowvar=False) + eps_ridge * np.eye(stack.shape[1])
    lam = float(np.linalg.eigvalsh(cov)[-1])
    return float(np.sqrt(lam) * eps)


def trace_step(alpha_t, alpha_prev, eps=0.01, r=0.09, eps_ridge=1e-6) -> TopicAssignment:
    """Transport-based matching of current topics onto the previous set.

    Each source topic carries uniform mass; its best plan entry is
    compared against the covariance-scale threshold, with argmax ties
    broken toward the lowest target index.
    """
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    alpha_prev = np.asarray(alpha_prev, dtype=np.float64)
    C = cosine_cost(alpha_t, alpha_prev)
    k_t, k_p = C.shape
    plan = uot_mm(C, np.full(k_t, 1.0 / k_t), np.full(k_p, 1.0 / k_p), r=r)
    T = match_threshold(alpha_t, alpha_prev, eps=eps, eps_ridge=eps_ridge)
    matches = []
    new_topics = []
    for i in range(k_t):
        j = int(np.argmax(plan.P[i]))
        w = float(plan.P[i, j])
        if w >= T:
            matches.append((i, j, w))
        else:
            new_topics.append(i)
    return TopicAssignment(
        matches=tuple(matches), new_topics=tuple(new_topics), threshold=T
    )


def epsilon_neighbor_match(alpha_t, alpha_prev, eps=0.01) -> TopicAssignment:
    """Greedy nearest-neighbor matching under squared Euclidean distance.

    Pairs are taken closest first, each target used at most once; a
    source with no remaining target within ``eps`` is new. Match
    weights hold the squared distances.
    """
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    alpha_prev = np.asarray(alpha_prev, dtype=np.float64)
    diff = alpha_t[:, None, :] - alpha_prev[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    order = np.dstack(np.unravel_index(np.argsort(d2, axis=None), d2.shape))[0]
    used_src = set()
    used_dst = set()
    matches = []
    for i, j in order:
        i, j = int(i), int(j)
        if d2[i, j] > eps:
            break
        if i in used_src or j in used_dst:
            continue
        matches.append((i, j, float(d2[i, j])))
        used_src.add(i)
        used_dst.add(j)
    new_topics = tuple(i for i in range(alpha_t.shape[0]) if i not in used_src)
    return TopicAssignment(matches=tuple(matches), new_topics=new_topics, threshold=eps)


def dot_merge(alpha_t, alpha_prev, assignment: TopicAssignment) -> np.ndarray:
    """Discrete merge: average matched embeddings onto target positions.

    Unmatched targets keep their rows; new sources are appended below
    the targets. A target matched by several sources averages all of
    them together with itself.
    """
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    alpha_prev = np.asarray(alpha_prev, dtype=np.float64)
    merged = alpha_prev.copy()
    by_target = {}
    for i, j, _ in assignment.matches:
        by_target.setdefault(j, []).append(i)
    for j, sources in by_target.items():
        rows = [alpha_prev[j]] + [alpha_t[i] for i in sources]
        merged[j] = np.mean(rows, axis=0)
    if assignment.new_topics:
        merged = np.vstack([merged, alpha_t[list(assignment.new_topics)]])
    return merged


def update_registry(
    reg: TopicRegistry, assignment, t: int, doc_argmax_counts
) -> TopicRegistry:
    """Fold one timestep into the registry.

    ``assignment`` is None for the first timestep, making every local
    topic a fresh global identity; otherwise matched topics inherit the
    global id their target held at the previous registered timestep.
    ``doc_argmax_counts[i]`` is the number of documents whose largest
    proportion lands on local topic i.
    """
    counts = [int(c) for c in doc_argmax_counts]
    k_local = len(counts)
    if any(c < 0 for c in counts):
        raise ValueError("document frequencies must be nonnegative")
    if t in reg.id_maps:
        raise ValueError(f"timestep {t} already registered")
    local_to_gid = {}
    if assignment is None:
        labels = range(k_local)
        new_topics = list(labels)
        matches = []
    else:
        matches = list(assignment.matches)
        new_topics = list(assignment.new_topics)
        refs = [m[0] for m in matches] + new_topics
        if sorted(refs) != list(range(k_local)):
            raise ValueError("assignment does not cover the local topics exactly once")
        prev_steps = reg.timesteps()
        if not prev_steps:
            raise ValueError("matching against an empty registry")
        prev_map = reg.id_maps[prev_steps[-1]]
        for i, j, _ in matches:
            if j not in prev_map:
                raise ValueError(f"target topic {j} unknown at the previous timestep")
            local_to_gid[i] = prev_map[j]
    for i in new_topics:
        local_to_gid[i] = reg.next_id
        reg.birth[reg.next_id] = t
        reg.freq[reg.next_id] = {}
        reg.next_id += 1
    reg.id_maps[t] = local_to_gid
    for i, gid in local_to_gid.items():
        series = reg.freq[gid]
        series[t] = series.get(t, 0) + counts[i]
    return reg


def assignment_to_json(assignment: TopicAssignment, t: int) -> dict:
    return {
        "t": t,
        "matches": [
            {"src": i, "dst": j, "w": w} for i, j, w in assignment.matches
        ],
        "new": list(assignment.new_topics),
        "threshold": assignment.threshold,
    }


def registry_to_json(reg: TopicRegistry) -> dict:
    steps = reg.timesteps()
    topics = []
    for gid in sorted(reg.birth):
        series = [reg.freq[gid].get(t, 0) for t in steps]
        topics.append({"id": gid, "birth": reg.birth[gid], "freq_series": series})
    return {"global_topics": topics}


def save_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
