"""Configuration-driven pipeline entry point.

Subcommands: ``simulate`` writes a synthetic stream directory, ``run``
trains the model over a stream with warm starts, merging, tracing, and
a registry fold, ``eval`` scores one or more finished runs, ``export``
turns run artifacts into CSV/JSON tables. Timesteps run strictly in
order and never revisit past batches; every step is checkpointed so an
interrupted run resumes from the last complete timestep.

Run configuration is a JSON object; unset keys fall back to these defaults:

    {
      "stream_dir": "streams/demo", "out_dir": "runs/demo",
      "k_init": 15, "merge": "cot", "trace": "algorithm2",
      "eps": 0.01, "r": 0.09, "eps_ridge": 1e-6,
      "seed": 0, "embeddings": null, "active_n_min": 1,
      "model": {"L": 16, "H": 64, "a0": 0.5, "b0": 0.5,
                 "w_rec": 1.0, "w_gauss": 1.0, "w_stick": 0.05},
      "train": {"lr_max": 0.01, "weight_decay": 0.006,
                 "batch_size": 1024, "epochs": 300}
    }

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 missing input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import __version__
from .corpus import (
    Document,
    EmbeddingTable,
    StreamBatch,
    Vocabulary,
    generate_synthetic_stream,
    make_synthetic_topics,
)
from .gaussot import TransportedSet, cot_merge, export_csv
from .metrics import (
    aggregate_report,
    count_matrix_to_csv,
    frequency_series_to_csv,
    harmonic_mean,
    pca_project,
    pca_to_csv,
    top_words,
    topic_coherence,
    topic_diversity,
    topic_frequency_series,
    topic_term_count_matrix,
)
from .sbetm import (
    ModelConfig,
    active_topics,
    counts_matrix,
    infer_theta,
    init_params,
    load_params,
    save_params,
    topic_word_matrix,
)
from .trace import (
    TopicRegistry,
    assignment_to_json,
    dot_merge,
    epsilon_neighbor_match,
    registry_to_json,
    save_json,
    trace_step,
    update_registry,
)
from .train import TrainConfig, TrainingDiverged, train_timestep, warm_start

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4

MERGE_STRATEGIES = ("cot", "dot", "none")
TRACE_VARIANTS = ("algorithm2", "epsilon")

# the 11-step scenario: four of five topics active, one disappears at
# step 7, a fresh one emerges at step 10
DEFAULT_SCHEDULE = tuple(
    [(0, 1, 2, 3)] * 7 + [(0, 2, 3)] * 3 + [(0, 2, 3, 4)]
)


class CliError(Exception):
    """Pipeline failure carrying its process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run depends on."""

    stream_dir: str
    out_dir: str
    k_init: int = 15
    merge: str = "cot"
    trace: str = "algorithm2"
    eps: float = 0.01
    r: float = 0.09
    eps_ridge: float = 1e-6
    seed: int = 0
    embeddings: str | None = None
    active_n_min: int = 1
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.merge not in MERGE_STRATEGIES:
            raise ValueError(f"merge must be one of {MERGE_STRATEGIES}, got {self.merge!r}")
        if self.trace not in TRACE_VARIANTS:
            raise ValueError(f"trace must be one of {TRACE_VARIANTS}, got {self.trace!r}")
        if self.k_init < 2:
            raise ValueError("k_init must be at least 2")
        if self.eps <= 0.0 or self.r <= 0.0 or self.eps_ridge <= 0.0:
            raise ValueError("eps, r, and eps_ridge must be positive")

    def model_config(self, v: int) -> ModelConfig:
        # desk-scale dimensions unless the config says otherwise
        model = {"L": 16, "H": 64, **self.model}
        return ModelConfig(V=v, K=self.k_init, **model)

    def train_config(self) -> TrainConfig:
        train = {"batch_size": 256, **self.train}
        return TrainConfig(seed=self.seed, **train)

    def content_hash(self) -> str:
        payload = asdict(self)
        del payload["out_dir"]
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def load_run_config(path, overrides=None) -> RunConfig:
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from exc
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        config = RunConfig(**{k: v for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad run config: {exc}") from exc
    if not os.path.isdir(config.stream_dir):
        raise CliError(EXIT_MISSING, f"stream directory not found: {config.stream_dir}")
    return config


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    """Paths and hashes of everything one run produced."""

    config_hash: str
    code_version: str
    stream_dir: str
    k_init: int
    merge: str
    trace: str
    seed: int
    timesteps: list
    checkpoints: list
    train_logs: list
    actives: list
    assignments: list
    merges: list
    registry: str | None
    registry_state: str | None
    metrics: str | None = None
    diverged_at: int | None = None
    files: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "RunManifest":
        return cls(**payload)

    def referenced(self):
        paths = list(self.checkpoints) + list(self.train_logs) + list(self.actives)
        paths += list(self.assignments) + list(self.merges)
        paths += [p for p in (self.registry, self.registry_state) if p]
        return paths


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_manifest(path) -> RunManifest:
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    manifest = RunManifest.from_json(payload)
    base = os.path.dirname(os.path.abspath(path))
    missing = [p for p in manifest.referenced() if not os.path.exists(os.path.join(base, p))]
    if missing:
        raise CliError(EXIT_MISSING, f"manifest references missing files: {missing[:3]}")
    return manifest


# ---------------------------------------------------------------------------
# stream serialization


def _batch_to_dict(batch: StreamBatch) -> dict:
    return {
        "t": batch.t,
        "vocabulary": {
            "tokens": list(batch.vocabulary.tokens),
            "doc_freq": list(batch.vocabulary.doc_freq),
        },
        "documents": [
            {
                "id": d.id,
                "timestep": d.timestep,
                "counts": {str(k): v for k, v in sorted(d.counts.items())},
                "label": d.label,
            }
            for d in batch.documents
        ],
        "dropped_ids": list(batch.dropped_ids),
    }


def _batch_from_dict(payload: dict) -> StreamBatch:
    tokens = tuple(payload["vocabulary"]["tokens"])
    vocab = Vocabulary(
        tokens=tokens,
        index={tok: i for i, tok in enumerate(tokens)},
        doc_freq=tuple(payload["vocabulary"]["doc_freq"]),
    )
    docs = tuple(
        Document(
            id=d["id"],
            timestep=d["timestep"],
            counts={int(k): v for k, v in d["counts"].items()},
            label=d.get("label"),
        )
        for d in payload["documents"]
    )
    return StreamBatch(
        t=payload["t"], documents=docs, vocabulary=vocab,
        dropped_ids=tuple(payload["dropped_ids"]),
    )


def write_stream(batches, truth, out_dir, meta) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for batch in batches:
        save_json(_batch_to_dict(batch), os.path.join(out_dir, f"batch_{batch.t:03d}.json"))
    save_json(truth.to_dict(), os.path.join(out_dir, "ground_truth.json"))
    save_json(meta, os.path.join(out_dir, "stream_meta.json"))


def read_stream(stream_dir):
    if not os.path.isdir(stream_dir):
        raise CliError(EXIT_MISSING, f"stream directory not found: {stream_dir}")
    names = sorted(n for n in os.listdir(stream_dir) if n.startswith("batch_"))
    if not names:
        raise CliError(EXIT_MISSING, f"no batch files in {stream_dir}")
    batches = []
    for pos, name in enumerate(names):
        with open(os.path.join(stream_dir, name), encoding="utf-8") as fh:
            batch = _batch_from_dict(json.load(fh))
        if batch.t != pos:
            raise CliError(EXIT_CONFIG, f"batch file {name} holds timestep {batch.t}")
        batches.append(batch)
    return batches


def _read_k_real(stream_dir):
    path = os.path.join(stream_dir, "ground_truth.json")
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return [float(k) for k in json.load(fh)["k_real"]]


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    spec = {}
    if args.config:
        if not os.path.exists(args.config):
            raise CliError(EXIT_MISSING, f"config file not found: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            try:
                spec = json.load(fh)
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from exc
    schedule = spec.get("schedule", [list(s) for s in DEFAULT_SCHEDULE])
    n_topics = int(spec.get("n_topics", 5))
    v = int(spec.get("v", 300))
    docs_per_step = int(spec.get("docs_per_step", 200))
    doc_length = int(spec.get("doc_length", 60))
    concentration = float(spec.get("concentration", 0.1))
    seed = int(args.seed if args.seed is not None else spec.get("seed", 0))
    if docs_per_step < 1:
        raise CliError(EXIT_CONFIG, "docs_per_step must be positive")
    try:
        dists = make_synthetic_topics(n_topics, v, concentration=concentration, seed=seed)
        batches, truth = generate_synthetic_stream(
            schedule,
            dists,
            docs_per_step=docs_per_step,
            doc_length=doc_length,
            seed=seed,
            min_count=int(spec.get("min_count", 2)),
            max_doc_frac=float(spec.get("max_doc_frac", 0.7)),
        )
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid stream specification: {exc}") from exc
    meta = {
        "schedule": [list(s) for s in schedule],
        "n_topics": n_topics,
        "v": v,
        "docs_per_step": docs_per_step,
        "doc_length": doc_length,
        "concentration": concentration,
        "seed": seed,
    }
    write_stream(batches, truth, args.out, meta)
    print(f"wrote {len(batches)} batches to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _registry_state(reg: TopicRegistry, last_step: int) -> dict:
    return {
        "last_step": last_step,
        "next_id": reg.next_id,
        "id_maps": {str(t): {str(k): v for k, v in m.items()} for t, m in reg.id_maps.items()},
        "birth": {str(g): t for g, t in reg.birth.items()},
        "freq": {str(g): {str(t): n for t, n in s.items()} for g, s in reg.freq.items()},
    }


def _registry_from_state(state: dict) -> TopicRegistry:
    return TopicRegistry(
        next_id=state["next_id"],
        id_maps={int(t): {int(k): v for k, v in m.items()} for t, m in state["id_maps"].items()},
        birth={int(g): t for g, t in state["birth"].items()},
        freq={int(g): {int(t): n for t, n in s.items()} for g, s in state["freq"].items()},
    )


def _step_paths(t: int, merge: str) -> dict:
    return {
        "checkpoint": f"ckpt_{t:03d}.bin",
        "train_log": f"train_{t:03d}.jsonl",
        "actives": f"actives_{t:03d}.json",
        "assignment": f"assignment_{t:03d}.json" if t > 0 else None,
        "merge": f"merge_{merge}_{t:03d}.csv" if t > 0 and merge != "none" else None,
    }


def _warm_params(prev, prev_vocab, vocab, cfg_t, rho, seed):
    """Warm start across a vocabulary change, aligning encoder columns.

    The generic warm start copies tensors by position; encoder input
    columns are vocabulary-indexed, so shared tokens are re-mapped by
    string and columns for unseen tokens keep the fresh initialization.
    """
    params = warm_start(prev, cfg_t, rho=rho, seed=seed)
    fresh = init_params(cfg_t, rho, torch.Generator().manual_seed(seed))
    enc = fresh.tensors["enc_in_w"].detach().clone()
    prev_enc = prev.tensors["enc_in_w"].detach()
    prev_index = prev_vocab.index
    with torch.no_grad():
        for i, tok in enumerate(vocab.tokens):
            j = prev_index.get(tok)
            if j is not None:
                enc[:, i] = prev_enc[:, j]
        params.tensors["enc_in_w"].copy_(enc)
    return params


def _init_seed(config: RunConfig, t: int) -> int:
    ss = np.random.SeedSequence([config.seed, 1 + t])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def run_stream(config: RunConfig) -> RunManifest:
    """Train over the stream and write all per-timestep artifacts.

    Every timestep reloads its predecessor from the checkpoint on disk,
    so a resumed run walks exactly the same float path as an
    uninterrupted one.
    """
    torch.set_num_threads(1)
    batches = read_stream(config.stream_dir)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    table = EmbeddingTable(None, int(config.model.get("L", 16)), seed=config.seed)
    if config.embeddings:
        if not os.path.exists(config.embeddings):
            raise CliError(EXIT_MISSING, f"embedding file not found: {config.embeddings}")
        table = EmbeddingTable.from_file(
            config.embeddings, int(config.model.get("L", 16)), seed=config.seed
        )

    state_path = os.path.join(out, "registry_state.json")
    reg = TopicRegistry()
    start_t = 0
    if os.path.exists(state_path):
        with open(state_path, encoding="utf-8") as fh:
            state = json.load(fh)
        reg = _registry_from_state(state)
        start_t = state["last_step"] + 1
        for t in range(start_t):
            paths = _step_paths(t, config.merge)
            needed = [paths["checkpoint"], paths["actives"]]
            if paths["assignment"]:
                needed.append(paths["assignment"])
            for name in needed:
                if not os.path.exists(os.path.join(out, name)):
                    raise CliError(
                        EXIT_MISSING,
                        f"cannot resume: {name} missing for completed step {t}",
                    )

    diverged_at = None
    for t in range(start_t, len(batches)):
        batch = batches[t]
        paths = _step_paths(t, config.merge)
        v = batch.vocabulary.size
        cfg_t = config.model_config(v)
        rho = table.rows_for(batch.vocabulary).matrix
        if t == 0:
            gen = torch.Generator().manual_seed(_init_seed(config, 0))
            init = init_params(cfg_t, rho, gen)
        else:
            prev = load_params(os.path.join(out, _step_paths(t - 1, config.merge)["checkpoint"]))
            init = _warm_params(
                prev, batches[t - 1].vocabulary, batch.vocabulary, cfg_t, rho,
                seed=_init_seed(config, t),
            )
        try:
            params, _ = train_timestep(
                batch, init, config.train_config(),
                log_path=os.path.join(out, paths["train_log"]),
            )
        except TrainingDiverged as err:
            diverged_at = t
            sys.stderr.write(f"training diverged at timestep {t}: {err}\n")
            break

        counts = counts_matrix(batch.documents, v)
        theta = infer_theta(counts, params, cfg_t)
        k_pred, active = active_topics(theta, rule="argmax", n_min=config.active_n_min)
        if k_pred == 0:
            raise CliError(EXIT_NUMERIC, f"no active topics at timestep {t}")
        argmax = theta.theta.argmax(dim=1).numpy()
        pos_of = {local: p for p, local in enumerate(active)}
        doc_pos = [pos_of.get(int(k), -1) for k in argmax]
        # documents whose argmax fell below the activity cutoff follow
        # the most probable active topic instead
        if -1 in doc_pos:
            th = theta.theta.numpy()
            for i, p in enumerate(doc_pos):
                if p < 0:
                    doc_pos[i] = int(np.argmax(th[i, list(active)]))
        alpha_active = params.tensors["alpha"].detach().numpy()[list(active)].copy()

        assignment = None
        if t > 0:
            with open(os.path.join(out, _step_paths(t - 1, config.merge)["actives"]),
                      encoding="utf-8") as fh:
                prev_info = json.load(fh)
            alpha_prev = np.asarray(prev_info["alpha_active"], dtype=np.float64)
            if config.merge == "cot" and len(alpha_active) >= 2 and len(alpha_prev) >= 2:
                moved = cot_merge(alpha_active, alpha_prev, source_t=t, target_t=t - 1)
                alpha_active = moved.embeddings
                export_csv(moved, os.path.join(out, paths["merge"]))
            if config.trace == "algorithm2":
                assignment = trace_step(
                    alpha_active, alpha_prev,
                    eps=config.eps, r=config.r, eps_ridge=config.eps_ridge,
                )
            else:
                assignment = epsilon_neighbor_match(alpha_active, alpha_prev, eps=config.eps)
            if config.merge == "dot":
                merged = dot_merge(alpha_active, alpha_prev, assignment)
                export_csv(
                    TransportedSet(embeddings=merged, source_t=t, target_t=t - 1),
                    os.path.join(out, paths["merge"]),
                )
                for i, j, _ in assignment.matches:
                    alpha_active[i] = 0.5 * (alpha_active[i] + alpha_prev[j])
            with torch.no_grad():
                alpha = params.tensors["alpha"]
                alpha[list(active)] = torch.as_tensor(alpha_active, dtype=alpha.dtype)
            save_json(assignment_to_json(assignment, t), os.path.join(out, paths["assignment"]))

        counts_active = np.bincount(doc_pos, minlength=k_pred).tolist()
        update_registry(reg, assignment, t, counts_active)
        save_params(params, os.path.join(out, paths["checkpoint"]))
        save_json(
            {
                "t": t,
                "k_pred": k_pred,
                "active": [int(a) for a in active],
                "doc_argmax": [int(p) for p in doc_pos],
                "alpha_active": [[float(x) for x in row] for row in alpha_active],
            },
            os.path.join(out, paths["actives"]),
        )
        save_json(registry_to_json(reg), os.path.join(out, "registry.json"))
        save_json(_registry_state(reg, t), state_path)

    done = diverged_at if diverged_at is not None else len(batches)
    steps = list(range(done))
    all_paths = [_step_paths(t, config.merge) for t in steps]
    merges = [
        p["merge"] for p in all_paths
        if p["merge"] and os.path.exists(os.path.join(out, p["merge"]))
    ]
    manifest = RunManifest(
        config_hash=config.content_hash(),
        code_version=__version__,
        stream_dir=config.stream_dir,
        k_init=config.k_init,
        merge=config.merge,
        trace=config.trace,
        seed=config.seed,
        timesteps=steps,
        checkpoints=[p["checkpoint"] for p in all_paths],
        train_logs=[p["train_log"] for p in all_paths],
        actives=[p["actives"] for p in all_paths],
        assignments=[p["assignment"] for p in all_paths if p["assignment"]],
        merges=merges,
        registry="registry.json" if done > 0 else None,
        registry_state="registry_state.json" if done > 0 else None,
        diverged_at=diverged_at,
    )
    # training logs carry wall-clock timings, so they are listed but not
    # hashed; every other artifact must be bit-identical across reruns
    hashed = [p for p in manifest.referenced() if p not in manifest.train_logs]
    manifest.files = {p: _sha256_file(os.path.join(out, p)) for p in sorted(hashed)}
    save_json(manifest.to_json(), os.path.join(out, "manifest.json"))
    if diverged_at is not None:
        raise CliError(
            EXIT_NUMERIC,
            f"training diverged at timestep {diverged_at}; "
            f"last complete checkpoint is for timestep {diverged_at - 1}",
        )
    return manifest


def cmd_run(args) -> int:
    overrides = {
        "seed": args.seed,
        "k_init": args.k_init,
        "merge": args.merge,
        "trace": args.trace,
        "out_dir": args.out,
    }
    config = load_run_config(args.config, overrides)
    manifest = run_stream(config)
    print(f"run complete: {len(manifest.timesteps)} timesteps in {config.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _run_scores(manifest_path, manifest: RunManifest, tc_mode: str) -> dict:
    base = os.path.dirname(os.path.abspath(manifest_path))
    batches = read_stream(manifest.stream_dir)
    with open(os.path.join(base, manifest.registry_state), encoding="utf-8") as fh:
        reg = _registry_from_state(json.load(fh))
    tc_steps, td_steps = [], []
    k_pred_series = {}
    for t in manifest.timesteps:
        paths = _step_paths(t, manifest.merge)
        params = load_params(os.path.join(base, paths["checkpoint"]))
        with open(os.path.join(base, paths["actives"]), encoding="utf-8") as fh:
            info = json.load(fh)
        beta = topic_word_matrix(
            params.tensors["rho"], params.tensors["alpha"]
        ).detach().numpy()
        active = info["active"]
        k_pred_series[t] = len(active)
        docs = batches[t].documents
        tc_steps.append(
            topic_coherence([top_words(beta, k, 10) for k in active], docs, mode=tc_mode)
        )
        td_steps.append(topic_diversity([top_words(beta, k, 25) for k in active]))
    tc = float(np.mean(tc_steps))
    td = float(np.mean(td_steps))
    h = harmonic_mean(tc, td) if tc > 0.0 else None
    return {
        "k_init": manifest.k_init,
        "merge": manifest.merge,
        "trace": manifest.trace,
        "seed": manifest.seed,
        "tc": tc,
        "td": td,
        "h": h,
        "k_pred_series": {str(t): k for t, k in sorted(k_pred_series.items())},
        "k_pred_mean": float(np.mean(list(k_pred_series.values()))),
    }


def cmd_eval(args) -> int:
    manifests = [(p, load_manifest(p)) for p in args.manifest]
    try:
        runs = [_run_scores(p, m, args.tc_mode) for p, m in manifests]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"cannot score run: {exc}") from exc
    k_real = None
    if args.k_real:
        if not os.path.exists(args.k_real):
            raise CliError(EXIT_MISSING, f"k_real file not found: {args.k_real}")
        with open(args.k_real, encoding="utf-8") as fh:
            k_real = float(np.mean(json.load(fh)["k_real"]))
    else:
        series = _read_k_real(manifests[0][1].stream_dir)
        if series is not None:
            k_real = float(np.mean(series))

    report = {
        "code_version": __version__,
        "tc_mode": args.tc_mode,
        "runs": runs,
        "k_real": k_real,
        "tc": float(np.mean([r["tc"] for r in runs])),
        "td": float(np.mean([r["td"] for r in runs])),
        "h": None,
        "e": None,
        "delta": None,
        "p": None,
    }
    by_init = {}
    for r in runs:
        by_init.setdefault(r["k_init"], []).append(r)
    distinct = sorted(by_init)
    if all(r["h"] is not None for r in runs):
        report["h"] = float(np.mean([r["h"] for r in runs]))
    if k_real is not None and len(distinct) >= 2 and report["h"] is not None:
        try:
            agg = aggregate_report(
                {k: float(np.mean([r["tc"] for r in by_init[k]])) for k in distinct},
                {k: float(np.mean([r["td"] for r in by_init[k]])) for k in distinct},
                {k: float(np.mean([r["k_pred_mean"] for r in by_init[k]])) for k in distinct},
                k_real,
            )
        except ValueError as exc:
            raise CliError(EXIT_NUMERIC, f"metric aggregation failed: {exc}") from exc
        report.update(
            {"e": list(agg.e), "delta": agg.delta, "p": agg.p, "h": agg.h}
        )
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.manifest[0])),
                                   "eval_report.json")
    save_json(report, out)
    for path, manifest in manifests:
        manifest.metrics = out
        save_json(manifest.to_json(), path)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export


def _load_run_state(manifest_path, manifest):
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(os.path.join(base, manifest.registry_state), encoding="utf-8") as fh:
        reg = _registry_from_state(json.load(fh))
    infos = []
    for t in manifest.timesteps:
        with open(os.path.join(base, _step_paths(t, manifest.merge)["actives"]),
                  encoding="utf-8") as fh:
            infos.append(json.load(fh))
    return base, reg, infos


def cmd_export(args) -> int:
    manifest = load_manifest(args.manifest)
    base, reg, infos = _load_run_state(args.manifest, manifest)
    out_dir = args.out or base
    os.makedirs(out_dir, exist_ok=True)
    try:
        if args.what == "topics":
            batches = read_stream(manifest.stream_dir)
            payload = []
            for t in manifest.timesteps:
                params = load_params(
                    os.path.join(base, _step_paths(t, manifest.merge)["checkpoint"])
                )
                beta = topic_word_matrix(
                    params.tensors["rho"], params.tensors["alpha"]
                ).detach().numpy()
                tokens = batches[t].vocabulary.tokens
                entries = []
                for pos, local in enumerate(infos[t]["active"]):
                    entries.append({
                        "id": reg.id_maps[t][pos],
                        "words": [tokens[w] for w in top_words(beta, local, 10)],
                    })
                payload.append({"t": t, "topics": entries})
            path = os.path.join(out_dir, "topics.json")
            save_json({"timesteps": payload}, path)
        elif args.what == "freq":
            doc_argmax = {info["t"]: info["doc_argmax"] for info in infos}
            F, gids, ts = topic_frequency_series(reg, doc_argmax)
            path = os.path.join(out_dir, "freq.csv")
            frequency_series_to_csv(F, gids, ts, path)
        elif args.what == "pca":
            ids, ts, rows = [], [], []
            for info in infos:
                for pos, row in enumerate(info["alpha_active"]):
                    ids.append(reg.id_maps[info["t"]][pos])
                    ts.append(info["t"])
                    rows.append(row)
            coords = pca_project(np.asarray(rows))
            path = os.path.join(out_dir, "pca.csv")
            pca_to_csv(ids, ts, coords, path)
        else:  # matrix
            batches = read_stream(manifest.stream_dir)
            labels, gids = [], []
            for info in infos:
                t = info["t"]
                for doc, pos in zip(batches[t].documents, info["doc_argmax"]):
                    labels.append(doc.label)
                    gids.append(reg.id_maps[t][pos])
            M, topics, cats = topic_term_count_matrix(labels, gids)
            path = os.path.join(out_dir, "matrix.csv")
            count_matrix_to_csv(M, topics, cats, path)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"export failed: {exc}") from exc
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamtopics",
        description="streaming topic models with transport-based merging",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="write a synthetic stream directory")
    p_sim.add_argument("--config", help="JSON stream specification")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", required=True, help="output stream directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_run = sub.add_parser("run", help="train over a stream and write artifacts")
    p_run.add_argument("--config", required=True, help="JSON run configuration")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--k-init", type=int, default=None, dest="k_init")
    p_run.add_argument("--merge", choices=MERGE_STRATEGIES, default=None)
    p_run.add_argument("--trace", choices=TRACE_VARIANTS, default=None)
    p_run.add_argument("--out", default=None, help="override output directory")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score one or more finished runs")
    p_eval.add_argument("--manifest", nargs="+", required=True)
    p_eval.add_argument("--k-real", default=None, dest="k_real",
                        help="JSON file with a k_real series")
    p_eval.add_argument("--tc-mode", choices=("npmi", "umass"), default="npmi",
                        dest="tc_mode")
    p_eval.add_argument("--out", default=None, help="report path")
    p_eval.set_defaults(func=cmd_eval)

    p_exp = sub.add_parser("export", help="write CSV/JSON tables from a run")
    p_exp.add_argument("--manifest", required=True)
    p_exp.add_argument("--what", choices=("topics", "pca", "freq", "matrix"),
                       required=True)
    p_exp.add_argument("--out", default=None, help="output directory")
    p_exp.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
