"""Stability study: K_pred across truncation levels and seeds.

Replicates the qualitative stability claim on the synthetic scenario:
the predicted number of topics should track the ground truth regardless
of the initialization K_init. Runs every (K_init, seed) pair, prints
per-step medians against K_real, reports step-10 birth detection, and
writes a combined metric report (Delta and P across initializations).
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from streamtopics.cli import RunConfig, main as cli_main, run_stream


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="stability_out")
    parser.add_argument("--k-inits", type=int, nargs="+", default=[15, 25],
                        dest="k_inits")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--merge", choices=("cot", "dot", "none"), default="cot")
    parser.add_argument("--epochs", type=int, default=150)
    parser.add_argument("--latent-dim", type=int, default=32, dest="latent_dim")
    return parser.parse_args(argv)


def run_one(stream, workdir, k_init, seed, args):
    out = os.path.join(workdir, f"run_{args.merge}_k{k_init}_s{seed}")
    config = RunConfig(
        stream_dir=stream,
        out_dir=out,
        k_init=k_init,
        merge=args.merge,
        seed=seed,
        active_n_min=2,
        model={"L": args.latent_dim},
        train={"epochs": args.epochs, "lr_max": 0.02, "batch_size": 64},
    )
    start = time.perf_counter()
    manifest = run_stream(config)
    minutes = (time.perf_counter() - start) / 60.0
    series = []
    for t in manifest.timesteps:
        with open(os.path.join(out, f"actives_{t:03d}.json"), encoding="utf-8") as fh:
            series.append(json.load(fh)["k_pred"])
    with open(os.path.join(out, "registry.json"), encoding="utf-8") as fh:
        registry = json.load(fh)
    births = sorted(tp["birth"] for tp in registry["global_topics"])
    print(f"K_init={k_init} seed={seed}: {minutes:.1f} min, "
          f"k_pred={series}, births={births}", flush=True)
    return out, series, births


def run(args) -> int:
    stream = os.path.join(args.workdir, "stream")
    os.makedirs(args.workdir, exist_ok=True)
    spec_path = os.path.join(args.workdir, "sim.json")
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump({}, fh)
    if not os.path.exists(os.path.join(stream, "stream_meta.json")):
        code = cli_main(["simulate", "--config", spec_path, "--out", stream])
        if code != 0:
            return code
    with open(os.path.join(stream, "ground_truth.json"), encoding="utf-8") as fh:
        k_real = json.load(fh)["k_real"]

    outs, summary = [], {}
    for k_init in args.k_inits:
        per_seed = {}
        for seed in args.seeds:
            out, series, births = run_one(stream, args.workdir, k_init, seed, args)
            outs.append(out)
            per_seed[seed] = {"k_pred": series, "births": births}
        stacked = np.array([per_seed[s]["k_pred"] for s in args.seeds])
        medians = np.median(stacked, axis=0).tolist()
        late = sum(
            1 for s in args.seeds if any(b >= 9 for b in per_seed[s]["births"])
        )
        summary[k_init] = {
            "runs": per_seed,
            "median_k_pred": medians,
            "late_birth_seeds": late,
        }
        print(f"\nK_init={k_init}: median k_pred = {medians}")
        print(f"             K_real        = {k_real}")
        print(f"             step-10 birth in {late}/{len(args.seeds)} seeds\n")

    manifests = [os.path.join(out, "manifest.json") for out in outs]
    report_path = os.path.join(args.workdir, "eval_report.json")
    code = cli_main(["eval", "--manifest", *manifests, "--out", report_path])
    if code != 0:
        return code
    with open(report_path, encoding="utf-8") as fh:
        report = json.load(fh)
    print(f"tc={report['tc']:.4f} td={report['td']:.4f} "
          f"h={report['h']} delta={report['delta']} p={report['p']}")

    with open(os.path.join(args.workdir, "stability_summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"k_real": k_real, "by_k_init": summary}, fh, indent=2,
                  sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(run(parse_args()))
