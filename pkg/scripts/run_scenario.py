"""End-to-end demo on the 11-step synthetic scenario.

Simulates the default stream (four of five topics active, one
disappears at step 7, a fresh one emerges at step 10), trains with the
chosen merge strategy, scores the run, and exports every artifact
table. Prints the per-step K_pred against the ground truth.
"""

import argparse
import json
import os
import sys

from streamtopics.cli import RunConfig, main as cli_main, run_stream


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="scenario_out")
    parser.add_argument("--k-init", type=int, default=15, dest="k_init")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--merge", choices=("cot", "dot", "none"), default="cot")
    parser.add_argument("--epochs", type=int, default=150)
    parser.add_argument("--latent-dim", type=int, default=32, dest="latent_dim")
    return parser.parse_args(argv)


def run(args) -> int:
    stream = os.path.join(args.workdir, "stream")
    out = os.path.join(args.workdir, f"run_{args.merge}_k{args.k_init}_s{args.seed}")
    os.makedirs(args.workdir, exist_ok=True)

    spec_path = os.path.join(args.workdir, "sim.json")
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump({}, fh)  # defaults are the 11-step scenario
    if not os.path.exists(os.path.join(stream, "stream_meta.json")):
        code = cli_main(["simulate", "--config", spec_path, "--out", stream])
        if code != 0:
            return code

    config = RunConfig(
        stream_dir=stream,
        out_dir=out,
        k_init=args.k_init,
        merge=args.merge,
        seed=args.seed,
        active_n_min=2,
        model={"L": args.latent_dim},
        train={"epochs": args.epochs, "lr_max": 0.02, "batch_size": 64},
    )
    manifest = run_stream(config)

    with open(os.path.join(stream, "ground_truth.json"), encoding="utf-8") as fh:
        k_real = json.load(fh)["k_real"]
    print(f"\n{'t':>3} {'K_real':>7} {'K_pred':>7}")
    for t in manifest.timesteps:
        with open(os.path.join(out, f"actives_{t:03d}.json"), encoding="utf-8") as fh:
            k_pred = json.load(fh)["k_pred"]
        print(f"{t:>3} {k_real[t]:>7} {k_pred:>7}")

    with open(os.path.join(out, "registry.json"), encoding="utf-8") as fh:
        registry = json.load(fh)
    births = sorted(tp["birth"] for tp in registry["global_topics"])
    print(f"\nregistry births: {births}")

    manifest_path = os.path.join(out, "manifest.json")
    code = cli_main(["eval", "--manifest", manifest_path])
    if code != 0:
        return code
    for what in ("topics", "freq", "pca", "matrix"):
        code = cli_main(["export", "--manifest", manifest_path, "--what", what])
        if code != 0:
            return code
    print(f"\nartifacts in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(run(parse_args()))
