"""End-to-end run: corpus, three models, length sweep, predicted-length eval, histograms.

    python scripts/run_experiment.py --out runs/default
    python scripts/run_experiment.py --out runs/quick --sizes 300,50,50 --epochs 3

Everything goes through the ``lencap`` command line, so each step can be
rerun by hand from the commands echoed to stderr.
"""

import argparse
import csv
import sys
from pathlib import Path

from lencap.cli import main

VARIANTS = ("base", "lenemb", "marker")


def lencap(*argv) -> None:
    argv = [str(a) for a in argv]
    print("$ lencap " + " ".join(argv), file=sys.stderr)
    code = main(argv)
    if code:
        sys.exit(code)


def print_sweep(path: Path) -> None:
    rows = list(csv.DictReader(open(path)))
    cols = ["bleu4", "ciderD", "mcider", "ber", "lenmse"]
    print(f"{'model':<12} {'T':>3} " + " ".join(f"{c:>8}" for c in cols))
    for r in rows:
        print(f"{r['model']:<12} {r['desired_length']:>3} "
              + " ".join(f"{float(r[c]):8.2f}" for c in cols))


def run(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    lencap("gen-data", "--out", data, "--sizes", args.sizes, "--seed", args.seed, "--force")

    ckpts = {}
    for variant in VARIANTS:
        ckpts[variant] = out / f"{variant}.json"
        extra = ["--epochs", args.epochs] if args.epochs else []
        lencap("train", "--data", data, "--model", variant, "--seed", args.seed,
               "--out", ckpts[variant], *extra)

    sweep = out / "sweep.csv"
    lencap("sweep", "--ckpt", *ckpts.values(), "--data", data, "--beam", args.beam,
           "--out", sweep)

    cands = []
    for variant in ("lenemb", "marker"):
        path = out / f"{variant}_pred.jsonl"
        lencap("caption", "--ckpt", ckpts[variant], "--data", data, "--predict-length",
               "--beam", args.beam, "--out", path)
        lencap("eval", "--cands", path, "--data", data, "--out", out / f"{variant}_pred.json")
        cands.append(path)
    path = out / "base_free.jsonl"
    lencap("caption", "--ckpt", ckpts["base"], "--data", data, "--beam", args.beam,
           "--out", path)
    lencap("eval", "--cands", path, "--data", data, "--out", out / "base_free.json")
    cands.append(path)
    lencap("len-dist", "--cands", *cands, "--data", data, "--out", out / "len_dist.csv")

    print_sweep(sweep)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/default")
    p.add_argument("--sizes", default="2000,250,250")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None, help="override the training default")
    p.add_argument("--beam", type=int, default=5)
    run(p.parse_args())
