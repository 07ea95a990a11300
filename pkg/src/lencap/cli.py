"""``lencap`` command line: gen-data, train, caption, eval, sweep, len-dist.

Exit codes: 0 ok, 2 usage error, 3 data/format error, 4 incompatible inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

from . import checkpoint, metrics
from .captioner import VARIANTS, Captioner, TrainConfig, train
from .data import (TARGET_LENGTHS, Corpus, build_vocab, gen_corpus, read_corpus,
                   write_corpus)
from .decoding import (DecodeOpts, generate_free, generate_with_length,
                       generate_with_predicted_length)

log = logging.getLogger("lencap")

CORPUS_FILE = "corpus.jsonl"
VOCAB_FILE = "vocab.txt"
SWEEP_HEADER = ["model", "desired_length", "bleu4", "rougeL", "ciderD", "mcider", "ber", "lenmse"]


class CliError(Exception):
    code = 1


class UsageError(CliError):
    code = 2


class DataError(CliError):
    code = 3


class IncompatibleError(CliError):
    code = 4


def default_seed() -> int:
    return int(os.environ.get("LENCAP_SEED", "0"))


def corpus_path(data: str) -> Path:
    p = Path(data)
    return p / CORPUS_FILE if p.is_dir() else p


def load_corpus(data: str) -> Corpus:
    path = corpus_path(data)
    try:
        return read_corpus(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc


def load_model(path: str) -> tuple[Captioner, dict]:
    try:
        return checkpoint.load(Path(path))
    except checkpoint.CheckpointError as exc:
        raise IncompatibleError(str(exc)) from exc


def check_compatible(model: Captioner, corpus: Corpus) -> None:
    if build_vocab(corpus).content_hash() != model.vocab.content_hash():
        raise IncompatibleError("checkpoint vocabulary does not match the corpus")


def model_tag(model: Captioner, meta: dict, fixlen: bool = False) -> str:
    tag = meta.get("tag") or model.variant
    return f"{tag}+fixlen" if fixlen and model.variant == "base" else tag


def parse_sizes(text: str) -> tuple[int, int, int]:
    try:
        sizes = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--sizes expects train,val,test integers, got {text!r}")
    if len(sizes) != 3 or min(sizes) < 1:
        raise UsageError("--sizes expects three positive integers")
    return sizes


def parse_lengths(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"--lengths expects comma-separated integers, got {text!r}")


# commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} already exists; pass --force to overwrite")
    n_train, n_val, n_test = parse_sizes(args.sizes)
    corpus = gen_corpus(n_train, n_val, n_test, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, out / CORPUS_FILE)
    build_vocab(corpus).save(out / VOCAB_FILE)
    print(f"wrote {len(corpus.images)} images to {out / CORPUS_FILE}")
    return 0


def cmd_train(args) -> int:
    corpus = load_corpus(args.data)
    if not corpus.split("train"):
        raise DataError("corpus has no training images")
    vocab = build_vocab(corpus, args.model)
    model = Captioner.create(args.model, vocab, seed=args.seed, embed_dim=args.embed_dim,
                             hidden_dim=args.hidden_dim,
                             feature_dim=len(corpus.images[0].features))
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      lr_decay=args.lr_decay, seed=args.seed)
    model, result = train(corpus, model, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"seed": args.seed, "epochs": args.epochs, "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss, "tag": args.tag or args.model}
    checkpoint.save(model, out, meta)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in result.rows:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])
    print(f"best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {out}")
    return 0


def caption_split(model: Captioner, corpus: Corpus, split: str, opts: DecodeOpts,
                  length: int | None = None, predict: bool = False,
                  fixlen: bool = False) -> list[dict]:
    images = corpus.split(split)
    if not images:
        raise DataError(f"split {split!r} is empty")
    if length is not None and predict:
        raise UsageError("--length and --predict-length are exclusive")
    if length is not None and model.variant == "base" and not fixlen:
        raise UsageError("the base model cannot condition on length; add --fixlen")
    if predict and model.variant == "base":
        raise UsageError("--predict-length needs a lenemb or marker model")
    if length is None and not predict and model.variant == "lenemb":
        raise UsageError("lenemb needs --length or --predict-length")
    if length is not None and not 1 <= length <= model.config.max_length:
        raise UsageError(f"--length must lie in 1..{model.config.max_length}")
    if fixlen and length is None:
        raise UsageError("--fixlen needs --length")

    rows = []
    for im in images:
        if length is not None:
            cap = generate_with_length(model, im.features, length, opts,
                                       fixlen=True if fixlen else None)
        elif predict:
            cap = generate_with_predicted_length(model, im.features, opts)
        else:
            cap = generate_free(model, im.features, opts)
        rows.append({"id": im.id, "caption": model.vocab.decode(cap.tokens),
                     "desired_length": cap.desired_length,
                     "chosen_length": cap.chosen_length, "logprob": cap.logprob})
    return rows


def write_jsonl(rows: list[dict], path: str | None) -> None:
    text = "".join(json.dumps(r) + "\n" for r in rows)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def read_candidates(path: str) -> list[dict]:
    try:
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read candidates {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no candidates")
    return rows


def cmd_caption(args) -> int:
    model, _ = load_model(args.ckpt)
    corpus = load_corpus(args.data)
    check_compatible(model, corpus)
    opts = DecodeOpts(beam_size=args.beam, hard=args.fixlen)
    rows = caption_split(model, corpus, args.split, opts, args.length, args.predict_length,
                         args.fixlen)
    write_jsonl(rows, args.out)
    return 0


def evaluate_candidates(rows: list[dict], corpus: Corpus, split: str) -> metrics.EvalReport:
    images = corpus.split(split)
    by_id = {int(r["id"]): r for r in rows}
    missing = [im.id for im in images if im.id not in by_id]
    if missing:
        raise DataError("candidates missing for image ids: " + " ".join(map(str, missing)))
    cands = [list(by_id[im.id]["caption"]) for im in images]
    refs = [im.refs for im in images]
    targets = [by_id[im.id].get("desired_length") or by_id[im.id].get("chosen_length")
               for im in images]
    desired = targets if all(t is not None for t in targets) else None
    return metrics.evaluate(cands, refs, desired)


def format_report(report: metrics.EvalReport) -> str:
    names = [("B4", "bleu4"), ("R", "rougeL"), ("C", "ciderD"), ("mC", "mcider"),
             ("BER", "ber"), ("LenMSE", "lenmse")]
    shown = [(h, k) for h, k in names if k in report.metrics]
    head = "  ".join(f"{h:>8}" for h, _ in shown)
    vals = "  ".join(f"{report.metrics[k]:8.2f}" for _, k in shown)
    return head + "\n" + vals


def cmd_eval(args) -> int:
    corpus = load_corpus(args.data)
    report = evaluate_candidates(read_candidates(args.cands), corpus, args.split)
    print(format_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    hist_path = args.hist or (str(Path(args.out).with_suffix(".hist.csv")) if args.out else None)
    if hist_path:
        with open(hist_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["length", "count"])
            for length, count in report.histogram.items():
                w.writerow([length, count])
    return 0


def sweep_rows(models: list[tuple[Captioner, dict]], corpus: Corpus, split: str,
               lengths: list[int], beam: int) -> list[dict]:
    out = []
    for model, meta in models:
        fixlen = model.variant == "base"
        tag = model_tag(model, meta, fixlen)
        for T in lengths:
            rows = caption_split(model, corpus, split, DecodeOpts(beam_size=beam), T,
                                 fixlen=fixlen)
            m = evaluate_candidates(rows, corpus, split).metrics
            out.append({"model": tag, "desired_length": T,
                        **{k: m[k] for k in SWEEP_HEADER[2:]}})
            log.info("%s T=%d lenmse=%.3f ber=%.1f mcider=%.1f", tag, T, m["lenmse"],
                     m["ber"], m["mcider"])
    return out


def cmd_sweep(args) -> int:
    corpus = load_corpus(args.data)
    models = []
    for path in args.ckpt:
        model, meta = load_model(path)
        check_compatible(model, corpus)
        models.append((model, meta))
    rows = sweep_rows(models, corpus, args.split, parse_lengths(args.lengths), args.beam)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return 0


def length_table(cand_sets: dict[str, list[dict]], corpus: Corpus, split: str):
    """Rows of (length, count per candidate set..., reference mass).

    The reference column is the corpus reference-length histogram rescaled
    to one unit per image.
    """
    images = corpus.split(split)
    ids = {im.id for im in images}
    hists = {}
    for name, rows in cand_sets.items():
        hists[name] = metrics.length_histogram([r["caption"] for r in rows if int(r["id"]) in ids])
    # each image spreads one unit of mass over its references, so this
    # column sums to the split size like the model columns
    ref_mass: dict[int, Fraction] = {}
    for im in images:
        for ref in im.refs:
            ref_mass[len(ref)] = ref_mass.get(len(ref), Fraction(0)) + Fraction(1, len(im.refs))
    hists["references"] = {k: float(v) if v.denominator > 1 else int(v)
                           for k, v in sorted(ref_mass.items())}
    lengths = sorted({k for h in hists.values() for k in h})
    header = ["length"] + [f"count_{name}" for name in hists]
    table = [[L] + [h.get(L, 0) for h in hists.values()] for L in lengths]
    return header, table


def cmd_len_dist(args) -> int:
    corpus = load_corpus(args.data)
    cand_sets = {}
    for path in args.cands:
        name = Path(path).stem
        if name in cand_sets:
            raise UsageError(f"two candidate files share the name {name!r}")
        cand_sets[name] = read_candidates(path)
    header, table = length_table(cand_sets, corpus, args.split)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lencap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--sizes", default="2000,250,250", help="train,val,test image counts")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a captioner")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=VARIANTS)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--lr-decay", type=float, default=TrainConfig.lr_decay,
                   help=f"lr multiplier every {TrainConfig.lr_decay_every} epochs")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--tag", default=None, help="model name used in sweep rows")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="training-log CSV (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--length", type=int, default=None)
    g.add_argument("--predict-length", action="store_true")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--fixlen", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score a candidates file")
    p.add_argument("--cands", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--hist", default=None, help="length histogram CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="score models across desired lengths")
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--lengths", default=",".join(map(str, TARGET_LENGTHS)))
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("len-dist", help="caption length histograms")
    p.add_argument("--cands", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_len_dist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"lencap: error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"lencap: error: {exc}", file=sys.stderr)
        return DataError.code


if __name__ == "__main__":
    sys.exit(main())
