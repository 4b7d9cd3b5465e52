"""Command line entry point.

Subcommands::

    alignlm stage1|stage2|stage3 --config <file> --out <ckpt>
    alignlm eval --ckpt <file> --manifest <file> --report <file> [--predictions <tsv>]
    alignlm ensemble --inputs a.tsv b.tsv --range lo,hi --out <file> [--labels <file>]
    alignlm gen-synthetic --n <int> --seed <int> --teacher-seed <int> --out-dir <dir>

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
Training subcommands also write the epoch log next to the checkpoint
(``<out>.log.jsonl``).
"""

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .corpus import build_corpus, write_corpus
from .data import load_manifest
from .errors import AlignError, ConfigError, DataError
from .metrics import read_predictions, write_predictions
from .numeric import Checkpoint
from .pipeline import StageConfig, ensemble, evaluate, format_config, load_config, run_stage1, run_stage2, run_stage3, write_log

RUNNERS = {"stage1": run_stage1, "stage2": run_stage2, "stage3": run_stage3}


def _cmd_stage(args):
    cfg = load_config(args.config)
    expected = int(args.command[-1])
    if cfg.stage != expected:
        raise ConfigError(f"{args.config}: stage = {cfg.stage} but command is {args.command}")
    ckpt = RUNNERS[args.command](cfg)
    out = Path(args.out)
    ckpt.save(out)
    write_log(f"{out}.log.jsonl", ckpt.log, append=False)
    last = [r for r in ckpt.log if r["metric"] == "srcc"]
    msg = f"{args.command}: {cfg.epochs} epochs, checkpoint {ckpt.digest()} -> {out}"
    if last:
        msg += f" (last val srcc {last[-1]['value']:.4f})"
    print(msg)


def _cmd_eval(args):
    ckpt = Checkpoint.load(args.ckpt)
    report = evaluate(ckpt, args.manifest, data_root=args.data_root or str(Path(args.manifest).parent))
    report.save(args.report, args.predictions)
    print(f"srcc {report.srcc:.6f} over {report.n} records")


def _read_labels(path):
    """Labels from a manifest (``id audio_ref caption label ...``) or an ``id score`` TSV."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
    if header[:2] == ["id", "score"]:
        return read_predictions(path)
    records = load_manifest(path)
    missing = [r.id for r in records if r.label is None]
    if missing:
        raise DataError(f"{path}: record {missing[0]!r} has no label")
    return {r.id: r.label for r in records}


def _parse_range(text):
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--range expects lo,hi, got {text!r}") from None
    if not hi > lo:
        raise ConfigError("--range needs lo < hi")
    return lo, hi


def _cmd_ensemble(args):
    lo, hi = _parse_range(args.range)
    members = [read_predictions(p) for p in args.inputs]
    labels = _read_labels(args.labels) if args.labels else None
    combined, score = ensemble(members, lo, hi, labels)
    write_predictions(args.out, combined)
    msg = f"ensemble of {len(members)} members, {len(combined)} ids -> {args.out}"
    if score is not None:
        msg += f"; srcc {score:.6f}"
    print(msg)


def desk_configs(paths, teacher_seed):
    """Desk-scale stage configs chained through ``stage1.ck`` and ``stage2.ck``."""
    rel = {k: Path(v).name for k, v in paths.items()}
    return {
        "stage1.cfg": StageConfig.desk(1, epochs=5, batch_size=16, train_manifest=rel["pretrain"]),
        "stage2.cfg": StageConfig.desk(2, train_manifest=rel["pretrain"], val_manifest=rel["pseudo_val"],
                                       init_ckpt="stage1.ck", teacher_seed=teacher_seed),
        "stage3.cfg": StageConfig.desk(3, train_manifest=rel["finetune_train"], val_manifest=rel["finetune_val"],
                                       init_ckpt="stage2.ck", teacher_seed=teacher_seed),
    }


def _cmd_gen(args):
    if args.n < 2:
        raise ConfigError("--n must be at least 2")
    corpus = build_corpus(args.n, args.seed, args.teacher_seed, k=args.k)
    out = Path(args.out_dir)
    paths = write_corpus(corpus, out)
    for name, cfg in desk_configs(paths, args.teacher_seed).items():
        # data_root defaults to the config's own directory
        text = "".join(line for line in format_config(cfg).splitlines(keepends=True)
                       if not line.startswith("data_root"))
        (out / name).write_text(text, encoding="utf-8")
    sizes = {k: len(v) for k, v in corpus.splits().items()}
    print(json.dumps(sizes, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="alignlm", description="Audio-text alignment scoring with a small causal LM.")
    p.add_argument("--version", action="version", version=f"alignlm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        s = sub.add_parser(name, help=f"train {name.replace('stage', 'stage ')}")
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
    s = sub.add_parser("eval", help="score a labelled manifest with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--predictions", help="also write an id/score TSV")
    s.add_argument("--data-root", help="directory for file: audio refs (default: the manifest's directory)")
    s = sub.add_parser("ensemble", help="rank-average prediction files")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--range", default="0,1")
    s.add_argument("--out", required=True)
    s.add_argument("--labels")
    s = sub.add_parser("gen-synthetic", help="write the planted synthetic corpus and desk configs")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--teacher-seed", type=int, required=True)
    s.add_argument("--k", type=int, default=3, help="negatives per matched pair in the labelled splits")
    s.add_argument("--out-dir", required=True)
    return p


COMMANDS = {"eval": _cmd_eval, "ensemble": _cmd_ensemble, "gen-synthetic": _cmd_gen, **{k: _cmd_stage for k in RUNNERS}}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except AlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
