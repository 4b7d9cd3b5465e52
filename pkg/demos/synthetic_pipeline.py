"""All three training stages on the planted synthetic corpus.

The corpus has a hidden bilinear "teacher" that scores (clip, caption)
pairs, and "human" labels that are a warped, noisy copy of the same
judgement on a different audio domain.  The walk-through:

1. builds the corpus and looks at the label distributions,
2. trains stage 2 on teacher pseudo-labels (with swapped-pair negatives),
3. fine-tunes on the human labels with SpecAugment (stage 3), from the
   stage-2 checkpoint and from scratch, for two seeds,
4. compares everything on the held-out test split and rank-averages the
   two stage-3 seeds.

Stage 1 (captioning) is skipped here for speed; see caption_memorization.py.
Pass ``--n 2000`` for the full-size run (about a minute and a half).
"""

import argparse
import tempfile
import time

import numpy as np

from alignlm.corpus import build_corpus, write_corpus
from alignlm.pipeline import StageConfig, ensemble, evaluate, run_stage2, run_stage3

parser = argparse.ArgumentParser()
parser.add_argument("--n", type=int, default=600, help="matched pairs in the pretraining split")
args = parser.parse_args()

t0 = time.perf_counter()
corpus = build_corpus(args.n, seed=7, teacher_seed=7, k=3)
for name, recs in corpus.splits().items():
    labels = [r.label for r in recs if r.label is not None]
    summary = f"labels mean {np.mean(labels):.3f} sd {np.std(labels):.3f}" if labels else "unlabelled"
    print(f"{name:15s} {len(recs):5d} records, {summary}")

tmp = tempfile.TemporaryDirectory()
paths = {k: str(v) for k, v in write_corpus(corpus, tmp.name).items()}

# stage 2: learn the teacher's ranking from pseudo-labels
s2 = run_stage2(StageConfig.desk(2, train_manifest=paths["pretrain"], val_manifest=paths["pseudo_val"], seed=7))
for r in s2.log:
    if r["metric"] == "srcc":
        print(f"stage 2 epoch {r['epoch']}: srcc vs teacher {r['value']:.3f}")

# stage 3: the same architecture fine-tuned on human labels
ft = dict(train_manifest=paths["finetune_train"], val_manifest=paths["finetune_val"])
s3 = {seed: run_stage3(StageConfig.desk(3, seed=seed, **ft), s2) for seed in (7, 13)}
scratch = run_stage3(StageConfig.desk(3, seed=7, **ft))

test = corpus.finetune_test
reports = {"stage 2 only": evaluate(s2, test), "stage 3 only": evaluate(scratch, test)}
for seed, ck in s3.items():
    reports[f"stage 2 -> 3, seed {seed}"] = evaluate(ck, test)

print(f"\nsrcc against human labels on {len(test)} test pairs")
for name, rep in reports.items():
    print(f"  {name:22s} {rep.srcc:.3f}  (epoch {rep.notes.get('selected_epoch', '-')})")

labels = {r.id: r.label for r in test}
_, score = ensemble([reports[f"stage 2 -> 3, seed {s}"].predictions for s in (7, 13)], 0.0, 1.0, labels)
print(f"  {'rank-average of seeds':22s} {score:.3f}")
print(f"\n{time.perf_counter() - t0:.0f} s")
tmp.cleanup()
