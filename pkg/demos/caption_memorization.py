"""Captioning pretraining on eight clips: the model learns to say what it hears.

A freshly initialised model emits noise.  After stage-1 training on eight
synthetic (clip, caption) pairs, greedy decoding reproduces each caption.
Runs in a few seconds.
"""

import tempfile
from pathlib import Path

from alignlm import model as M
from alignlm.corpus import matched_pairs
from alignlm.data import write_manifest
from alignlm.pipeline import StageConfig, initial_checkpoint, run_stage1

cfg = M.preset("desk")
records = matched_pairs("demo", 8, corpus_seed=7)

# the synthetic clips are feature matrices built from a few planted concepts
feat = M.encode_audio(records[0].audio_ref, cfg)
print(f"{records[0].audio_ref}: {feat.frames.shape[0]} frames x {feat.frames.shape[1]} channels, "
      f"pooled to {M.temporal_average_pool(feat, cfg.audio_tokens).shape}")

fresh = initial_checkpoint(cfg, seed=7)
print("\nbefore training:")
for r in records[:3]:
    print("  ", repr(M.detokenize(M.generate_caption(r.audio_ref, fresh.params, cfg, max_len=30))))

with tempfile.TemporaryDirectory() as tmp:
    manifest = Path(tmp) / "eight.tsv"
    write_manifest(manifest, records)
    ckpt = run_stage1(StageConfig.desk(1, train_manifest=str(manifest), seed=7))

losses = [r["value"] for r in ckpt.log if r["metric"] == "loss"]
print(f"\nnext-token loss: epoch 1 {losses[0]:.3f}, epoch {len(losses)} {losses[-1]:.5f}")

print("\nafter training (reference | generated):")
hits = 0
for r in records:
    text = M.detokenize(M.generate_caption(r.audio_ref, ckpt.params, cfg, max_len=40))
    hits += text == r.caption
    print(f"  {r.caption:40s} | {text}")
print(f"\n{hits}/{len(records)} captions reproduced exactly")
