"""Synthetic corpora for the three training stages.

``build_corpus`` produces, for one corpus seed:

* ``pretrain``: matched pairs only (captioning pretraining and the source of
  pseudo-labelled ranking data),
* ``pseudo_val``: held-out matched pairs plus negatives, labelled by the
  planted teacher,
* ``finetune_{train,val,test}``: "human-style" sets whose labels are a
  monotone warp of the teacher score plus Gaussian noise.

Audio ids of different splits never overlap.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PairRecord, TeacherSpec, negative_sample_augment, pseudo_label, write_manifest
from .rng import stream, string_key
from .synthetic import CONCEPTS, audio_latent, caption_for_latent, text_latent

HUMAN_NOISE = 0.05


def human_warp(x):
    """Strictly increasing map of teacher scores onto the human-label scale."""
    return np.asarray(x) ** 2


def matched_pairs(prefix, n, corpus_seed, generated=False):
    out = []
    for i in range(n):
        rid = f"{prefix}{i:06d}"
        ref = f"{'gen' if generated else 'syn'}-{corpus_seed}-{rid}"
        out.append(PairRecord(rid, ref, caption_for_latent(audio_latent(ref))))
    return out


PERTURBATIONS = ("matched", "drop", "add", "replace", "shuffle")


def _concepts_of(caption):
    return [w for w in caption.split(" and ")]


def partial_pairs(prefix, n, corpus_seed, generated=True):
    """Pairs whose caption only partly describes the audio.

    Mimics text-to-audio outputs judged against their prompts: each caption
    starts from the matched one and, chosen uniformly per record, is kept,
    loses a concept, gains a concept, has one concept replaced, or is
    reordered.
    """
    out = []
    for rec in matched_pairs(prefix, n, corpus_seed, generated):
        rng = stream(corpus_seed, "partial", string_key(rec.id))
        words = _concepts_of(rec.caption)
        others = [c for c in CONCEPTS if c not in words]
        op = PERTURBATIONS[int(rng.integers(0, len(PERTURBATIONS)))]
        if op == "drop" and len(words) > 1:
            words.pop(int(rng.integers(0, len(words))))
        elif op == "add" and len(words) < 3:
            words.insert(int(rng.integers(0, len(words) + 1)), others[int(rng.integers(0, len(others)))])
        elif op == "replace" or (op in ("drop", "add")):
            words[int(rng.integers(0, len(words)))] = others[int(rng.integers(0, len(others)))]
        elif op == "shuffle":
            words = [words[i] for i in rng.permutation(len(words))]
        out.append(replace(rec, caption=" and ".join(words)))
    return out


def teacher_label(records, teacher):
    return pseudo_label(records, teacher, audio_latent, text_latent)


def human_label(records, teacher, seed, noise=HUMAN_NOISE):
    """``warp(teacher score) + N(0, noise^2)``, noise keyed per record id."""
    scored = teacher_label(records, teacher)
    out = []
    for r in scored:
        eps = stream(seed, "human-noise", string_key(r.id)).standard_normal()
        out.append(replace(r, label=float(human_warp(r.label) + noise * eps)))
    return out


@dataclass
class SyntheticCorpus:
    teacher: TeacherSpec
    pretrain: list
    pseudo_val: list
    finetune_train: list
    finetune_val: list
    finetune_test: list
    meta: dict = field(default_factory=dict)

    def splits(self):
        return {
            "pretrain": self.pretrain,
            "pseudo_val": self.pseudo_val,
            "finetune_train": self.finetune_train,
            "finetune_val": self.finetune_val,
            "finetune_test": self.finetune_test,
        }


def build_corpus(n, seed, teacher_seed, k=3, n_pseudo_val=None, n_finetune=None, n_finetune_eval=None):
    """Generate every split; sizes default to fractions of ``n`` (matched pretraining pairs)."""
    teacher = TeacherSpec.planted(teacher_seed)
    n_pseudo_val = n_pseudo_val if n_pseudo_val is not None else max(n // 8, 8)
    n_finetune = n_finetune if n_finetune is not None else max(n // 10, 8)
    n_finetune_eval = n_finetune_eval if n_finetune_eval is not None else max(n // 20, 8)

    def augmented(prefix, count, tag, partial=False):
        base = (partial_pairs if partial else matched_pairs)(prefix, count, seed)
        return negative_sample_augment(base, k, seed * 1000 + tag) if k else base

    pretrain = matched_pairs("p", n, seed)
    pseudo_val = teacher_label(augmented("v", n_pseudo_val, 1), teacher)
    ft_train = human_label(augmented("f", n_finetune, 2, partial=True), teacher, seed)
    ft_val = human_label(augmented("d", n_finetune_eval, 3, partial=True), teacher, seed)
    ft_test = human_label(augmented("t", n_finetune_eval, 4, partial=True), teacher, seed)
    meta = {"n": n, "seed": seed, "teacher_seed": teacher_seed, "k": k}
    return SyntheticCorpus(teacher, pretrain, pseudo_val, ft_train, ft_val, ft_test, meta)


def write_corpus(corpus, out_dir):
    """Write manifests plus ``teacher.txt`` (planted-teacher description) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, records in corpus.splits().items():
        paths[name] = out / f"{name}.tsv"
        write_manifest(paths[name], records)
    t = corpus.teacher
    (out / "teacher.txt").write_text(
        f"kind = {t.kind}\nseed = {t.seed}\nlatent_dim = {t.latent_dim}\n", encoding="utf-8"
    )
    return paths
