"""Manifests, negative sampling, pseudo-label teachers, SpecAugment and batching.

Manifest format: UTF-8 TSV with a header row.  The first three columns are
``id, audio_ref, caption``; ``label`` and ``provenance`` may follow, in that
order.  Empty ``label`` cells mean "unlabelled".

Random draw orders (all streams come from :func:`alignlm.rng.stream`):

* ``negative_sample_augment`` uses stream ``(seed, "negatives")``.  For each
  original record ``i`` in input order and each of its ``k`` negatives it
  draws ``coin = integers(0, 2)`` (0 replaces the audio, 1 the caption), then
  repeatedly draws ``j = integers(0, N - 1)``, bumped by one when
  ``j >= i``, until the resulting pair is not a matched pair of the source
  set (at most ``N`` retries before falling back to the first legal
  candidate in index order).
* ``spec_augment`` uses stream ``(seed, "spec_augment")``.  For each time
  mask: ``width = integers(0, T_m + 1)`` then ``start = integers(0, T - width + 1)``;
  then for each channel mask: ``width = integers(0, F + 1)`` then
  ``start = integers(0, C - width + 1)``.
* ``make_batches`` uses ``permutation(n)`` from stream ``(seed, "batches")``.
"""

import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    AugmentError,
    DuplicateIdError,
    ManifestError,
    MaskParamError,
    TeacherCoverageError,
)
from .metrics import read_predictions
from .model import AudioFeatureSeq
from .rng import stream
from .synthetic import LATENT_DIM

PROVENANCES = ("matched", "negative_audio", "negative_text")
MANIFEST_COLUMNS = ("id", "audio_ref", "caption", "label", "provenance")


@dataclass(frozen=True)
class PairRecord:
    id: str
    audio_ref: str
    caption: str
    label: float | None = None
    provenance: str = "matched"
    source_ids: tuple = ()

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "matched" and not self.source_ids:
            object.__setattr__(self, "source_ids", (self.id,))


# manifests -------------------------------------------------------------------------
def load_manifest(path):
    text = Path(path).read_text(encoding="utf-8")
    rows = text.split("\n")
    if rows and rows[-1] == "":
        rows.pop()
    if not rows:
        raise ManifestError(f"{path}: empty manifest (header row required)", line=1)
    header = rows[0].rstrip("\r").split("\t")
    n_cols = len(header)
    if tuple(header) != MANIFEST_COLUMNS[:n_cols] or n_cols < 3:
        raise ManifestError(f"{path}: header must be {' '.join(MANIFEST_COLUMNS[:3])} [label [provenance]]", line=1)
    records = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        row = row.rstrip("\r")
        if not row.strip():
            continue
        cells = row.split("\t")
        if len(cells) != n_cols:
            raise ManifestError(f"expected {n_cols} columns, found {len(cells)}", line=lineno)
        rid, ref, caption = cells[0], cells[1], cells[2]
        if not rid:
            raise ManifestError("missing id", line=lineno)
        if not ref:
            raise ManifestError(f"record {rid!r}: missing audio_ref", line=lineno)
        if not caption:
            raise ManifestError(f"record {rid!r}: missing caption", line=lineno)
        label = None
        if n_cols > 3 and cells[3] != "":
            try:
                label = float(cells[3])
            except ValueError:
                raise ManifestError(f"record {rid!r}: bad label {cells[3]!r}", line=lineno) from None
            if not np.isfinite(label):
                raise ManifestError(f"record {rid!r}: non-finite label", line=lineno)
        provenance = "matched"
        if n_cols > 4 and cells[4] != "":
            provenance = cells[4]
            if provenance not in PROVENANCES:
                raise ManifestError(f"record {rid!r}: unknown provenance {provenance!r}", line=lineno)
        if rid in seen:
            raise DuplicateIdError(f"duplicate id {rid!r}", line=lineno)
        seen.add(rid)
        records.append(PairRecord(rid, ref, caption, label, provenance))
    return records


def write_manifest(path, records):
    buf = io.StringIO()
    buf.write("\t".join(MANIFEST_COLUMNS) + "\n")
    for r in records:
        for cell in (r.id, r.audio_ref, r.caption):
            if "\t" in cell or "\n" in cell:
                raise ManifestError(f"record {r.id!r}: tab or newline inside a field")
        label = "" if r.label is None else repr(float(r.label))
        buf.write(f"{r.id}\t{r.audio_ref}\t{r.caption}\t{label}\t{r.provenance}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# negative sampling ---------------------------------------------------------------------
def negative_sample_augment(records, k, seed):
    """Append ``k`` swapped-component negatives per matched record.

    A negative keeps one side of record ``i`` and takes the other side from
    a different record ``j``; pairs that coincide with any matched pair of
    the input are redrawn.  Output order: all originals, then negatives
    grouped by original.
    """
    records = list(records)
    n = len(records)
    if k < 0:
        raise AugmentError("k must be non-negative")
    if k == 0:
        return records
    if n < 2:
        raise AugmentError("negative sampling needs at least two matched records")
    matched = {(r.audio_ref, r.caption) for r in records}
    rng = stream(seed, "negatives")
    out = list(records)
    for i, rec in enumerate(records):
        for j_neg in range(k):
            replace_audio = int(rng.integers(0, 2)) == 0
            other = None
            for _ in range(n):
                j = int(rng.integers(0, n - 1))
                if j >= i:
                    j += 1
                if _pair(rec, records[j], replace_audio) not in matched:
                    other = j
                    break
            if other is None:
                other = next(
                    (j for j in range(n) if j != i and _pair(rec, records[j], replace_audio) not in matched),
                    None,
                )
                if other is None:
                    side = "audio" if replace_audio else "caption"
                    raise AugmentError(f"no legal {side} replacement for record {rec.id!r}")
            src = records[other]
            audio_ref, caption = _pair(rec, src, replace_audio)
            out.append(PairRecord(
                id=f"{rec.id}#neg{j_neg}",
                audio_ref=audio_ref,
                caption=caption,
                label=None,
                provenance="negative_audio" if replace_audio else "negative_text",
                source_ids=(rec.id, src.id),
            ))
    return out


def _pair(rec, other, replace_audio):
    return (other.audio_ref, rec.caption) if replace_audio else (rec.audio_ref, other.caption)


# teachers -------------------------------------------------------------------------------
@dataclass
class TeacherSpec:
    kind: str  # "planted_bilinear" or "external_file"
    seed: int = 0
    latent_dim: int = LATENT_DIM
    weight: np.ndarray | None = field(default=None, repr=False)
    path: str | None = None

    @classmethod
    def planted(cls, seed, latent_dim=LATENT_DIM, diagonal=2.0, noise=0.5, offset=0.5):
        """Bilinear teacher ``W = diagonal*I + noise*G - offset*11^T`` with ``G`` standard normal.

        The negative offset centres unrelated pairs below 0.5.
        """
        g = stream(seed, "teacher-weight").standard_normal((latent_dim, latent_dim))
        w = diagonal * np.eye(latent_dim) + noise * g - offset * np.ones((latent_dim, latent_dim))
        return cls("planted_bilinear", seed=seed, latent_dim=latent_dim, weight=w)

    @classmethod
    def external(cls, path):
        return cls("external_file", path=str(path))

    def planted_score(self, u, v):
        return float(expit(u @ self.weight @ v))


def pseudo_label(records, teacher, audio_embed=None, text_embed=None):
    """Records with ``label`` filled in by the teacher.

    The planted teacher scores ``logistic(u^T W v)`` with ``u = audio_embed(audio_ref)``
    and ``v = text_embed(caption)``; an external teacher looks labels up by record id.
    """
    if teacher.kind == "planted_bilinear":
        if audio_embed is None or text_embed is None:
            raise ValueError("planted teacher needs audio and text embedding functions")
        return [replace(r, label=teacher.planted_score(audio_embed(r.audio_ref), text_embed(r.caption)))
                for r in records]
    if teacher.kind == "external_file":
        scores = read_predictions(teacher.path)
        missing = [r.id for r in records if r.id not in scores]
        if missing:
            raise TeacherCoverageError(f"teacher file {teacher.path} lacks {len(missing)} ids, e.g. {missing[0]!r}")
        return [replace(r, label=scores[r.id]) for r in records]
    raise ValueError(f"unknown teacher kind {teacher.kind!r}")


# SpecAugment ----------------------------------------------------------------------------
@dataclass(frozen=True)
class SpecAugmentParams:
    freq_mask_width: int = 15
    time_mask_width: int = 30
    masks_per_axis: int = 1


def spec_augment_masks(n_frames, n_channels, params, seed):
    """The ``(start, width)`` lists for time and channel masks, in draw order."""
    if params.time_mask_width < 0 or params.freq_mask_width < 0:
        raise MaskParamError("mask widths must be non-negative")
    if params.time_mask_width > n_frames:
        raise MaskParamError(f"time mask width {params.time_mask_width} exceeds {n_frames} frames")
    if params.freq_mask_width > n_channels:
        raise MaskParamError(f"channel mask width {params.freq_mask_width} exceeds {n_channels} channels")
    rng = stream(seed, "spec_augment")
    time_masks, chan_masks = [], []
    for _ in range(params.masks_per_axis):
        w = int(rng.integers(0, params.time_mask_width + 1))
        time_masks.append((int(rng.integers(0, n_frames - w + 1)), w))
    for _ in range(params.masks_per_axis):
        w = int(rng.integers(0, params.freq_mask_width + 1))
        chan_masks.append((int(rng.integers(0, n_channels - w + 1)), w))
    return time_masks, chan_masks


def spec_augment(feat, params, seed):
    """Zero random frame bands and channel bands of an encoder feature matrix (returns a copy)."""
    frames = feat.frames if isinstance(feat, AudioFeatureSeq) else np.asarray(feat, dtype=np.float64)
    time_masks, chan_masks = spec_augment_masks(frames.shape[0], frames.shape[1], params, seed)
    out = frames.copy()
    for start, w in time_masks:
        out[start:start + w, :] = 0.0
    for start, w in chan_masks:
        out[:, start:start + w] = 0.0
    if isinstance(feat, AudioFeatureSeq):
        return AudioFeatureSeq(out, feat.frame_rate)
    return out


# batching ---------------------------------------------------------------------------------
def make_batches(records, batch_size, seed, drop_last=False):
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (each batch is one ranking list)")
    records = list(records)
    order = stream(seed, "batches").permutation(len(records))
    batches = [[records[i] for i in order[s:s + batch_size]] for s in range(0, len(records), batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches
