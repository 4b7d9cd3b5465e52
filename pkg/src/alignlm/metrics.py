"""Rank statistics, rank-averaging ensembles and caption similarity.

A *prediction set* is a plain ``dict`` mapping example id to score.  On disk
it is a UTF-8 TSV with header ``id<TAB>score`` and rows sorted by id.
"""

from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateError, EnsembleError, ListError
from .rng import stream


def rank_transform(values):
    """Ascending ranks starting at 1; tied values share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    n = values.size
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(n, dtype=np.float64)
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def _as_pair(a, b):
    if isinstance(a, dict) or isinstance(b, dict):
        if not (isinstance(a, dict) and isinstance(b, dict)):
            raise ListError("cannot align a mapping with a plain sequence")
        if set(a) != set(b):
            raise ListError("score lists cover different ids")
        ids = sorted(a)
        return (np.array([a[i] for i in ids], dtype=np.float64),
                np.array([b[i] for i in ids], dtype=np.float64))
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ListError(f"length mismatch {a.size} vs {b.size}")
    return a, b


def srcc(a, b):
    """Spearman rank correlation: Pearson correlation of the average-tie ranks.

    Accepts two equal-length sequences or two mappings over the same ids.
    """
    a, b = _as_pair(a, b)
    if a.size < 2:
        raise ListError("SRCC needs at least two items")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ListError("SRCC inputs must be finite")
    ra = rank_transform(a)
    rb = rank_transform(b)
    ra -= ra.mean()
    rb -= rb.mean()
    saa = np.dot(ra, ra)
    sbb = np.dot(rb, rb)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateError("SRCC is undefined for a constant list")
    r = float(np.dot(ra, rb) / np.sqrt(saa * sbb))
    return min(1.0, max(-1.0, r))


def rank_average_ensemble(members, out_lo=0.0, out_hi=1.0):
    """Average the members' ranks per id, then map the mean ranks affinely onto ``[out_lo, out_hi]``.

    If every id ends up with the same mean rank the midpoint is returned for all.
    """
    if len(members) < 1:
        raise EnsembleError("need at least one ensemble member")
    if not out_lo < out_hi:
        raise EnsembleError(f"invalid output range [{out_lo}, {out_hi}]")
    ids = sorted(members[0])
    if len(ids) < 2:
        raise EnsembleError("ensembling needs at least two ids")
    for m in members[1:]:
        if set(m) != set(ids):
            raise EnsembleError("ensemble members cover different id sets")
    mean_rank = np.zeros(len(ids))
    for m in members:
        mean_rank += rank_transform([m[i] for i in ids])
    mean_rank /= len(members)
    lo, hi = mean_rank.min(), mean_rank.max()
    if hi == lo:
        out = np.full(len(ids), (out_lo + out_hi) / 2.0)
    else:
        out = out_lo + (mean_rank - lo) * ((out_hi - out_lo) / (hi - lo))
    return {i: float(v) for i, v in zip(ids, out)}


# caption similarity ---------------------------------------------------------------
_BOUNDARY = 256


def trigram_embedding(tokens, dim=64, seed=7):
    """Unit-norm seeded random projection of byte-trigram counts.

    The byte sequence is framed by a boundary symbol (256) on each side so
    that texts shorter than three bytes still produce trigrams.  Each
    distinct trigram ``(a, b, c)`` owns a Gaussian direction drawn from the
    stream ``(seed, "trigram", a, b, c)``.
    """
    tokens = [int(t) for t in tokens]
    if not tokens:
        return np.zeros(dim)
    framed = [_BOUNDARY] + tokens + [_BOUNDARY]
    counts = {}
    for i in range(len(framed) - 2):
        key = tuple(framed[i:i + 3])
        counts[key] = counts.get(key, 0) + 1
    vec = np.zeros(dim)
    for key in sorted(counts):
        vec += counts[key] * stream(seed, "trigram", *key).standard_normal(dim)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def caption_similarity_score(generated, reference, embedder=None):
    """Cosine similarity of text embeddings for two token lists; 0.0 if either is empty."""
    if len(generated) == 0 or len(reference) == 0:
        return 0.0
    embedder = embedder or trigram_embedding
    u = np.asarray(embedder(generated), dtype=np.float64)
    v = np.asarray(embedder(reference), dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# prediction-set files ------------------------------------------------------------
def write_predictions(path, predictions):
    lines = ["id\tscore"]
    for key in sorted(predictions):
        if "\t" in key or "\n" in key:
            raise DataError(f"id {key!r} contains a tab or newline")
        lines.append(f"{key}\t{float(predictions[key])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path):
    text = Path(path).read_text(encoding="utf-8")
    rows = text.splitlines()
    if not rows or rows[0].split("\t")[:2] != ["id", "score"]:
        raise DataError(f"{path}: missing 'id<TAB>score' header")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row.strip():
            continue
        parts = row.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: line {lineno}: expected 2 columns")
        key, raw = parts
        if key in out:
            raise DataError(f"{path}: line {lineno}: duplicate id {key!r}")
        try:
            value = float(raw)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: bad score {raw!r}") from None
        if not np.isfinite(value):
            raise DataError(f"{path}: line {lineno}: non-finite score")
        out[key] = value
    return out
