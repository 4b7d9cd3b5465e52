"""Training objectives, written with the autodiff primitives."""

import numpy as np

from .errors import ListError, MaskError
from .numeric import Tensor, as_tensor, getitem, log_softmax, tsum


def _values(x):
    if isinstance(x, Tensor):
        return x
    if isinstance(x, dict):
        raise TypeError("pass aligned sequences, not mappings; see align_scores()")
    return as_tensor(np.asarray(x, dtype=np.float64))


def align_scores(pred, target):
    """Align two ``id -> score`` mappings by id; returns two arrays in ``pred`` order."""
    if set(pred) != set(target):
        raise ListError("prediction and target lists cover different ids")
    ids = list(pred)
    return (np.array([pred[i] for i in ids], dtype=np.float64),
            np.array([target[i] for i in ids], dtype=np.float64))


def listnet_loss(pred, target, temperature=1.0):
    """Top-1 ListNet: cross-entropy of softmax(pred) against softmax(target / temperature).

    ``pred`` may be a Tensor (gradients flow) or an array; ``target`` is
    treated as a constant.  Returns a scalar Tensor.
    """
    pred = _values(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.ndim != 1 or target.ndim != 1 or pred.shape != target.shape:
        raise ListError(f"score lists must be 1-D and equal length, got {pred.shape} and {target.shape}")
    if pred.shape[0] < 2:
        raise ListError("a ranking list needs at least two entries")
    t = target / temperature
    t = np.exp(t - t.max())
    p_target = t / t.sum()
    return -tsum(log_softmax(pred) * p_target.astype(pred.dtype))


def next_token_cross_entropy(logits, targets, loss_mask):
    """Mean negative log-likelihood of ``targets`` over positions where ``loss_mask`` is set.

    ``logits`` has shape ``(..., vocab)``; ``targets`` and ``loss_mask``
    match its leading shape.
    """
    logits = _values(logits)
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or loss_mask.shape != targets.shape:
        raise ListError(f"targets {targets.shape} / mask {loss_mask.shape} do not match logits {logits.shape}")
    positions = np.nonzero(loss_mask)
    if len(positions[0]) == 0:
        raise MaskError("loss mask selects no positions")
    logp = log_softmax(logits)
    picked = getitem(logp, positions + (targets[positions],))
    return -tsum(picked) * (1.0 / len(positions[0]))
