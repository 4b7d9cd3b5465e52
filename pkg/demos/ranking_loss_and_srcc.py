"""Ranking losses, rank correlation and rank averaging on small hand-made lists.

Run with ``python3 demos/ranking_loss_and_srcc.py``.
"""

import numpy as np

from alignlm.losses import listnet_loss
from alignlm.metrics import rank_average_ensemble, rank_transform, srcc
from alignlm.numeric import ParamSet, forward_backward

# ListNet compares two top-1 distributions: softmax(target / T) and softmax(pred).
# Two tied scores give a uniform distribution, so the loss is ln 2.
print("ties       ", float(listnet_loss([0.0, 0.0], [0.0, 0.0]).data), np.log(2))

# Swapping the order of a two-item list costs more than getting it right.
right = float(listnet_loss([1.0, 0.0], [1.0, 0.0]).data)
wrong = float(listnet_loss([1.0, 0.0], [0.0, 1.0]).data)
print(f"right order {right:.4f}   swapped {wrong:.4f}")

# Only the softmax matters, so adding a constant to every prediction changes nothing.
target = np.array([0.9, 0.1, 0.4, 0.6])
pred = np.array([0.3, -0.2, 0.0, 0.5])
print("shifted by 5", float(listnet_loss(pred, target).data), float(listnet_loss(pred + 5, target).data))

# The gradient with respect to the predictions is softmax(pred) - softmax(target).
params = ParamSet()
params.add("pred", pred)
loss, grads = forward_backward(lambda p: listnet_loss(p["pred"], target), params)
print("gradient   ", np.round(grads["pred"], 4))

# A few plain gradient steps pull the prediction distribution onto the target one.
for step in range(200):
    _, grads = forward_backward(lambda p: listnet_loss(p["pred"], target), params)
    params["pred"] = params["pred"] - 2.0 * grads["pred"]
print("after descent, srcc with target:", srcc(params["pred"], target))

# Ranks with ties take the average of the positions they span.
print("ranks      ", rank_transform([3, 1, 3, 2]))

# Spearman correlation is Pearson correlation of the ranks.
human = [1, 2, 3, 4, 5]
print("srcc(x, x)", srcc(human, human), " reversed", srcc(human, human[::-1]),
      " one swap each end", srcc(human, [2, 1, 4, 3, 5]))

# Ensembling by rank averaging ignores each member's scale entirely.
ids = ["a", "b", "c", "d"]
m1 = dict(zip(ids, [0.1, 0.2, 0.3, 0.4]))
m2 = dict(zip(ids, [-30.0, 10.0, 5.0, 90.0]))  # same ranking except b and c swapped
print("ensemble   ", rank_average_ensemble([m1, m2], 0.0, 1.0))
