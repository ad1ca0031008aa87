"""Cross-modal pseudo-label voting on a handful of hand-picked pairs.

Each row is one point/pixel pair.  A coarse label survives when the other
modality agrees with it, or when the teacher is confident enough on its own.
"""
import numpy as np

from dualseg.geometry import CorrespondenceSet
from dualseg.plo import DELETED, optimize_pairs, summarize

# teacher probabilities for 4 pairs, 3 classes
probs_3d = np.array([[0.70, 0.20, 0.10],   # agrees with the image
                     [0.95, 0.03, 0.02],   # disagrees but confident
                     [0.50, 0.40, 0.10],   # disagrees, unsure -> dropped
                     [0.10, 0.10, 0.80]])
probs_2d = np.array([[0.60, 0.30, 0.10],
                     [0.20, 0.70, 0.10],
                     [0.10, 0.80, 0.10],
                     [0.05, 0.05, 0.90]])
# pixels on a 6x6 image; the last pair is far from the rest
pairs = CorrespondenceSet(np.arange(4), np.array([1, 1, 2, 5]), np.array([1, 2, 1, 5]), 6, 6)

s = optimize_pairs(probs_3d, probs_2d, pairs, t_conf=0.9, window=3)
show = lambda a: ["del" if v == DELETED else int(v) for v in a]
print("coarse 3d   ", show(s.coarse_3d), " conf", np.round(s.conf_3d, 2).tolist())
print("2d vote     ", show(s.projected_3d))
print("optimized 3d", show(s.optimized_3d))
print("coarse 2d   ", show(s.coarse_2d), " conf", np.round(s.conf_2d, 2).tolist())
print("3d vote     ", show(s.densified_2d))
print("optimized 2d", show(s.optimized_2d))
print("3d summary  ", summarize(s.coarse_3d, s.optimized_3d, 3))
