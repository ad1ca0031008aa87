"""Train the labeled-only baseline and the full model on a small synthetic split.

Takes about five minutes on one CPU core.  Numbers are desk-scale and noisy;
the point is the shape of the workflow, not the scores.

    python demos/tiny_ablation.py
"""
import time

from dualseg.dataset import GenConfig
from dualseg.metrics import compute_metrics
from dualseg.trainer import RunConfig, train

ds = GenConfig(seed=3, n_train=16, n_val=4, labeled_ratio=0.25).build()
print(f"{len(ds.labeled)} labeled, {len(ds.unlabeled)} unlabeled, {len(ds.val)} val scenes")

cache = {}
base = RunConfig(epochs=12, steps_per_epoch=16, eval_every=12)
for name in ("baseline", "full"):
    t0 = time.perf_counter()
    res = train(base.with_ablation(name), dataset=ds, prepared=cache)
    m3, m2 = compute_metrics(res.final_eval.cm_3d), compute_metrics(res.final_eval.cm_2d)
    print(f"{name:<9} 3d mIoU {m3.miou:.3f}  2d mIoU {m2.miou:.3f}  "
          f"pair L2 {res.final_eval.pair_l2:.3f}  ({time.perf_counter() - t0:.0f}s)")
