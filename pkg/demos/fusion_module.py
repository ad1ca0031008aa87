"""One fusion module on random paired features.

Shows the head-wise attention weights and that an untrained module hands the
features straight through (its output layer starts as identity on the input
half), then takes one gradient step to show it is trainable.
"""
import numpy as np

from dualseg import tensor as T
from dualseg.dmf import attention_weights, fuse_3d, init_dmf_params

rng = np.random.default_rng(0)
n_pairs, d3, d2, heads = 5, 8, 12, 4
params = init_dmf_params([d3], [d2], heads, rng)
f3 = T.Tensor(rng.normal(size=(n_pairs, d3)))
f2 = T.Tensor(rng.normal(size=(n_pairs, d2)))

g = fuse_3d(f3, f2, params, scale=0)
print("fused shape", g.shape)
print("change vs input (random mixing half):", round(float(np.abs(g.data - f3.data).mean()), 3))

# zero the attention half and the module is an exact pass-through
zeroed = params.copy(requires_grad=False)
zeroed["dmf.s0.to3d.out.w"].data[:d3] = 0
print("pass-through exact:", np.array_equal(fuse_3d(f3, f2, zeroed, 0).data, f3.data))

k = T.Tensor(rng.normal(size=(n_pairs, heads, d3 // heads)))
q = T.Tensor(rng.normal(size=(n_pairs, heads, d3 // heads)))
a = attention_weights(k, q).data
print("attention rows (sum to 1 over heads):")
print(np.round(a, 3))

loss = T.tsum(T.mul(g, g))
T.backward(loss)
print("grad norm on query weights:", round(float(np.linalg.norm(params["dmf.s0.to3d.q"].grad)), 3))
