"""A walk through the numpy kernel: masks, convolution, attention, gradients.

Run with ``python demos/01_kernel_tour.py``. Takes a few seconds.
"""

import numpy as np

from cnnattn import numkernel as nk

rng = np.random.default_rng(0)

# MASKS ======================================================================

# two texts of 5 and 3 real tokens, padded to length 6
mask = nk.prefix_mask([5, 3], 6)
print(mask.astype(int))

# CONVOLUTION ================================================================

# embeddings for the batch: (batch, length, embed dim)
x = nk.Tensor(rng.normal(size=(2, 6, 4)), requires_grad=True)
filters = nk.Tensor(rng.normal(size=(2, 4, 3)) * 0.5, requires_grad=True)  # width 2, 3 filters
bias = nk.Tensor(np.zeros(3), requires_grad=True)

# 'same' output length; positions past each text's end come out as zero
h = nk.conv1d_same(x, filters, bias, mask)
print(h.data.shape)
print(np.round(h.data[1], 3))

# MAX POOL VS ATTENTION ======================================================

pooled = nk.masked_max_pool(h, mask)
print("max pooled", np.round(pooled.data, 3))

q = nk.Tensor(rng.normal(size=3), requires_grad=True)
v, alpha = nk.scaled_dot_attention(h, q, mask)
print("alpha rows sum to", alpha.data.sum(axis=-1))
print("alpha past the end", alpha.data[1, 3:])

# softmax ignores a constant shift of its logits
logits = nk.attention_logits(h, q)
a1 = nk.masked_softmax(nk.Tensor(logits.data + 40.0), mask)
print("max shift difference", np.abs(a1.data - alpha.data).max())

# GRADIENTS ==================================================================

# a scalar loss through the whole chain, then backprop
w = nk.Tensor(rng.normal(size=3), requires_grad=True)
b0 = nk.Tensor(np.zeros(()), requires_grad=True)


def loss():
    hh = nk.conv1d_same(x, filters, bias, mask)
    vv, _ = nk.scaled_dot_attention(hh, q, mask)
    return nk.sigmoid_bce(nk.linear(vv, w, b0), np.array([1.0, 0.0]))


params = {"x": x, "filters": filters, "bias": bias, "q": q, "w": w, "b": b0}
print("loss", float(loss().data))

# analytic gradients vs central differences in extended precision
errs = nk.grad_check_groups(loss, params)
for name, e in errs.items():
    print(f"{name:8s} max rel err {e:.2e}")

# ADAM =======================================================================

state = nk.AdamState(params, lr=0.05)
for step in range(50):
    for p in params.values():
        p.zero_grad()
    L = loss()
    L.backward()
    nk.adam_step(params, {k: p.grad for k, p in params.items()}, state)
    if step % 10 == 0:
        print(step, round(float(L.data), 4))
