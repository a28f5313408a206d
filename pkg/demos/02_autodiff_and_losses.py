# %% [markdown]
# The numpy autodiff core, checked against finite differences, and the two
# losses used for training.

# %%
import math

import numpy as np

from attd import numcore as nc
from attd.losses import cross_entropy, forward_kl

rng = np.random.default_rng(0)
x = nc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = nc.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

def f():
    return nc.tanh(x @ w).sum()

f().backward()
eps = 1e-6
w.data[1, 0] += eps
up = f().item()
w.data[1, 0] -= 2 * eps
down = f().item()
w.data[1, 0] += eps
print("analytic", w.grad[1, 0], "numeric", (up - down) / (2 * eps))

# %%
# closed forms: uniform predictions cost ln 4, and so does a one-hot
# distribution measured against a uniform one
print(cross_entropy(nc.Tensor([0.25] * 4), 2).item(), math.log(4))
print(forward_kl(nc.Tensor([[1.0, 0, 0, 0]]), nc.Tensor([[0.25] * 4])).item())

# %%
# KL is asymmetric
p = nc.Tensor([[0.7, 0.2, 0.1]])
q = nc.Tensor([[0.3, 0.3, 0.4]])
print(forward_kl(p, q).item(), forward_kl(q, p).item())
