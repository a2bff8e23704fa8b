# Weighted projections onto convex sets and inverse gradients of uniformly
# convex functions.
import numpy as np

from mffbsde.convex import (WeightedNorm, ball, box, example_family, grad_inverse, halfspace, project,
                            quadratic, weighted_inner)

rng = np.random.default_rng(0)
W = WeightedNorm(np.array([[2.0, 0.5], [0.5, 1.0]]))  # non-diagonal weight
K = box([-1.0, -1.0], [1.0, 1.0])

x = np.array([2.0, -3.0])
p = project(K, W, x)
print("projection", p)

# %%
# variational inequality: <x - p, y - p>_W <= 0 for every y in the set
ys = rng.uniform(-1, 1, size=(1000, 2))
print("max <x-p, y-p>_W", np.max(weighted_inner(W, x - p, ys - p)))

# %%
# firm nonexpansiveness in the weighted norm
a, b = rng.normal(size=2) * 3, rng.normal(size=2) * 3
pa, pb = project(K, W, a), project(K, W, b)
lhs = weighted_inner(W, pa - pb, pa - pb)
rhs = weighted_inner(W, pa - pb, a - b)
print("|Pa-Pb|^2 <= <Pa-Pb, a-b>:", lhs, "<=", rhs)

# %%
for S in (ball([0.0, 0.0], 1.0), halfspace([1.0, 1.0], 0.5)):
    print(S.kind, project(S, np.eye(2), x))

# %%
# inverse gradients: the exponential family has slope >= 1, so the
# inverse is 1-Lipschitz
f = example_family()
v = np.array([-3.0, -0.1, 0.0, 0.1, 3.0])
u = np.array([grad_inverse(f, np.array([vi]))[0] for vi in v])
print(np.c_[v, u, f.grad(u[:, None])[:, 0]])

g = quadratic(np.array([[3.0, 1.0], [1.0, 2.0]]), np.array([1.0, -1.0]))
w = np.array([0.3, 0.7])
print(grad_inverse(g, w), g.grad(grad_inverse(g, w)))
