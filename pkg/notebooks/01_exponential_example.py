# Solve the exponential-cost example by continuation and compare with its
# closed form on the same Brownian paths.
import numpy as np

from mffbsde import (RegressionBasis, SolverConfig, base_coefficients, continuation_solve,
                     exponential_lc_example, extract_lc_controls, lc_hamiltonian, sample_brownian)
from mffbsde.oracle import example_reference, relative_l2

# %%
problem = exponential_lc_example()
c = lc_hamiltonian(problem)          # coupled forward-backward system of the control problem
c0 = base_coefficients(c.structural)  # the solvable end of the homotopy

cfg = SolverConfig(particles=2048, steps=32, basis=RegressionBasis("joint", 3, 3),
                   damping=2 / 3, alpha_schedule=(0.0, 0.5, 1.0), seed=42)
noise = sample_brownian(cfg.grid, cfg.particles, 1, cfg.seed)

# %%
V1, V2, rep = continuation_solve(c, c0, cfg, noise)
print("sweeps", rep.iterations, "alphas", rep.alpha_trace)
print("contraction ratios", np.round(rep.ratios, 3))

# %%
# closed form: u = root of grad f(u) + u + sin W = 0, Z = u + sin W, X = Y
ref = example_reference(noise, cfg.grid)
q = extract_lc_controls((V1, V2), problem, cfg.grid.dt)
N = cfg.grid.N
print("X error", relative_l2(V1.X, ref.X1))
print("Y error", relative_l2(V1.Y, ref.Y1))
print("Z error", relative_l2(V1.Z[:, :N], ref.Z1[:, :N]))
print("u error", relative_l2(q.u1.values[:, :N], ref.u1[:, :N]))
print("initial controls", q.xi1, q.xi2)  # exact value is 0

# %%
# a few mean paths next to the reference
for k in range(0, N + 1, 8):
    print(f"t={cfg.grid.nodes[k]:.3f}  E[Y1]={V1.Y[:, k, 0].mean():+.4f}  ref={ref.Y1[:, k, 0].mean():+.4f}")
