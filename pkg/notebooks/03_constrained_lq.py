# Box-constrained linear-quadratic problem: controls from the coupled
# forward-backward system against a direct projected-gradient search over
# the same adapted control class.
import numpy as np

from mffbsde import (RegressionBasis, SolverConfig, base_coefficients, continuation_solve, cost_lqic,
                     extract_lqic_controls, lqic_hamiltonian, make_grid, sample_brownian,
                     scalar_lqic_example, simulate_state)
from mffbsde.checks import check_lqic
from mffbsde.oracle import brute_force_lqic, relative_l2

lq = scalar_lqic_example()
print(check_lqic(lq).passed)  # positive weights, delta bound, convex constraint sets

# %%
grid = make_grid(1.0, 4)
noise = sample_brownian(grid, 512, 1, seed=7)
basis = RegressionBasis("path", 3)  # polynomials in all past increments
cfg = SolverConfig(particles=512, steps=4, basis=basis, damping=0.5, anderson=5,
                   alpha_schedule=(0.0, 1.0), picard_tol=1e-10, seed=7)

c = lqic_hamiltonian(lq)
V1, V2, rep = continuation_solve(c, base_coefficients(c.structural), cfg, noise)
q = extract_lqic_controls((V1, V2), lq, grid.dt)
ham = cost_lqic(lq, q, simulate_state(lq.dyn, q, grid, noise), noise)
print("hamiltonian route: cost", ham.total, "xi", q.xi1, q.xi2, "sweeps", rep.iterations)

# %%
direct = brute_force_lqic(lq, grid, noise, basis=basis)
print("direct search:     cost", direct.cost, "xi", direct.xi1, direct.xi2,
      "iterations", direct.iterations)
print("cost gap", abs(ham.total - direct.cost))
print("u1 rel L2", relative_l2(q.u1.values[:, :4], direct.u1))
print("u2 rel L2", relative_l2(q.u2.values[:, :4], direct.u2))

# %%
# share of particles sitting on the bounds [-0.6, -0.25]
u1 = q.u1.values[:, :4, 0]
print("u1 at lower bound", np.mean(np.isclose(u1, -0.6)), "u1 at upper bound", np.mean(np.isclose(u1, -0.25)))
