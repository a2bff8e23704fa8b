# Cost of doing nothing in the exponential example.  With zero controls the
# state is an Ito integral of sin(W), so the cost has a closed form.
import numpy as np

from mffbsde import ControlQuartet, EnsembleProcess, cost_lc, exponential_lc_example, make_grid, sample_brownian
from mffbsde import simulate_state
from mffbsde.oracle import ito_isometry_cost

problem = exponential_lc_example()
exact = ito_isometry_cost()
print("closed form", exact)

# %%
for M, N in [(1000, 32), (10_000, 64), (40_000, 128)]:
    grid = make_grid(1.0, N)
    noise = sample_brownian(grid, M, 1, seed=1)
    zero = np.zeros((M, N + 1, 1))
    q = ControlQuartet(np.zeros(1), np.zeros(1), EnsembleProcess(zero), EnsembleProcess(zero))
    cb = cost_lc(problem, q, simulate_state(problem.dyn, q, grid, noise), noise)
    se = cb.per_particle.std() / np.sqrt(M)
    print(f"M={M:6d} N={N:4d}  cost {cb.total:.5f} +- {se:.5f}  rel err {cb.total / exact - 1:+.3%}")

# %%
# the breakdown: only the terminal term is nonzero, the initial and control
# terms vanish because f(0) = 0
print(cb.to_dict())
