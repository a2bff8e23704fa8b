# Sampled checks of the structural inequalities, on the example and on
# deliberately broken variants.
import dataclasses

import numpy as np

from mffbsde import checks, exponential_lc_example, lc_hamiltonian

c = lc_hamiltonian(exponential_lc_example())
s = c.structural

for rep in (checks.check_adjoint(s, n=5000), checks.check_lipschitz(c, n=5000),
            checks.check_monotonicity(c, n=5000)):
    print(f"{rep.name:14s} passed={rep.passed} violations={rep.violations} worst margin={rep.worst_margin:.3g}")

# %%
# the feedback map flattens out for large arguments, so no linear lower
# bound on its increments can hold
dom = checks.check_no_linear_domination(s)
print({k: f"{v:.2e}" for k, v in dom.margins.items()})

# %%
# flip the sign of the terminal coupling: monotonicity breaks and the
# report carries a witness
flipped = dataclasses.replace(c, phi1=lambda x1, x2, w=None: -c.phi1(x1, x2, w),
                              phi2=lambda x1, x2, w=None: -c.phi2(x1, x2, w))
bad = checks.check_monotonicity(flipped, n=2000)
print(bad.passed, bad.violations)
print(bad.witness)

# %%
# an expansive adjoint map
anti = dataclasses.replace(s, h1=lambda t, u: np.asarray(u, dtype=float))
print(checks.check_adjoint(anti, n=2000).witness)
