"""
Cybersecurity game: who defends, and when
=========================================

Four states (defended or not, susceptible or infected). The printout tracks
the population and which states choose to switch their defence over the
horizon. The rate constants are baseline guesses, so only the qualitative
picture carries meaning: a terminal penalty on infection pushes undefended
players to defend as the deadline approaches.
"""

import numpy as np

from mfgflow import CyberModel, TimeGrid, picard_solve
from mfgflow.core import discrete_gradient
from mfgflow.models import CYBER_LABELS, cyber_hamiltonian

model = CyberModel()
grid = TimeGrid(model.T, 50)
eta = np.full(4, 0.25)

for penalty in (0.0, 5.0):
    res = picard_solve(model, eta, [penalty], grid)
    sol = res.solution
    print(f"\nterminal infection penalty {penalty}: {res.iterations} sweeps")
    print("   t  " + "  ".join(f"{n:>5}" for n in CYBER_LABELS) + "  switching")
    for j in range(0, grid.M, 5):
        u_next = sol.u[j + 1]
        movers = [CYBER_LABELS[x] for x in range(4)
                  if cyber_hamiltonian(model, x, sol.mu[j], discrete_gradient(u_next, x))[1] == 1]
        print(f"{grid.time(j):4.1f}  " + "  ".join(f"{m:5.3f}" for m in sol.mu[j]) + f"  {movers}")
    defended = sol.mu[-1, 0] + sol.mu[-1, 1]
    print(f"defended share at T: {defended:.3f}")
