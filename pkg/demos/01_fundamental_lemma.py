"""A single recorded trajectory spans every short trajectory of the system.

We simulate a random two-input, two-output system of order three with a
white-noise input and then stack the record into a Hankel matrix. The rank
comes out as m*L + n. A fresh trajectory started from a different initial
state is then written exactly as a combination of the Hankel columns.
"""
import numpy as np

from perimeter_deepc import lti

rng = np.random.default_rng(0)
model = lti.random_minimal_system(rng, n=3, m=2, p=2)
L = model.lag() + 2
T = 80

u = rng.standard_normal((2, T))
y = lti.simulate_lti(model, np.zeros(3), u)
H = lti.build_hankel(lti.Trajectory.from_io(u, y), L)
ok, rank = lti.check_generalized_pe(H, m=2, n=3)
print(f"depth L={L}: Hankel is {H.entries.shape[0]}x{H.entries.shape[1]}, rank {rank} "
      f"(m*L + n = {2 * L + 3}), persistently exciting: {ok}")

u_new = rng.standard_normal((2, L))
y_new = lti.simulate_lti(model, rng.standard_normal(3), u_new)
w_new = np.vstack([u_new, y_new]).T.reshape(-1)
g, *_ = np.linalg.lstsq(H.entries, w_new, rcond=None)
print(f"fresh trajectory reproduced with relative residual "
      f"{np.linalg.norm(H.entries @ g - w_new) / np.linalg.norm(w_new):.2e}")
