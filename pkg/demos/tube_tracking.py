"""Synthesize the contraction metric and watch disturbed errors stay in the tube.

Run: python3 demos/tube_tracking.py
"""
import numpy as np

from tubewalk.contraction import ccm_torque, reset_expansion, synthesize_ccm, tube_membership, tube_profile
from tubewalk.rom import RobotParams, integrate_auglipm, saltation_matrix

p = RobotParams()
ccm = synthesize_ccm(p, 12.0, None, (-0.25, 0.25), (-20.0, 20.0))
print("M =", np.round(ccm.M, 4).tolist(), " rho =", round(ccm.rho, 1), " margin =", f"{ccm.lmi_margin:.3e}")
print("closed-loop eigenvalues:", np.round(ccm.closed_loop_eigs.real, 2))

w_bar = 0.085
E0 = ccm.d_bar(w_bar) ** 2
tube = tube_profile(ccm, E0, w_bar, p.t_step)
print(f"tube radius {tube.start_radius:.4f} -> {tube.end_radius:.4f} over one step")

# worst-case constant pushes from the tube boundary along both metric axes
rng = np.random.default_rng(0)
n = 200
e = rng.normal(size=(n, 2))
e /= np.sqrt(np.einsum("ij,jk,ik->i", e, ccm.M, e))[:, None]
e *= np.sqrt(E0)
w = rng.choice([-w_bar, w_bar], size=n)
tr = integrate_auglipm((e[:, 0], e[:, 1]), lambda t, s: ccm_torque(ccm, s, (0.0, 0.0)),
                       lambda t, s: w, p.t_step, 1 / 200, p)
inside = np.array([tube_membership((tr.x[i], tr.v[i]), (0, 0), tube, t) for i, t in enumerate(tr.t)])
print(f"{np.mean(inside.all(axis=0)):.0%} of {n} boundary starts stay inside at every sample")

xi = saltation_matrix((0.12, 0.6), 0.3, p)
print("saltation matrix:", np.round(xi, 4).tolist(), " spectral norm", round(float(np.linalg.norm(xi, 2)), 4))
print("energy gain across a switch:", round(reset_expansion(ccm.M, xi, p), 4))
