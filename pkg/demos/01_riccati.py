"""Riccati solutions and how they move with the model.

The double integrator has a closed-form stabilizing solution. We solve it,
then perturb the input gain and compare the analytic sensitivity of ``K``
with a central finite difference.

Run with ``python demos/01_riccati.py``.
"""

import numpy as np

from cbrl import care_directional_derivative, solve_care, spectral_abscissa

A = np.array([[0.0, 1.0], [0.0, 0.0]])
B = np.array([[0.0], [1.0]])
Q = np.eye(2)
R = np.eye(1)

sol = solve_care(A, B, Q, R)
print("P =\n", sol.P)
print("closed form [[sqrt3, 1], [1, sqrt3]] error:",
      np.abs(sol.P - [[3**0.5, 1.0], [1.0, 3**0.5]]).max())
print("K =", sol.K, " closed-loop abscissa:", spectral_abscissa(A - B @ sol.K))

# scale the input channel: B -> B (1 + s)
dB = B.copy()
dP, dK = care_directional_derivative(sol, A, B, Q, R, dB=dB)
h = 1e-5
Kp = solve_care(A, B * (1 + h), Q, R).K
Km = solve_care(A, B * (1 - h), Q, R).K
print("dK analytic:", dK.ravel())
print("dK central :", ((Kp - Km) / (2 * h)).ravel())
