"""
Coincident neurons under gradient descent
=========================================

Two output neurons of a linear layer that start with equal weights receive
equal gradients on a task that treats them symmetrically, so they never
separate. Computing the outputs one after another breaks the symmetry.
"""

import numpy as np

from gunn.singularity import LinearModel, detect_collapse, epsilon_sweep, run_collapse_experiment

for form in ("plain", "residual", "gradual"):
    run = run_collapse_experiment(form, n=6, steps=200, seed=0)
    print(f"{form:>8}: gap {run.gaps[0]:.1e} -> {run.gaps[5]:.1e} after 5 steps -> {run.gaps[-1]:.1e} "
          f"after {run.steps[-1]}; loss {run.losses[0]:.3f} -> {run.losses[-1]:.3f}")

###############################################################################
# detect_collapse lists pairs whose activations agree on every probe.

rng = np.random.default_rng(2)
plain = LinearModel.random(5, "plain", rng)
plain.omega[4] = plain.omega[0]
print("collapsed pairs:", detect_collapse(plain, rng.standard_normal((64, 5))).collapsed)

###############################################################################
# The one-step output change of a gradual model is predicted to first order;
# the prediction error shrinks in proportion to the step size.

model = LinearModel.random(6, "gradual", rng)
eps, errs, slope = epsilon_sweep(model, rng.standard_normal((8, 6)), rng.standard_normal((8, 6)))
for e, r in zip(eps, errs):
    print(f"step {e:.0e}: relative error {r:.2e}")
print(f"log-log slope {slope:.3f}")
