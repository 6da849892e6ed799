"""
Reconstructing a training example from an update
================================================

An honest-but-curious client in a two-client zone subtracts its own
contribution from the global update and runs gradient matching on what is
left.  Noise added before the update leaves the victim blurs the result.
"""

import numpy as np

from hflsim.attacks import SuiteConfig, analytic_linear_inversion, attack_suite, attack_table_csv, batch_gradient
from hflsim.datagen import gen_blobs
from hflsim.numkit import Model, init_params

# For a linear softmax model a single-example gradient gives the input away
# exactly: each row of the weight gradient is the input scaled by the bias gradient.
model = Model("linear", 32, 10)
params = init_params(model, np.random.default_rng(0))
data = gen_blobs(10, 32, 1, 4.0, np.random.default_rng(1))
x, y = data.features[:1], data.labels[:1]
grad = batch_gradient(model, params.values, x, np.eye(10)[y])
print("analytic inversion MSE:", float(np.mean((analytic_linear_inversion(model, grad) - x[0]) ** 2)))

# The full suite: four clients in two zones, ten target examples per placement.
results = attack_suite(SuiteConfig(targets=10, iterations=1000, restarts=2))
for r in results:
    print(f"{r.name:5s} median reconstruction MSE {r.median_mse:.4g}")
print()
print(attack_table_csv(results))
