"""
Clipping, noise calibration and one noisy client report
=======================================================

"""

import math

import numpy as np

from dpfl import models, privacy
from dpfl.privacy import PrivacySpec

# a per-sample gradient longer than C is scaled back onto the C-ball
g = np.array([3.0, 4.0])
print("clip((3, 4), C=1) =", privacy.clip(g, 1.0))

# the calibrated noise scale for the default budget
spec = PrivacySpec()  # eps=5, delta=1e-5, C=10, T=128
print("sigma =", spec.sigma)
for eps in (1.0, 3.0, 5.0, 7.0, 9.0):
    print(f"  eps={eps:<4} sigma={PrivacySpec(epsilon=eps).sigma:.4f}")

# per-sample gradients of a small MLP on random data
rng = np.random.default_rng(0)
net = models.ModelSpec("mlp1", 5, 3, (8,))
theta = models.init_params(net, seed=0)
x, y = rng.standard_normal((200, 5)), rng.integers(0, 3, 200)
grads = models.per_sample_gradients(net, theta, x, y)
print("per-sample rows:", grads.rows.shape, "max row norm:", np.linalg.norm(grads.rows, axis=1).max())

# each (client, round) pair owns its own Gaussian stream
report = privacy.privatize(grads, spec, privacy.noise_stream(master_seed=0, client_id=2, round_index=7))
clean = privacy.privatize(grads, PrivacySpec(epsilon=math.inf), privacy.noise_stream(0, 2, 7))
print("noise std per coordinate:", np.std(report - clean), "expected:", spec.sigma / math.sqrt(200))

# the ledger refuses a client's (T+1)-th exposure
ledger = privacy.ExposureLedger(PrivacySpec(total_rounds=2))
ledger.expose(0)
ledger.expose(0)
try:
    ledger.expose(0)
except privacy.BudgetViolation as exc:
    print("rejected:", exc)
