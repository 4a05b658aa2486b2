"""
How good is the Taylor bound on the expected softmax?
=====================================================

``expected_softmax_tse_lower`` approximates a lower bound on E[softmax(W z)]
for a Gaussian z. Compare it with plain Monte Carlo while the covariance
grows.
"""
import numpy as np

from deepvib import GaussianCode, Rng
from deepvib.nn import softmax
from deepvib.objective import expected_softmax_tse_lower

rng = Rng(6, ("demo", "tse"))
W = rng.substream("W").normal((3, 4))
mu = rng.substream("mu").normal(4)
L = np.tril(rng.substream("L").normal((4, 4)))
eps = rng.substream("eps").normal((400_000, 4))

print("at zero covariance:", expected_softmax_tse_lower(W, GaussianCode(mu, np.zeros((4, 4)), "fullcov")),
      "softmax:", softmax(W @ mu))

for scale in (1e-4, 1e-3, 1e-2, 1e-1):
    cov = scale * L @ L.T
    code = GaussianCode(mu, np.linalg.cholesky(cov), "fullcov")
    z = mu + eps @ np.linalg.cholesky(cov).T
    mc = softmax(z @ W.T).mean(axis=0)
    tse = expected_softmax_tse_lower(W, code)
    print(f"cov scale {scale:g}: max relative gap {np.max(np.abs(tse - mc) / mc):.4f}")

# %%
# The gap grows roughly in proportion to the covariance scale. All classes
# share one correction factor, while the true expectation moves each class
# differently, so the approximation is only tight for small covariances.
