"""
No labels: the unsupervised bottleneck
======================================

Swap the label decoder for a decoder back to the input and the objective
becomes the beta-weighted VAE bound. At beta=1 it is exactly the negative
ELBO with a unit-variance Gaussian likelihood.
"""
from deepvib import Architecture, Objective, TrainConfig, VibConfig, fit
from deepvib.data import mnist_desk_split

train, test = mnist_desk_split()
cfg = TrainConfig(lr0=1e-3, epochs=5, batch_size=100, ema_decay=0.99)

for beta in (0.5, 1.0, 4.0):
    arch = Architecture(784, (256,), 16, 10, "diag", task="reconstruct", recon_hidden=(256,))
    res = fit(arch, train, None, Objective("unsup_vib", VibConfig(beta)), cfg)
    last = res.history[-1]
    print(f"beta={beta:<4g} reconstruction {last.xent_nats:8.2f} nats   KL {last.kl_nats:6.2f} nats   "
          f"I(Z;X) <= {last.mi_zx_bits:5.2f} bits")

# %%
# Larger beta buys a smaller KL term at the price of a worse reconstruction.
