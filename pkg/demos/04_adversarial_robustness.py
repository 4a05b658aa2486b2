"""
Attacking the classifiers
=========================

Fast gradient sign and the iterative L2 attack, against a deterministic
network and a VIB network trained on the bundled MNIST sample.

Stochastic models are attacked through the 12-sample averaged prediction
and every claimed success is re-checked with fresh noise.
"""
import numpy as np

from deepvib import Architecture, AttackConfig, Objective, Rng, TrainConfig, VibConfig, fgs, fit, l2opt
from deepvib.data import mnist_desk_split

train, test = mnist_desk_split()
cfg = TrainConfig(lr0=1e-3, epochs=10, batch_size=100, ema_decay=0.99)
models = {
    "deterministic": fit(Architecture(784, (256, 256), 32, 10, "deterministic"), train, test,
                         Objective("deterministic"), cfg),
    "vib 1e-2": fit(Architecture(784, (256, 256), 32, 10, "diag"), train, test,
                    Objective("vib", VibConfig(1e-2)), cfg),
}

# %%
# FGS: one signed step of size eps in every pixel. Adversarial accuracy is
# the fraction still classified correctly afterwards.
x, y = test.inputs[:500], test.labels[:500]
for eps in (0.1, 0.2, 0.35):
    accs = {name: np.mean([r.pred == r.true_label for r in fgs(m.ema, m.arch, x, y, eps, Rng(0))])
            for name, m in models.items()}
    print(f"FGS eps={eps:<4}", "   ".join(f"{k}: {v:.3f}" for k, v in accs.items()))

# %%
# Targeted L2: turn the first five zeros into ones with the smallest
# perturbation we can find.
zeros = np.flatnonzero(test.labels == 0)[:5]
acfg = AttackConfig(targeted=True, target_label=1, max_iterations=500)
for name, m in models.items():
    out = l2opt(m.ema, m.arch, test.inputs[zeros], test.labels[zeros], acfg, Rng(1))
    l2 = [r.l2 for r in out if r.success]
    print(f"{name:14s} targeted success {np.mean([r.success for r in out]):.1f}   "
          f"mean L2 of successes {np.mean(l2) if l2 else float('nan'):.2f}")
