"""Tour of the tensor core: tape recording, gradients, and the loss kernels.

Run:  python demos/02_autodiff_and_losses.py
"""

import numpy as np

from fdp import autodiff as ad
from fdp import losses as L

rng = np.random.default_rng(0)

# Gradients are recorded only inside a Tape, so inference is allocation-free.
x = ad.tensor(rng.normal(size=(1, 8, 8, 8, 2)), requires_grad=True, dtype=np.float64)
w = ad.tensor(rng.normal(size=(3, 3, 3, 2, 4)) * 0.2, requires_grad=True, dtype=np.float64)
with ad.Tape():
    h = ad.relu(ad.conv3d(x, w, None, stride=1, pad=1))
    loss = ad.mean(ad.tabs(h))
    ad.backward(loss)
print(f"conv graph: loss={loss.item():.4f}  |grad_w| max={np.abs(w.grad).max():.4f}")

# Central finite differences agree with the recorded backward rules.
eps = 1e-6
i = (1, 1, 1, 0, 2)
orig = w.data[i]
w.data[i] = orig + eps
up = ad.mean(ad.tabs(ad.relu(ad.conv3d(x, w, None, 1, 1)))).item()
w.data[i] = orig - eps
dn = ad.mean(ad.tabs(ad.relu(ad.conv3d(x, w, None, 1, 1)))).item()
w.data[i] = orig
print(f"finite diff {(up - dn) / (2 * eps):+.6f}  vs analytic {w.grad[i]:+.6f}")

# The adversarial pair at its textbook operating points.
real = ad.tensor(np.ones(4))
fake = ad.tensor(np.zeros(4))
print(f"\nadv_loss_d(perfect) = {L.adv_loss_d(real, fake).item():.1f}")
print(f"adv_loss_g(fooled)  = {L.adv_loss_g(real).item():.1f}")
half = ad.tensor(np.full(4, 0.5))
print(f"adv_loss_d(0.5/0.5) = {L.adv_loss_d(half, half).item():.2f}")

# Uniformity collapses to -t*d for a single pair of latents.
z = np.zeros((2, 16))
z[1, 0] = np.sqrt(3.0)   # squared distance 3
print(f"uniformity(two latents, d^2=3, t=2, w=0.1) = "
      f"{L.uniformity_loss(ad.tensor(z), 2.0, 0.1).item():+.3f} (expected {-0.1 * 2 * 3:+.3f})")

# The smoothed dose-quantile carries exact softmax-like gradients.
doses = ad.tensor(rng.uniform(10, 70, 200), requires_grad=True, dtype=np.float64)
with ad.Tape():
    d05 = ad.soft_quantile(doses, 0.05, 0.5)
    ad.backward(d05)
print(f"\nsoft D05 = {d05.item():.2f} Gy; gradient mass sums to {doses.grad.sum():.4f} "
      f"(concentrated on {np.sum(doses.grad > 1e-4)} hot voxels)")
