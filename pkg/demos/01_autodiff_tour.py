"""A short walk through the tape autodiff that powers the network.

Run: python demos/01_autodiff_tour.py
"""

import numpy as np

from basic_seg import autodiff as ad
from basic_seg import losses as L
from basic_seg.autodiff import Tape, Tensor

rng = np.random.default_rng(0)

# Every op records itself on the active tape; backward walks it in reverse.
x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
kernel = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
with Tape() as tape:
    probs = ad.softmax_channel(ad.conv2d(x, kernel, padding=1))
    loss = L.seg_loss(probs, rng.integers(0, 3, size=(1, 5, 5)))
    grads = tape.backward(loss)
print(f"CE + Dice on a random 3-class map: {loss.item():.4f}")
print(f"kernel gradient norm: {np.linalg.norm(grads[kernel]):.4f}")

# Central differences agree with the taped gradient to many digits.
err = ad.grad_check(lambda k: L.seg_loss(ad.softmax_channel(ad.conv2d(Tensor(x.data), k, padding=1)),
                                         np.zeros((1, 5, 5), int)), kernel.data)
print(f"grad_check relative error for the kernel: {err:.1e}")
