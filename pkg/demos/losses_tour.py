"""
A tour of the training losses
=============================

Every loss acts on probability maps of shape (B, C, H, W). Here we feed
them hand-built maps so the numbers can be checked by eye.
"""

import torch

from pccl import losses as L
from pccl.core import expand_one_hot

# a 6x6 target with a 3x3 foreground square
y = torch.zeros(1, 6, 6, dtype=torch.long)
y[0, 1:4, 1:4] = 1
perfect = expand_one_hot(y, 2, torch.float64)
uniform = torch.full((1, 2, 6, 6), 0.5, dtype=torch.float64)

print("supervised, perfect :", L.supervised_loss(perfect.clamp_min(1e-12), y).item())
print("supervised, uniform :", L.supervised_loss(uniform, y).item())

###############################################################################
# Cross pseudo supervision: each map is scored against the other's argmax.
# Agreeing confident maps cost nothing.

s1, s2 = L.cross_supervision_losses(perfect, perfect)
print("cps on agreement    :", s1.item(), s2.item())
s1, s2 = L.cross_supervision_losses(uniform, perfect)
print("cps, uniform vs hard:", s1.item(), s2.item())

###############################################################################
# Mutual agreement: pixel KL plus the mutual information gap. A confident
# map whose class planes do not overlap reaches the minimum; a flat map
# sits at 1.5 (cosine 1, confidence 0.5).

print("mac, confident      :", L.mac_loss(perfect, perfect).item())
print("mig, uniform        :", L.mig_loss(uniform, uniform).item())
print("kl(uniform||perfect):", L.kl_pixel_loss(uniform, perfect.clamp_min(1e-8)).item())

###############################################################################
# The joint objective with the default weights {5, 1, 10}.

b = L.total_loss(1.0, 1.0, semi1=0.1, semi2=0.1, con=0.2, mac=0.05)
print("total               :", b.total)
