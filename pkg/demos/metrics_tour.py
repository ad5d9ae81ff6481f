"""
Overlap and surface distances
=============================

DSC, HD95 and ASD between an ellipse and shifted copies of itself.
"""

import numpy as np

from pccl.data import ellipse_mask
from pccl.metrics import asd, dsc, hd95

gt = ellipse_mask(64, 32, 32, 18, 12, 0.3)
for shift in (0, 1, 3, 6):
    pred = np.roll(gt, shift, axis=1)
    print(f"shift {shift}: DSC {dsc(pred, gt):6.2f}  HD95 {hd95(pred, gt):5.2f}  ASD {asd(pred, gt):5.2f}")

# an empty prediction is scored with the image diagonal
print("empty prediction HD95:", hd95(np.zeros_like(gt), gt))
