"""
Measuring segmentations: mIoU and the J & F pair
================================================

mIoU averages per-class intersection-over-union, skipping classes absent
from both sides. For single-object (referring) evaluation, J is the mask
IoU and F scores boundary agreement with a distance tolerance; their mean
is the usual video-segmentation headline number.
"""

import numpy as np

from recurseg import contour_f, miou, region_j
from recurseg.metrics import jf_mean

rng = np.random.default_rng(0)

# a 3-class label problem with a controlled error
gt = np.zeros((32, 32), dtype=np.int64)
gt[4:16, 4:16] = 1
gt[18:30, 18:30] = 2
pred = gt.copy()
pred[4:16, 4:10] = 0          # half of class 1 mislabeled

report = miou([pred], [gt], 3)
print("per-class IoU:", [None if v is None else round(v, 3)
                         for v in report.per_class_iou])
print("mIoU:", round(report.miou, 4))
print()
print(report.to_table(["background", "left box", "right box"]))

# region and boundary agreement for a shifted mask
a = np.zeros((32, 32), dtype=bool)
b = np.zeros((32, 32), dtype=bool)
a[8:20, 8:20] = True
b[9:21, 8:20] = True          # one-pixel vertical shift
j, f, jf = jf_mean(a, b, tol_px=1)
print(f"\nshifted square: J={j:.3f}  F={f:.3f}  J&F={jf:.3f}")
print("(F forgives the 1-px shift; J charges for the area mismatch)")

far = np.roll(b, 5, axis=0)
print(f"5-px shift:     J={region_j(a, far):.3f}  "
      f"F={contour_f(a, far, 1):.3f}")
