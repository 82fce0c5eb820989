"""slicecoord: self-supervised continuous slice-position scoring.

Trains a small convolutional regressor on unlabeled image stacks using
only inter-slice ordering and spacing constraints, then uses the learned
per-slice score for zone classification (via calibrated thresholds) and
anomaly screening (via score-trajectory correlation).
"""

__version__ = "0.1.0"
