"""Weakly supervised multiple-instance learning over precomputed patch features.

Implements multi-class DSMIL, CLAM with a normal bag branch, and multi-branch
DSMIL trained with feature-space contrastive learning and class-prototype
pseudo-labels, plus a synthetic-data oracle and evaluation metrics.
"""

__version__ = "0.1.0"
