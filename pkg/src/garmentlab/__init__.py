"""garmentlab: desk-scale visuotactile garment manipulation, end to end.

Synthetic scene generation with exact correspondence ground truth, dense
descriptor and affordance networks written directly in numpy, and a
grasp/fold planner that consumes both, with deterministic artifacts
throughout.
"""

__version__ = "0.1.0"
