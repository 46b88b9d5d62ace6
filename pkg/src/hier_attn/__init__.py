"""Hierarchical attention for point-cloud detection.

Multi-scale cross-attention (per-head-group feature maps at several point
densities) and box-adaptive local attention, plus the geometry, box, scene
simulation, and evaluation machinery to train and score a small detector
end to end on CPU.
"""

__version__ = "0.1.0"
