"""Retrieval-augmented 6D object pose estimation with a multimodal CAD knowledge base.

Pipeline: offline knowledge-base construction (multi-view rendering + dense
feature extraction + depth-based 2D-to-3D assignment), attention-based
retrieval of CAD features for a query crop, contrastively trained dense
2D-3D correspondences, and PnP-RANSAC pose solving with score-based
selection and refinement.
"""

__version__ = "0.1.0"
