"""
patchbench - adversarial patches απέναντι σε object detectors.

Optimization, transferability evaluation (mAP drop, compatibility matrix)
και ανάλυση (t-SNE, histograms) πάνω σε ένα κοινό patch format.
"""

__version__ = "1.0.0"
