"""Video cloze pretext training on a from-scratch numpy 3D-conv stack."""

__version__ = "0.1.0"
