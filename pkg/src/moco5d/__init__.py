"""Motion-compensated 5D MRI reconstruction on a synthetic radial phantom."""

__version__ = "0.1.0"
