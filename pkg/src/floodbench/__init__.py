"""Post-flood building damage assessment on a small numpy autodiff engine.

Models (UNet, SPAUNet, BIT), the semi-supervised consistency framework,
a synthetic bitemporal data pipeline, and evaluation metrics.
"""

__version__ = "0.1.0"
