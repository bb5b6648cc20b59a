"""Turn 360-degree equirectangular video frames into a calibrated multi-view
correspondence dataset, plus the motion-masked denoising loss kernels."""

__version__ = "0.1.0"
