"""3D low-dose CT post-processing: phantoms, parallel-beam FBP, a NumPy 3D U-Net with residual output, and blockwise inference."""

__version__ = "0.1.0"
