"""3D Gaussian splatting: projection, rasterization and training."""
