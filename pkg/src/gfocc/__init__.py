"""Semantic 3D Gaussians fused from multiple sensors and splatted to voxel occupancy."""

__version__ = "0.1.0"
