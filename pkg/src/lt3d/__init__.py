"""Long-tailed 3D detection toolkit: hierarchical evaluation, LiDAR/RGB late fusion,
score calibration and a seeded synthetic benchmark harness."""

__version__ = "0.1.0"
