"""Context-gated camera-lidar fusion for bird's-eye-view 3D detection."""

__version__ = "0.1.0"
