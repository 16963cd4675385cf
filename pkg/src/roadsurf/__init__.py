"""Road surface condition and type classification from LiDAR region statistics."""

__version__ = "0.1.0"
