"""CO2-based occupancy detection with temporal and spatial features."""

__version__ = "0.1.0"
