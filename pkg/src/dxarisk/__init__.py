"""T2DM risk prediction from DXA body composition and clinical measurements."""

__version__ = "0.1.0"
