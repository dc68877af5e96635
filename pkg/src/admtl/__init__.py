"""Multi-task prediction of ADAS-Cog 13 scores from MRI and clinical data."""

__version__ = "0.1.0"
