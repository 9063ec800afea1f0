"""Language-in-the-loop culvert inspection: ROI fusion, cylinder fitting and viewpoint planning."""

__version__ = "0.1.0"
