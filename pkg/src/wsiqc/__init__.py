"""Whole-slide image quality control for cervical cytology slides.

Eight quality metrics (grid-like imaging, focus, markers, bubbles, staining,
squamous cell count, cell masses, neutrophil obscuration) are computed from a
slide pyramid plus externally produced segmentation/detection artifacts, then
fused into a 0-10 score with gradient-boosted trees.
"""
__version__ = "0.1.0"

from .errors import WsiqcError  # noqa: E402
from .metrics import METRIC_NAMES, MetricValue, MetricVector  # noqa: E402

__all__ = ["__version__", "WsiqcError", "METRIC_NAMES", "MetricValue", "MetricVector"]
