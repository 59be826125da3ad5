"""
Run reports: figures and Markdown/CSV tables.
"""

from .builder import emit_report
from .visualizations import ReportVisualizer

__all__ = ["emit_report", "ReportVisualizer"]
