from . import pipeline, downstream_analysis

__all__ = [
    "pipeline",
    "downstream_analysis",
]
