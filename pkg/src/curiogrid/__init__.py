"""curiogrid: desk-scale embodied active-learning lab on procedural grid worlds."""

__version__ = "0.1.0"
