"""Multi-task BEV perception: fusion, query initialization, shared decoder, task heads."""

__version__ = "0.1.0"
