"""Topological scene-graph mapping, trajectory-graph prediction and informed navigation."""
__version__ = "0.1.0"
