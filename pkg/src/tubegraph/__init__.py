"""Complex activity detection from action tubes, scene graphs and a GCN."""

__version__ = "0.1.0"
