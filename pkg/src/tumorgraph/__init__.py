"""Supervoxel-graph brain tumour segmentation: SLIC, GraphSAGE and a small refinement CNN."""

__version__ = "0.1.0"
