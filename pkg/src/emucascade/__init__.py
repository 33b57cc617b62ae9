"""Segmentation of overlapping electromagnetic showers in emulsion bricks.

The pipeline: generate (or load) base-track data for a brick, build a
directed track graph with integral-distance nearest-neighbour edges,
classify edges with a message-passing neural network, cluster showers on
the predicted edge probabilities, and evaluate reconstruction quality.
"""

__version__ = "0.1.0"

from .tracks import BaseTrack, Brick, DatasetSplit, load_tracks, save_tracks
from .graphbuild import GraphBuilder, TrackGraph
from .gnn import GnnEdgeClassifier
from .ewscam import EwscamClusterer
from .recon import HuberEnergyRegressor, StumpBoostClassifier

__all__ = [
    "BaseTrack",
    "Brick",
    "DatasetSplit",
    "load_tracks",
    "save_tracks",
    "TrackGraph",
    "GraphBuilder",
    "GnnEdgeClassifier",
    "EwscamClusterer",
    "HuberEnergyRegressor",
    "StumpBoostClassifier",
    "__version__",
]
