"""skyloc: cross-domain visual geolocalization for aerial imagery.

Pipeline stages: global descriptor retrieval, dense attention features with
soft keypoint detection, geometric verification with reranking, and PnP
position refinement against geotagged reference imagery.
"""

__version__ = "0.1.0"
