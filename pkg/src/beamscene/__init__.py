"""Beam selection from panoramic point clouds, with a synthetic urban testbed.

Submodules: ``scene`` (layouts, buildings, point clouds), ``raytrace``
(specular image-method tracer), ``phy`` (UPA steering, codebooks, optimal
beam pairs), ``features`` (voxel features and LIDAR simulation),
``neuralnet`` (3-D CNN with hand-written backpropagation) and ``harness``
(datasets, experiments, evaluation).
"""
__version__ = "0.1.0"
