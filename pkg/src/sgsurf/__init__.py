"""Scene-graph-guided surface reconstruction on a voxel SDF field.

Jointly refines a trilinear SDF/color grid, per-image camera poses and
per-image confidence scores from a scene graph of matched images, and
evaluates the result against ground truth.
"""

from .errors import (AlignmentError, BundleError, CheckpointError, ConfigurationError, InputError,
                     MalformedFileError, MissingFileError, SchemaVersionError, SGSurfError)
from .field import VoxelField, render_image, render_ray
from .geometry import Intrinsics, Pose, Ray, Similarity
from .scene_graph import Edge, Node, SceneGraph

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "BundleError", "CheckpointError", "ConfigurationError", "InputError", "MalformedFileError",
    "MissingFileError", "SchemaVersionError", "SGSurfError", "VoxelField", "render_image", "render_ray",
    "Intrinsics", "Pose", "Ray", "Similarity", "Edge", "Node", "SceneGraph",
]
