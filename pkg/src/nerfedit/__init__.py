"""Interactive local recoloring and stylization of neural radiance fields.

The pipeline: fit a hash-encoded radiance field to posed images, select a
3D region with a voxel edit grid (scribbles + region growing), learn a
palette-based color decomposition over estimated ray terminations with
optional style losses, then distill the edit back into the field.
"""

__version__ = "0.1.0"
