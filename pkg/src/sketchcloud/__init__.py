"""sketchcloud: line-drawing to 3D point cloud reconstruction.

A sketch is translated into a dense feature grid, a density map over image
bins is predicted from it, and a 3D point cloud is generated by two-stage
sampling: 2D locations from the density map, then a noise-conditioned depth
per location.
"""

__version__ = "0.1.0"
