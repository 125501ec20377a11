"""voxreason: neural-symbolic 3D visual reasoning over voxel fields.

Synthesizes multi-room voxel scenes and multi-view renderings, fits compact
density/color/feature grids from the views, grounds open-vocabulary
concepts by embedding attention, and answers compositional questions by
executing typed operator programs - plus a bias-controlled benchmark
generator and an end-to-end CLI.
"""

__version__ = "0.1.0"
