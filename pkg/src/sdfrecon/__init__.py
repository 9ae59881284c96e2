"""Differentiable sphere-tracing renderer for discrete SDF grids, with a
multi-view shape-reconstruction engine on top.

Subpackages by responsibility: :mod:`~sdfrecon.grid` stores and reconstructs
the field, :mod:`~sdfrecon.scene` defines cameras and lights,
:mod:`~sdfrecon.tracer` locates ray-surface intersections,
:mod:`~sdfrecon.shade` computes pixel values and their sample derivatives,
:mod:`~sdfrecon.loss` assembles objectives, :mod:`~sdfrecon.optim` runs the
coarse-to-fine optimization, :mod:`~sdfrecon.mesheval` extracts and compares
meshes, and :mod:`~sdfrecon.cli` is the command-line frontend.
"""

__version__ = "0.1.0"
