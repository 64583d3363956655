"""Few-shot class-incremental learning for 3D point clouds.

An orthonormal basis of point-feature cluster centers describes every
object; a relation module matches the resulting embeddings to class
prototypes across a sequence of incremental tasks with exemplar memory.
"""

__version__ = "0.1.0"
