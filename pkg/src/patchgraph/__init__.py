"""Landmark patch matching with spatial neighborhood graphs.

The package covers the full desk-scale pipeline: synthetic street scenes
rendered into image patches, K-nearest-neighbor clique graphs over patch
locations, graph-network embeddings, a block-structured bilinear scorer
trained with a binary information loss, discrete-model checks of the
information-theoretic bounds behind the scorer, and two applications
(place recognition and stereo depth).
"""

__version__ = "0.1.0"
