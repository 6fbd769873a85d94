"""Named-entity recognition from incompletely annotated corpora."""

__version__ = "0.1.0"
