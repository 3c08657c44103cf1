"""Hand mesh and pose regression from synthetic video, trained on 2D labels."""

__version__ = "0.1.0"
