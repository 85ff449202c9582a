"""Video-guided subtitle translation toolkit: model, corpus pipeline, training, evaluation."""

__version__ = "0.1.0"
