"""Multi-stage encoder-decoder backbones: graphs, analysis, autodiff execution, toy lab."""

__version__ = "0.1.0"
