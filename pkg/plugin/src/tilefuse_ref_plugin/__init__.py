"""Reference external segmenter plugin for the tilefuse manifest protocol."""

from .plugin import main, quantile_labels, run_plugin

__version__ = "0.1.0"
