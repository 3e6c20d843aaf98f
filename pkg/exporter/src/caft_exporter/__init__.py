"""Transformer token-map exporter emitting the CTM interchange format."""

from .backbone import PRESETS, BackboneConfig, VisionBackbone, load_checkpoint, make_random_checkpoint
from .ctm import write_ctm
from .export import ExportConfig, export_tokens, quadrant_boxes

__version__ = "0.1.0"
