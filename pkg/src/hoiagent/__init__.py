"""Verifiable core of a tool-augmented, two-turn HOI detection agent."""

from .core import BBox, HOITriplet, ImageRecord, iou, normalize_label
from .vocab import Vocabulary, VocabularyError, load_vocabulary

__version__ = "0.1.0"
