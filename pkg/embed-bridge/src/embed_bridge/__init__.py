"""Offline image-folder to embedding-file extraction."""

from .encoders import ENCODER_NAMES, PixelStatsEncoder, get_encoder
from .errors import BridgeError, EncoderUnavailableError, UsageError
from .extract import ExtractionJob, discover_images, export_centroid_only, extract

__all__ = [
    "BridgeError",
    "UsageError",
    "EncoderUnavailableError",
    "ENCODER_NAMES",
    "PixelStatsEncoder",
    "get_encoder",
    "ExtractionJob",
    "discover_images",
    "extract",
    "export_centroid_only",
]
