"""Model weight and calibration-statistics extraction."""

from .extract import ExtractionManifest, extract, extract_hf, load_manifest

__all__ = ["ExtractionManifest", "extract", "extract_hf", "load_manifest"]
