"""Semantics-aware split point sampling, role-grouped INT8 quantization and
two-processor pipeline simulation for point-cloud detectors."""

__version__ = "0.1.0"
