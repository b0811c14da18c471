"""Distributed virtual-detector processing engine for 4D-STEM datasets."""

from .codec import kernel_backend
from .dataset import DatasetDescriptor, Partition, ingest, parse_sidecar, write_sidecar
from .executor import sync_run
from .kernels import AnalysisSpec

__all__ = [
    "AnalysisSpec",
    "DatasetDescriptor",
    "Partition",
    "ingest",
    "kernel_backend",
    "parse_sidecar",
    "sync_run",
    "write_sidecar",
]

__version__ = "0.1.0"
