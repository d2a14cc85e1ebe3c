"""Profiled cross-device power side-channel attacks on synthetic AES traces.

Modules: ``core`` (trace data model), ``synth`` (leakage simulation),
``align`` (dynamic time warping), ``pca``, ``nn`` (MLP/CNN from scratch),
``attacks`` (DOM, templates, CPA, diagnostics), ``pipeline`` and ``io``.
"""

from .core import (
    DimensionError, EmptyInputError, SplitSpec, TraceError, TraceLabel, TraceMatrix, merge, split,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "EmptyInputError", "SplitSpec", "TraceError", "TraceLabel",
    "TraceMatrix", "merge", "split",
]
