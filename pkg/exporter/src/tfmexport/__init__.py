"""Fold-by-fold prediction exporter for in-context tabular models.

Consumes the fold-plan and preprocessed-matrix files written by the
distillation engine's `split` command and produces prediction-cache CSVs in
the engine's wire format. The bundled stub model stands in for real GPU
models in tests and CI.
"""

from .export import ExportJob, ExportError, export_cache
from .models import available_models, load_model

__version__ = "0.1.0"
