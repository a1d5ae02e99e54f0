"""Export frozen token features from pretrained image backbones into
the MPFT format consumed by the momentprobe trainer."""

from .export import ExportSpec, ExportSummary, export_features
from .models import REGISTRY, build_model
from .mpft import write_mpft

__version__ = "0.1.0"
