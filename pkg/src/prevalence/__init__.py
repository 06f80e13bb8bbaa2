"""Design-consistent prevalence measurement from ML-assisted probability samples."""

from .estimator import LabelerQuality, PrevalenceEstimate, hh_ratio, ht_hajek, rogan_gladen_correct
from .sampler import ContentRecord, Reservoir, SampleDraw, SamplingConfig, Scheme

__all__ = [
    "ContentRecord",
    "LabelerQuality",
    "PrevalenceEstimate",
    "Reservoir",
    "SampleDraw",
    "SamplingConfig",
    "Scheme",
    "hh_ratio",
    "ht_hajek",
    "rogan_gladen_correct",
]

__version__ = "0.1.0"
