"""Desk-scale image-customization attention stack.

Gated style cross-attention, residual structure injection and cyclic
multi-subject content embedding on a toy denoising backbone, with a
partial fine-tuning trainer and an ablation harness.
"""

from .content_cycling import ContentEmbeddingList, CyclicSchedule, build_schedule, embedding_for_site
from .pipeline import BackboneConfig, Conditions, IcasModel, NoiseSchedule, decode, forward, sample
from .structure_preservation import SpmParams, StructureScale, inject_structure, project_residual
from .style_injection import GateConfig, SimParams, compute_gate, inject_style, style_attention
from .training import AdamW, ParameterPartition, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "BackboneConfig",
    "Conditions",
    "ContentEmbeddingList",
    "CyclicSchedule",
    "GateConfig",
    "IcasModel",
    "NoiseSchedule",
    "ParameterPartition",
    "SimParams",
    "SpmParams",
    "StructureScale",
    "TrainConfig",
    "build_schedule",
    "compute_gate",
    "decode",
    "embedding_for_site",
    "forward",
    "inject_structure",
    "inject_style",
    "project_residual",
    "sample",
    "style_attention",
    "train",
]
