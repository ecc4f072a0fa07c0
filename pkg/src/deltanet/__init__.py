"""Conditional radiology-style report generation with feature differences.

A numpy implementation of a report generator that conditions on earlier
image/report pairs: a reverse-mode autodiff core, LSTM and attention
layers, the basic and conditional models, cross-patient retrieval, a
synthetic multi-visit corpus and caption metrics.
"""
from ._kernels import backend
from .corpus import (ExamRecord, SyntheticConfig, Vocabulary, build_vocabulary, generate_synthetic,
                     load_manifest, save_manifest, split_patients)
from .metrics import bleu, cider_d, clinical_efficacy, rouge_l
from .model import DeltaNetModel, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import DimensionError, NonFiniteError, Tensor, UsageError, grad_check
from .retrieval import FeatureIndex, build_index, retrieve_similar

__version__ = "0.1.0"

__all__ = [
    "backend",
    "ExamRecord",
    "SyntheticConfig",
    "Vocabulary",
    "build_vocabulary",
    "generate_synthetic",
    "load_manifest",
    "save_manifest",
    "split_patients",
    "bleu",
    "cider_d",
    "clinical_efficacy",
    "rouge_l",
    "DeltaNetModel",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "DimensionError",
    "NonFiniteError",
    "Tensor",
    "UsageError",
    "grad_check",
    "FeatureIndex",
    "build_index",
    "retrieve_similar",
]
