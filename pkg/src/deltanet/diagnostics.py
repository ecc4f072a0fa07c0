"""End-to-end gradient check of a small model on a random example."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .corpus import BOS, EOS
from .model import Batch, DeltaNetModel, ModelConfig

__all__ = ["random_batch", "gradcheck_model", "ModelGradCheck"]


def random_batch(config: ModelConfig, n_tokens: int, batch_size: int = 1, seed: int = 0) -> Batch:
    """Random images and reports; targets are BOS + ``n_tokens`` words + EOS."""
    rng = np.random.default_rng(seed)
    C, S, E = config.in_channels, config.image_size, config.vocab_size
    images = rng.standard_normal((batch_size, C, S, S))
    words = rng.integers(4, E, size=(batch_size, n_tokens))
    targets = np.concatenate([np.full((batch_size, 1), BOS), words, np.full((batch_size, 1), EOS)], 1)
    batch = Batch(images=images, targets=targets, target_mask=np.ones_like(targets))
    L = config.n_conditions
    if L:
        n_c = config.cond_len
        batch.cond_images = rng.standard_normal((batch_size, L, C, S, S))
        batch.cond_reports = rng.integers(4, E, size=(batch_size, L, n_c))
        lengths = rng.integers(max(1, n_c // 2), n_c + 1, size=(batch_size, L))
        batch.cond_mask = (np.arange(n_c) < lengths[..., None]).astype(np.int64)
        batch.cond_reports[batch.cond_mask == 0] = 0
    return batch


@dataclass
class ModelGradCheck:
    config: ModelConfig
    report: nx.GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def gradcheck_model(config: ModelConfig | None = None, n_tokens: int = 3, max_entries: int | None = 12,
                    tolerance: float = 1e-4, epsilon: float = 1e-4,
                    seed: int = 0) -> ModelGradCheck:
    """Finite-difference check of the teacher-forced loss against every parameter.

    The default configuration is the desk-scale multi-condition model
    (D=64, K=16, three conditions). ``max_entries`` caps how many entries of
    each parameter tensor are perturbed.

    Many gradients deep in the report encoder are around 1e-6 while the loss is
    O(1), so a 1e-5 step already loses about five digits to round-off in the
    difference quotient. The default step of 1e-4 keeps both round-off and
    truncation error two orders below the tolerance.
    """
    if config is None:
        config = ModelConfig(vocab_size=20, dim=64, positions=16, heads=4, max_conditions=3,
                             cond_len=6, max_decode_len=8, mode="deltaL", seed=seed)
    if config.dtype != "float64":
        raise ValueError("gradient checking needs float64 parameters")
    t0 = time.perf_counter()
    model = DeltaNetModel(config)
    batch = random_batch(config, n_tokens, seed=seed)
    report = nx.grad_check(lambda: model.forward_loss(batch), model.params(),
                           epsilon=epsilon, tolerance=tolerance, max_entries=max_entries, seed=seed)
    return ModelGradCheck(config, report, time.perf_counter() - t0)
