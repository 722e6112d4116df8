"""Replay generation for old tasks.

Rehearsal decodes stored episodes back into images; pseudorehearsal samples
diagonal Gaussians around concept centroids, decodes the samples and keeps
only images the classifier assigns to the centroid's own label. Replay
losses are down-weighted by the sample decay weight e^(-gamma * alpha).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .memory import ConceptPair, EncodedEpisode
from .nn import Autoencoder, Classifier


@dataclass
class ReplayBatch:
    """Images + labels from one replay stream of one old task."""

    images: torch.Tensor
    labels: torch.Tensor
    stream: str  # "reconstructed" | "pseudo"
    task: int
    shortfall: bool = False  # pseudo stream produced fewer images than asked

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class DecayConfig:
    """Decay coefficients and per-task retrain counters, one per stream."""

    gamma_r: float = 0.0
    gamma_p: float = 0.0
    alpha_r: dict[int, int] = field(default_factory=dict)
    alpha_p: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for name, g in (("gamma_r", self.gamma_r), ("gamma_p", self.gamma_p)):
            if not 0.0 <= g <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {g}")

    def weight_r(self, task: int) -> float:
        return sample_decay_weight(self.gamma_r, self.alpha_r.get(task, 0))

    def weight_p(self, task: int) -> float:
        return sample_decay_weight(self.gamma_p, self.alpha_p.get(task, 0))


def sample_decay_weight(gamma: float, alpha: int) -> float:
    """e^(-gamma * alpha); 1.0 for never-retrained tasks."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    return math.exp(-gamma * alpha)


def reconstruct_task(episodes: list[EncodedEpisode], decoder: Autoencoder,
                     batch_size: int = 256) -> ReplayBatch:
    """Decode one task's stored episodes into a reconstructed replay batch."""
    if not episodes:
        empty = torch.empty(0, decoder.in_channels, decoder.image_size,
                            decoder.image_size)
        return ReplayBatch(empty, torch.empty(0, dtype=torch.long),
                           "reconstructed", task=-1)
    task = episodes[0].task
    if any(ep.task != task for ep in episodes):
        raise ShapeError("reconstruct_task expects episodes of a single task")
    z = torch.from_numpy(np.stack([ep.embedding for ep in episodes])).float()
    chunks = []
    with torch.no_grad():
        for start in range(0, z.shape[0], batch_size):
            chunks.append(decoder.decode(z[start: start + batch_size]))
    labels = torch.tensor([ep.label for ep in episodes], dtype=torch.long)
    return ReplayBatch(torch.cat(chunks), labels, "reconstructed", task)


def sample_pseudo_episodes(pair: ConceptPair, count: int,
                           seed: int = 0) -> np.ndarray:
    """Draw latent vectors from N(centroid, diag(variance))."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((count, pair.centroid.shape[0]))
    return pair.centroid + np.sqrt(pair.variance) * noise


def generate_filtered_pseudo_images(pair: ConceptPair, decoder: Autoencoder,
                                    classifier: Classifier,
                                    oversample_factor: int = 5,
                                    seed: int = 0,
                                    retry_factor: int = 10) -> ReplayBatch:
    """Pseudo-images for one concept pair, filtered by the classifier.

    Samples weight x oversample_factor latents, decodes them and keeps the
    images predicted as the pair's own label, truncated to pair.weight. One
    retry at `retry_factor` oversampling runs on shortfall; a persisting
    shortfall is flagged, not fatal.
    """

    def attempt(factor: int, attempt_seed: int) -> torch.Tensor:
        z = sample_pseudo_episodes(pair, pair.weight * factor, attempt_seed)
        with torch.no_grad():
            images = decoder.decode(torch.from_numpy(z).float())
            preds = classifier(images).argmax(dim=1)
        return images[preds == pair.label]

    kept = attempt(oversample_factor, seed)
    shortfall = kept.shape[0] < pair.weight
    if shortfall and retry_factor > oversample_factor:
        kept = attempt(retry_factor, seed + 1)
        shortfall = kept.shape[0] < pair.weight
    kept = kept[: pair.weight]
    labels = torch.full((kept.shape[0],), pair.label, dtype=torch.long)
    return ReplayBatch(kept, labels, "pseudo", pair.task, shortfall=shortfall)
