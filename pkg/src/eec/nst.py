"""Autoencoder training with a content-transfer loss.

Each task's autoencoder is optimized on a mix of plain reconstruction loss
and a content loss: the l2 discrepancy between the frozen classifier's
convolutional feature maps of the real image and of its reconstruction.
The classifier never updates here; it acts as a fixed feature extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DivergenceError
from .memory import EncodedEpisode
from .nn import Adam, Autoencoder, Classifier, l2_reconstruction_loss


@dataclass
class NstTrainConfig:
    lam: float = 0.5
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    feature_layer: int = 3

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs/batch_size/learning_rate must be positive")


@dataclass
class TaskAutoencoderRegistry:
    """task id -> trained autoencoder; one entry per task, or a single
    shared entry (key 0) in the shared variant."""

    variant: str = "per-task"  # "per-task" | "shared"
    models: dict[int, Autoencoder] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in ("per-task", "shared"):
            raise ConfigError(f"unknown registry variant {self.variant!r}")

    def put(self, task: int, model: Autoencoder) -> None:
        if self.variant == "shared":
            self.models = {0: model}
        else:
            self.models[task] = model

    def for_task(self, task: int) -> Autoencoder:
        return self.models[0] if self.variant == "shared" else self.models[task]


def content_loss(classifier: Classifier, real: torch.Tensor,
                 recon: torch.Tensor, feature_layer: int = 3) -> torch.Tensor:
    """MSE between classifier feature maps of real images and reconstructions.

    Gradients flow only through the reconstruction branch; classifier
    parameters are never touched.
    """
    with torch.no_grad():
        target = classifier.features(real, layer=feature_layer)
    got = classifier.features(recon, layer=feature_layer)
    return l2_reconstruction_loss(target, got)


def combined_loss(lam: float, l_r: torch.Tensor | float,
                  l_cont: torch.Tensor | float):
    """(1 - lambda) * reconstruction + lambda * content."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    return (1.0 - lam) * l_r + lam * l_cont


def _train(ae: Autoencoder, data: torch.Tensor, classifier: Classifier,
           config: NstTrainConfig, seed: int) -> list[float]:
    """Shared training loop; returns per-epoch mean combined losses."""
    frozen = [p.requires_grad for p in classifier.parameters()]
    for p in classifier.parameters():
        p.requires_grad_(False)
    opt = Adam(list(ae.parameters()), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    epoch_losses = []
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(data.shape[0], generator=gen)
            total, batches = 0.0, 0
            for start in range(0, data.shape[0], config.batch_size):
                x = data[order[start: start + config.batch_size]]
                recon = ae(x)
                l_r = l2_reconstruction_loss(x, recon)
                if config.lam > 0.0:
                    l_c = content_loss(classifier, x, recon, config.feature_layer)
                else:
                    l_c = torch.zeros((), dtype=x.dtype)
                loss = combined_loss(config.lam, l_r, l_c)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite autoencoder loss in epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach())
                batches += 1
            epoch_losses.append(total / max(batches, 1))
    finally:
        for p, req in zip(classifier.parameters(), frozen):
            p.requires_grad_(req)
    return epoch_losses


def train_task_autoencoder(data: torch.Tensor, classifier: Classifier,
                           config: NstTrainConfig, seed: int = 0,
                           max_restarts: int = 2
                           ) -> tuple[Autoencoder, list[float]]:
    """Train a fresh autoencoder for one task's image batch.

    The classifier must already be trained on this task's real data (it
    provides the content-loss feature maps). Returns the model and the
    per-epoch loss trace.

    Occasionally an initialization lands in a dead basin and the model
    plateaus at a near-constant output, which would poison replay for
    this task forever. A run whose loss has converged (under 0.1%
    relative improvement in the last epoch) yet whose pixel
    reconstruction error does not beat the best constant predictor (the
    per-pixel mean image) is treated as collapsed and restarted from a
    reseeded initialization, up to `max_restarts` extra attempts. Runs
    still making progress are accepted as-is, so deliberately short
    training is unaffected. The first attempt uses `seed` unchanged, so
    accepted first attempts are bitwise identical to a restart-free run.
    """
    if max_restarts < 0:
        raise ConfigError(f"max_restarts must be >= 0, got {max_restarts}")
    sample = data[:1024]
    mean_image = sample.mean(dim=0, keepdim=True)
    baseline = float(l2_reconstruction_loss(sample,
                                            mean_image.expand_as(sample)))
    for attempt in range(max_restarts + 1):
        attempt_seed = seed + 999983 * attempt
        torch.manual_seed(attempt_seed)
        ae = Autoencoder(in_channels=data.shape[1], image_size=data.shape[2])
        losses = _train(ae, data, classifier, config, attempt_seed)
        with torch.no_grad():
            mse = float(l2_reconstruction_loss(sample, ae(sample)))
        converged = (len(losses) >= 2
                     and losses[-2] - losses[-1] < 1e-3 * abs(losses[-2]))
        if mse < baseline or mse <= 1e-12 or not converged:
            return ae, losses
    raise DivergenceError(
        f"autoencoder reconstruction ({mse:.6f}) never beat the "
        f"constant-image baseline ({baseline:.6f}) in "
        f"{max_restarts + 1} attempts")


def retrain_shared_autoencoder(ae: Autoencoder, new_data: torch.Tensor,
                               old_reconstructions: dict[int, torch.Tensor],
                               classifier: Classifier, config: NstTrainConfig,
                               alpha_counters: dict[int, int] | None = None,
                               seed: int = 0) -> list[float]:
    """Continue training the shared autoencoder on new images mixed with the
    old tasks' reconstructions (one shuffled stream, sizes untouched).

    Increments `alpha_counters[task]` for every old task that contributed
    reconstructions.
    """
    streams = [new_data] + [old_reconstructions[t]
                            for t in sorted(old_reconstructions)
                            if old_reconstructions[t].shape[0] > 0]
    mixture = torch.cat(streams) if len(streams) > 1 else new_data
    losses = _train(ae, mixture, classifier, config, seed)
    if alpha_counters is not None:
        for t, recon in old_reconstructions.items():
            if recon.shape[0] > 0:
                alpha_counters[t] = alpha_counters.get(t, 0) + 1
    return losses


def encode_task(ae: Autoencoder, images: torch.Tensor, labels: np.ndarray,
                task: int, batch_size: int = 256) -> list[EncodedEpisode]:
    """Encode one task's labeled images into stored episodes."""
    episodes = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            z = ae.encode_flat(images[start: start + batch_size])
            for row, label in zip(z.numpy(),
                                  labels[start: start + batch_size]):
                episodes.append(EncodedEpisode(row, int(label), task))
    return episodes
