"""Neural-network substrate: classifier and autoencoder models, losses,
a small Adam optimizer and a finite-difference gradient checker.

All models are plain PyTorch modules restricted to the fixed layer set used
by the experiments: strided 4x4 convolutions with LeakyReLU(0.2), transpose
convolutions for decoding, and a single dense output head.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError, InvalidLabelError, ShapeError

IMAGE_SIZE = 32


def _check_image_batch(x: torch.Tensor, channels: int, size: int) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected rank-4 image batch, got rank {x.dim()}")
    if x.shape[1] != channels or x.shape[2] != size or x.shape[3] != size:
        raise ShapeError(
            f"expected batch of shape (n, {channels}, {size}, {size}), "
            f"got {tuple(x.shape)}"
        )
    if x.shape[0] < 1:
        raise ShapeError("image batch must contain at least one image")


class Classifier(nn.Module):
    """DCGAN-discriminator style classifier: 3 strided conv layers + dense head.

    Channel progression is in_channels -> 32 -> 64 -> 128 with 4x4 kernels,
    stride 2, padding 1 and LeakyReLU(0.2); a 32x32 input reaches a 4x4x128
    feature map that feeds the dense output layer.
    """

    def __init__(self, num_classes: int, in_channels: int = 1,
                 image_size: int = IMAGE_SIZE):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        self.in_channels = in_channels
        self.image_size = image_size
        self.conv1 = nn.Conv2d(in_channels, 32, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 4, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, 128, 4, stride=2, padding=1)
        self._feat_size = image_size // 8
        self.fc = nn.Linear(128 * self._feat_size ** 2, num_classes)

    @property
    def num_classes(self) -> int:
        return self.fc.out_features

    def features(self, x: torch.Tensor, layer: int = 3) -> torch.Tensor:
        """Activations after conv layer `layer` (1-3, default last conv)."""
        if layer not in (1, 2, 3):
            raise ConfigError(f"feature layer must be 1, 2 or 3, got {layer}")
        _check_image_batch(x, self.in_channels, self.image_size)
        h = F.leaky_relu(self.conv1(x), 0.2)
        if layer == 1:
            return h
        h = F.leaky_relu(self.conv2(h), 0.2)
        if layer == 2:
            return h
        return F.leaky_relu(self.conv3(h), 0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x, layer=3)
        return self.fc(h.flatten(1))

    def expand_head(self, new_num_classes: int) -> None:
        """Grow the dense output layer to `new_num_classes` outputs.

        Rows for previously seen classes are copied bitwise; new rows get the
        layer's default initialization (seed the global RNG beforehand for
        reproducible runs).
        """
        old = self.fc
        if new_num_classes < old.out_features:
            raise ConfigError("cannot shrink the classifier head")
        if new_num_classes == old.out_features:
            return
        new = nn.Linear(old.in_features, new_num_classes).to(old.weight.dtype)
        with torch.no_grad():
            new.weight[: old.out_features] = old.weight
            new.bias[: old.out_features] = old.bias
        self.fc = new


class Autoencoder(nn.Module):
    """Shallow convolutional autoencoder: 2 strided conv encoder layers and a
    mirrored 2-layer transpose-conv decoder with sigmoid output.

    For a 32x32 single-channel input the latent feature map is 4x8x8
    (256 values per image).
    """

    def __init__(self, in_channels: int = 1, hidden_channels: int = 8,
                 latent_channels: int = 4, image_size: int = IMAGE_SIZE):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.enc1 = nn.Conv2d(in_channels, hidden_channels, 4, stride=2, padding=1)
        self.enc2 = nn.Conv2d(hidden_channels, latent_channels, 4, stride=2, padding=1)
        self.dec1 = nn.ConvTranspose2d(latent_channels, hidden_channels, 4,
                                       stride=2, padding=1)
        self.dec2 = nn.ConvTranspose2d(hidden_channels, in_channels, 4,
                                       stride=2, padding=1)
        self.latent_shape = (latent_channels, image_size // 4, image_size // 4)
        self.latent_dim = latent_channels * (image_size // 4) ** 2

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Latent feature map of shape (n, *latent_shape)."""
        _check_image_batch(x, self.in_channels, self.image_size)
        return self.enc2(F.leaky_relu(self.enc1(x), 0.2))

    def encode_flat(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode(x).flatten(1)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Reconstruct images from a latent map or flattened latent batch."""
        if z.dim() == 2:
            if z.shape[1] != self.latent_dim:
                raise ShapeError(
                    f"latent length {z.shape[1]} != expected {self.latent_dim}")
            z = z.view(z.shape[0], *self.latent_shape)
        elif z.dim() != 4 or z.shape[1:] != self.latent_shape:
            raise ShapeError(f"bad latent shape {tuple(z.shape)}")
        return torch.sigmoid(self.dec2(F.leaky_relu(self.dec1(z), 0.2)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def l2_reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between a batch and its reconstruction."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return F.mse_loss(x_hat, x)


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor,
                           weights: torch.Tensor) -> torch.Tensor:
    """Mean of per-sample cross-entropy scaled by per-sample weights.

    Equals the standard mean cross-entropy when all weights are 1.
    """
    if logits.dim() != 2:
        raise ShapeError("logits must be (n, num_classes)")
    n, c = logits.shape
    if labels.shape != (n,) or weights.shape != (n,):
        raise ShapeError("labels and weights must be 1-D with one entry per sample")
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise InvalidLabelError(
            f"labels must lie in [0, {c}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]")
    if (weights < 0).any():
        raise ConfigError("per-sample weights must be nonnegative")
    per_sample = F.cross_entropy(logits, labels, reduction="none")
    return (per_sample * weights).mean()


class Adam(object):
    """Adam over an explicit parameter list.

    Standard recursion with bias correction:
        m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
        p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    @torch.no_grad()
    def step(self, grads: Sequence[torch.Tensor] | None = None) -> None:
        """Apply one update; reads `p.grad` unless explicit grads are given."""
        if grads is None:
            grads = [p.grad for p in self.params]
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient at step {t}")
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lr)


def parameter_vector(model: nn.Module) -> torch.Tensor:
    """All parameters flattened into one detached vector (for checksums)."""
    return torch.cat([p.detach().reshape(-1).clone() for p in model.parameters()])


def finite_difference_check(loss_fn: Callable[[], torch.Tensor],
                            params: Sequence[torch.Tensor],
                            epsilon: float = 1e-6,
                            coords_per_param: int = 4,
                            seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to `coords_per_param` coordinates of each parameter tensor.
    Run models in double precision: single precision drowns the comparison
    in roundoff. Keep epsilon small (default 1e-6): LeakyReLU kinks inflate
    the central difference at larger steps. Relative error uses
    max(|analytic|, |fd|, 1e-8) as scale.
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ConfigError("epsilon must lie in [1e-6, 1e-3]")
    params = list(params)
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            if g is None:
                continue
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            k = min(coords_per_param, n)
            idx = torch.randperm(n, generator=gen)[:k]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + epsilon
                lp = float(loss_fn())
                flat[i] = orig - epsilon
                lm = float(loss_fn())
                flat[i] = orig
                fd = (lp - lm) / (2.0 * epsilon)
                a = float(gflat[i])
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, rel)
    return worst
