import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from eec.data import make_synthetic
from eec.nn import Autoencoder, Classifier


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_dataset():
    """3-class synthetic dataset, 20 images per class, 32x32."""
    return make_synthetic(num_classes=3, per_class=20, image_size=32,
                          noise_level=0.1, seed=7)


@pytest.fixture
def small_classifier():
    torch.manual_seed(11)
    return Classifier(num_classes=3)


@pytest.fixture
def small_autoencoder():
    torch.manual_seed(12)
    return Autoencoder()


def train_toy_classifier(images: np.ndarray, labels: np.ndarray,
                         num_classes: int, epochs: int = 5,
                         seed: int = 0) -> Classifier:
    """Quick supervised training used to set up rehearsal/filter tests."""
    from eec.nn import Adam, weighted_cross_entropy
    torch.manual_seed(seed)
    model = Classifier(num_classes)
    x = torch.from_numpy(images)
    y = torch.from_numpy(labels)
    opt = Adam(list(model.parameters()))
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        order = torch.randperm(x.shape[0], generator=gen)
        for start in range(0, x.shape[0], 32):
            idx = order[start: start + 32]
            loss = weighted_cross_entropy(model(x[idx]), y[idx],
                                          torch.ones(idx.shape[0]))
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model
