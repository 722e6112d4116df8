"""Class-incremental training loop.

Each increment trains the classifier on the new classes' real images mixed
with replay images of the old tasks (reconstructions and filtered
pseudo-images), each replay stream down-weighted by its sample decay
weight. Evaluation is single-headed: argmax over all classes seen so far.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ExperimentConfig
from .data import (LabeledDataset, TaskSchedule, load_mnist_idx,
                   make_synthetic, pad_to_32, split_class_incremental)
from .errors import ConfigError, DivergenceError
from .memory import MemoryStore, enforce_budget, memory_units
from .nn import Adam, Classifier, weighted_cross_entropy
from .nst import (NstTrainConfig, TaskAutoencoderRegistry, encode_task,
                  retrain_shared_autoencoder, train_task_autoencoder)
from .rehearsal import (DecayConfig, ReplayBatch, generate_filtered_pseudo_images,
                        reconstruct_task)


@dataclass
class IncrementPlan:
    """Real data for the new task plus weighted replay for every old task."""

    task: int
    real_images: torch.Tensor
    real_labels: torch.Tensor
    replay: list[tuple[ReplayBatch, float]] = field(default_factory=list)


@dataclass
class IncrementReport:
    increment: int
    overall_acc: float
    per_class_acc: dict[int, float]
    memory_units: int
    loss_trace: list[float]
    wall_s: float
    complete: bool = True


def train_increment(classifier: Classifier, plan: IncrementPlan, epochs: int,
                    lr: float, batch_size: int = 64, seed: int = 0
                    ) -> list[float]:
    """Optimize the classifier on the mixed real + replay stream.

    Per-sample weights carry the stream decay factors (1 for real images),
    so shuffled mixed batches realize the weighted per-stream loss sum.
    Learning rate drops x0.1 at 80% of the epochs. Returns per-epoch losses.
    """
    if plan.real_images.shape[0] == 0:
        raise ConfigError("increment plan has no real data")
    parts_x = [plan.real_images]
    parts_y = [plan.real_labels]
    parts_w = [torch.ones(plan.real_images.shape[0])]
    for batch, weight in plan.replay:
        if len(batch) == 0:
            continue
        if not 0.0 < weight <= 1.0:
            raise ConfigError(f"replay weight must be in (0, 1], got {weight}")
        parts_x.append(batch.images)
        parts_y.append(batch.labels)
        parts_w.append(torch.full((len(batch),), weight))
    x = torch.cat(parts_x)
    y = torch.cat(parts_y)
    w = torch.cat(parts_w)

    opt = Adam(list(classifier.parameters()), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    decay_epoch = max(1, int(round(0.8 * epochs)))
    trace = []
    for epoch in range(epochs):
        if epoch == decay_epoch and epochs > 1:
            opt.lr = lr * 0.1
        order = torch.randperm(x.shape[0], generator=gen)
        total, batches = 0.0, 0
        for start in range(0, x.shape[0], batch_size):
            idx = order[start: start + batch_size]
            loss = weighted_cross_entropy(classifier(x[idx]), y[idx], w[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite classifier loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        trace.append(total / max(batches, 1))
    return trace


def evaluate_single_headed(classifier: Classifier, images: torch.Tensor,
                           labels: torch.Tensor, seen_classes: list[int],
                           batch_size: int = 512
                           ) -> tuple[dict[int, float], float]:
    """Per-class and overall top-1 accuracy over the seen-class logits."""
    seen = torch.tensor(sorted(seen_classes), dtype=torch.long)
    correct = {int(c): 0 for c in seen}
    total = {int(c): 0 for c in seen}
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = classifier(images[start: start + batch_size])
            preds = seen[logits[:, seen].argmax(dim=1)]
            for p, t in zip(preds.tolist(),
                            labels[start: start + batch_size].tolist()):
                total[t] += 1
                correct[t] += int(p == t)
    per_class = {c: correct[c] / total[c] for c in total if total[c] > 0}
    n = sum(total.values())
    overall = sum(correct.values()) / n if n else 0.0
    return per_class, overall


def average_incremental_accuracy(accuracies: list[float]) -> float:
    """Mean of the overall top-1 accuracies recorded after each increment."""
    if not accuracies:
        raise ConfigError("need at least one increment accuracy")
    return float(np.mean(accuracies))


@dataclass
class ExperimentResult:
    reports: list[IncrementReport]
    schedule: TaskSchedule
    store: MemoryStore
    registry: TaskAutoencoderRegistry
    classifier: Classifier
    decay: DecayConfig
    complete: bool = True

    @property
    def accuracies(self) -> list[float]:
        return [r.overall_acc for r in self.reports]

    def average_accuracy(self, through: int | None = None) -> float:
        accs = self.accuracies if through is None else self.accuracies[:through]
        return average_incremental_accuracy(accs)


def load_experiment_data(config: ExperimentConfig, seed: int
                         ) -> tuple[LabeledDataset, LabeledDataset]:
    if config.dataset == "mnist":
        root = config.data_dir.rstrip("/")
        train = load_mnist_idx(f"{root}/train-images-idx3-ubyte",
                               f"{root}/train-labels-idx1-ubyte", "train")
        test = load_mnist_idx(f"{root}/t10k-images-idx3-ubyte",
                              f"{root}/t10k-labels-idx1-ubyte", "test")
        train = LabeledDataset(pad_to_32(train.images), train.labels, "train")
        test = LabeledDataset(pad_to_32(test.images), test.labels, "test")
        return train, test
    return make_synthetic(config.num_classes, config.per_class,
                          config.image_size, config.noise_level, seed=seed)


def _ae_checkpoint(model: torch.nn.Module) -> bytes:
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.getvalue()


def reencode_episodes(store: MemoryStore, ae, task: int,
                      images: torch.Tensor, batch_size: int = 256) -> None:
    """Refresh a task's stored episode embeddings through a retrained encoder.

    After the shared autoencoder is retrained, stored latents no longer
    match its decoder, so each old episode is replaced by re-encoding the
    reconstruction it produced before retraining. Labels, order and task
    ids are preserved; concept pairs (if any) are left as approximations.
    """
    episodes = [ep for ep in store.episodes() if ep.task == task]
    if len(episodes) != images.shape[0]:
        raise ConfigError(
            f"task {task}: {images.shape[0]} reconstructions for "
            f"{len(episodes)} stored episodes")
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(ae.encode_flat(images[start: start + batch_size]))
    if not chunks:
        return
    fresh = torch.cat(chunks).double().numpy()
    for ep, row in zip(episodes, fresh):
        ep.embedding = row


def build_increment_plan(task: int, images: torch.Tensor, labels: torch.Tensor,
                         store: MemoryStore, registry: TaskAutoencoderRegistry,
                         classifier: Classifier, decay: DecayConfig,
                         oversample_factor: int = 5, seed: int = 0
                         ) -> IncrementPlan:
    """Replay plan for one increment from the stored episodes and concepts."""
    plan = IncrementPlan(task, images, labels)
    all_eps = store.episodes()
    all_pairs = store.pairs()
    for old in store.tasks():
        decoder = registry.for_task(old)
        eps = [ep for ep in all_eps if ep.task == old]
        if eps:
            plan.replay.append((reconstruct_task(eps, decoder),
                                decay.weight_r(old)))
        for k, pair in enumerate(p for p in all_pairs if p.task == old):
            batch = generate_filtered_pseudo_images(
                pair, decoder, classifier, oversample_factor,
                seed=seed * 7919 + old * 613 + k)
            plan.replay.append((batch, decay.weight_p(old)))
    return plan


def run_experiment(config: ExperimentConfig, seed: int | None = None,
                   progress=None) -> ExperimentResult:
    """Run the full class-incremental protocol for one seed.

    Per increment: expand the classifier head, build the replay plan, train
    the classifier, train/encode the task autoencoder, enforce the memory
    budget, update decay counters, evaluate single-headed.
    """
    if seed is None:
        seed = config.seed
    train, test = load_experiment_data(config, seed)
    order_seed = seed if config.shuffle_class_order else None
    schedule, tasks = split_class_incremental(
        train, config.classes_per_increment, order_seed)

    ae_config = NstTrainConfig(
        lam=config.lam, epochs=config.autoencoder_epochs,
        batch_size=config.autoencoder_batch_size,
        learning_rate=config.autoencoder_lr,
        feature_layer=config.feature_layer)
    registry = TaskAutoencoderRegistry(
        "shared" if config.variant == "eecs" else "per-task")
    decay = DecayConfig(config.gamma_r, config.gamma_p)
    latent_dim = None
    store: MemoryStore | None = None
    classifier: Classifier | None = None
    exemplars: list[tuple[torch.Tensor, torch.Tensor]] = []
    reports: list[IncrementReport] = []
    complete = True

    test_images = torch.from_numpy(test.images)
    test_labels = torch.from_numpy(test.labels)

    try:
        for t, task_ds in enumerate(tasks):
            tic = time.perf_counter()
            seen = schedule.classes_through(t)
            head = max(seen) + 1
            images = torch.from_numpy(task_ds.images)
            labels = torch.from_numpy(task_ds.labels)

            torch.manual_seed(seed * 100003 + t)
            if classifier is None or config.scratch_classifier:
                classifier = Classifier(head, in_channels=images.shape[1],
                                        image_size=images.shape[2])
            else:
                classifier.expand_head(head)

            plan = IncrementPlan(t, images, labels)
            if config.variant in ("eec", "eecs") and store is not None:
                plan = build_increment_plan(
                    t, images, labels, store, registry, classifier, decay,
                    config.oversample_factor, seed=seed * 31 + t)
            elif config.variant == "exemplar-baseline":
                for old, (ex_images, ex_labels) in enumerate(exemplars):
                    plan.replay.append(
                        (ReplayBatch(ex_images, ex_labels, "exemplar", old), 1.0))

            trace = train_increment(
                classifier, plan, config.classifier_epochs,
                config.classifier_lr, config.classifier_batch_size,
                seed=seed * 7 + t)

            if config.variant == "eec":
                ae, _ = train_task_autoencoder(images, classifier, ae_config,
                                               seed=seed * 13 + t)
                registry.put(t, ae)
            elif config.variant == "eecs":
                if not registry.models:
                    ae, _ = train_task_autoencoder(images, classifier,
                                                   ae_config, seed=seed * 13)
                    registry.put(0, ae)
                else:
                    ae = registry.for_task(t)
                    old_recons = {
                        old: reconstruct_task(
                            [ep for ep in store.episodes() if ep.task == old],
                            ae).images
                        for old in store.tasks()}
                    retrain_shared_autoencoder(
                        ae, images, old_recons, classifier, ae_config,
                        alpha_counters=decay.alpha_r, seed=seed * 13 + t)
                    # stored latents are stale for the retrained decoder:
                    # refresh them from the pre-retrain reconstructions
                    for old, recons in old_recons.items():
                        reencode_episodes(store, ae, old, recons)
                    # the retrained decoder also drifts the pseudo stream
                    for old in store.tasks():
                        decay.alpha_p[old] = decay.alpha_p.get(old, 0) + 1

            if config.variant in ("eec", "eecs"):
                ae = registry.for_task(t)
                if store is None:
                    latent_dim = ae.latent_dim
                    store = MemoryStore(latent_dim, capacity=config.budget_k)
                episodes = encode_task(ae, images, task_ds.labels, t)
                enforce_budget(store, episodes, config.budget_k)
                key = 0 if config.variant == "eecs" else t
                store.ae_blobs[key] = _ae_checkpoint(ae)
            elif config.variant == "exemplar-baseline":
                exemplars.append((images, labels))

            eval_mask = np.isin(test.labels, seen)
            per_class, overall = evaluate_single_headed(
                classifier, test_images[eval_mask], test_labels[eval_mask],
                seen)
            reports.append(IncrementReport(
                increment=t, overall_acc=overall, per_class_acc=per_class,
                memory_units=memory_units(store) if store is not None else 0,
                loss_trace=trace, wall_s=time.perf_counter() - tic))
            if progress is not None:
                progress(reports[-1])
    except Exception as exc:
        for r in reports:
            r.complete = False
        exc.partial_reports = reports  # flagged-incomplete prefix for callers
        raise

    if store is None:
        store = MemoryStore(1, capacity=config.budget_k)
    return ExperimentResult(reports, schedule, store, registry, classifier,
                            decay, complete)
