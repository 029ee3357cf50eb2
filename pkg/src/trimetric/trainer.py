"""Gradient-descent drivers for the triplet objective.

Two ways of computing the same parameter gradient are provided:

* ``triplet_based_gradient`` runs a forward and backward pass for every
  member of every triplet (3n passes each).
* ``image_based_gradient`` runs one forward pass per distinct image, forms
  d objective / d embedding analytically, then one backward pass per image
  (m passes each).

Gradients are *summed* over triplets, not averaged, so the learning rate
has to be scaled to the batch size by the caller.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from . import nn
from .data import AugmentConfig, Dataset, augment_crop
from .errors import ConfigError, DegenerateInputError, NumericError
from .loss import ImageTable, LossConfig, Triplet, count_violations, objective, output_gradients_array

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_iterations: int = 5000
    base_lr: float = 0.01
    lr_decay: float = 1.0
    classes_per_iteration: int = 40
    triplets_per_person: int = 80
    violation_threshold: int = 10
    seed: int = 0
    margin: float = -1.0
    init_conv_std: float = 0.01
    init_fc_std: float = 0.001

    def __post_init__(self):
        if self.classes_per_iteration < 2:
            raise ConfigError("classes_per_iteration must be >= 2")
        if self.triplets_per_person < 1:
            raise ConfigError("triplets_per_person must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not self.lr_decay > 0:
            raise ConfigError("lr_decay must be positive")
        if self.init_conv_std < 0 or self.init_fc_std < 0:
            raise ConfigError("init stds must be >= 0")
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        LossConfig(self.margin)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.margin)

    def learning_rate(self, t: int) -> float:
        """Step size for zero-based iteration ``t``: base_lr * lr_decay**t."""
        return self.base_lr * self.lr_decay ** t


@dataclass
class PropagationCounter:
    forward_count: int = 0
    backward_count: int = 0

    def reset(self) -> None:
        self.forward_count = 0
        self.backward_count = 0


@dataclass
class IterationReport:
    iteration: int
    objective: float
    violations: int
    distinct_images: int
    triplets: int
    forward_count: int
    backward_count: int
    learning_rate: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: nn.NetworkParams
    reports: list[IterationReport] = field(default_factory=list)
    converged: bool = False
    last_gradient: nn.NetworkParams | None = None


@dataclass
class BatchGradient:
    gradient: nn.NetworkParams
    table: ImageTable
    objective: float
    violations: int


def sgd_update(params: nn.NetworkParams, grad: nn.NetworkParams, lr: float) -> nn.NetworkParams:
    """Return ``params - lr * grad`` as a new parameter set."""
    if not grad.is_finite():
        raise NumericError("non-finite gradient; aborting update")
    out = params.copy()
    if lr != 0.0:
        out.add_(grad, -lr)
    return out


def _forward(image_id, pixels, params):
    try:
        return nn.network_forward(pixels, params)
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"image {image_id}: {exc}") from exc


def _map(fn, items, executor: Executor | None):
    # executor.map preserves input order, so reductions stay deterministic
    if executor is None:
        return [fn(*it) for it in items]
    return list(executor.map(lambda it: fn(*it), items))


def triplet_based_gradient(params: nn.NetworkParams, images: Mapping[Hashable, np.ndarray],
                           triplets: Sequence[Triplet], loss: LossConfig = LossConfig(),
                           counter: PropagationCounter | None = None,
                           labels: Mapping | None = None) -> BatchGradient:
    """Accumulate d objective / dW triplet by triplet, with three passes per triplet."""
    counter = counter if counter is not None else PropagationCounter()
    grad = params.zeros_like()
    seen: dict = {}
    for t in triplets:
        caches = []
        for img in t:
            emb, cache = _forward(img, images[img], params)
            counter.forward_count += 1
            caches.append(cache)
            seen.setdefault(img, emb)
        f1, f2, f3 = (c.embedding for c in caches)
        a, b = f1 - f2, f1 - f3
        d = float(np.dot(a, a) - np.dot(b, b))
        # dd/dW = 2(F1-F2)'(dF1-dF2) - 2(F1-F3)'(dF1-dF3), contracted per member
        parts = [nn.network_backward(c, g, params)
                 for c, g in zip(caches, (2.0 * a - 2.0 * b, -2.0 * a, 2.0 * b))]
        counter.backward_count += 3
        if d > loss.margin:
            for p in parts:
                grad.add_(p)

    ids = sorted(seen)
    table = ImageTable(ids, [labels[i] for i in ids] if labels is not None else [None] * len(ids))
    table.embeddings = np.array([seen[i] for i in ids]).reshape(len(ids), -1)
    return BatchGradient(grad, table, objective(table, triplets, loss), count_violations(table, triplets))


def image_based_gradient(params: nn.NetworkParams, images: Mapping[Hashable, np.ndarray],
                         triplets: Sequence[Triplet], loss: LossConfig = LossConfig(),
                         counter: PropagationCounter | None = None,
                         labels: Mapping | None = None,
                         executor: Executor | None = None) -> BatchGradient:
    """One forward and one backward pass per distinct image."""
    counter = counter if counter is not None else PropagationCounter()
    ids = sorted({i for t in triplets for i in t})
    table = ImageTable(ids, [labels[i] for i in ids] if labels is not None else [None] * len(ids))

    outputs = _map(_forward, [(i, images[i], params) for i in ids], executor)
    counter.forward_count += len(ids)
    table.embeddings = np.array([e for e, _ in outputs]).reshape(len(ids), -1)

    out_grads = output_gradients_array(table, triplets, loss)
    per_image = _map(nn.network_backward, [(c, g, params) for (_, c), g in zip(outputs, out_grads)], executor)
    counter.backward_count += len(ids)

    grad = params.zeros_like()
    for g in per_image:
        grad.add_(g)
    return BatchGradient(grad, table, objective(table, triplets, loss), count_violations(table, triplets))


def _train_fixed(gradient_fn, triplets, images, params, cfg: TrainConfig, labels, **kw) -> TrainResult:
    result = TrainResult(params)
    counter = PropagationCounter()
    for t in range(cfg.max_iterations):
        start = time.perf_counter()
        counter.reset()
        batch = gradient_fn(result.params, images, triplets, cfg.loss, counter, labels=labels, **kw)
        lr = cfg.learning_rate(t)
        result.params = sgd_update(result.params, batch.gradient, lr)
        result.last_gradient = batch.gradient
        result.reports.append(IterationReport(
            t, batch.objective, batch.violations, len(batch.table), len(triplets),
            counter.forward_count, counter.backward_count, lr, time.perf_counter() - start))
    return result


def train_triplet_based(triplets: Sequence[Triplet], images: Mapping, params: nn.NetworkParams,
                        cfg: TrainConfig, labels: Mapping | None = None) -> TrainResult:
    """Plain gradient descent on a fixed triplet set, three passes per triplet."""
    return _train_fixed(triplet_based_gradient, triplets, images, params, cfg, labels)


def train_image_based(triplets: Sequence[Triplet], images: Mapping, params: nn.NetworkParams,
                      cfg: TrainConfig, labels: Mapping | None = None,
                      executor: Executor | None = None) -> TrainResult:
    """Plain gradient descent on a fixed triplet set, one pass per distinct image."""
    return _train_fixed(image_based_gradient, triplets, images, params, cfg, labels, executor=executor)


# ---------------------------------------------------------------------------
# batch mode
# ---------------------------------------------------------------------------

def eligible_classes(dataset: Dataset) -> list:
    return [c for c, idx in dataset.by_class.items() if len(idx) >= 2]


def generate_triplets(dataset: Dataset, selected_classes: Sequence[Hashable], per_person: int,
                      rng: np.random.Generator) -> list[Triplet]:
    """Build ``per_person`` triplets for each selected identity.

    Queries cycle through the identity's images; the matched reference is
    drawn uniformly from the other images of that identity and the
    mismatched reference uniformly from all images of the other selected
    identities. Identities with fewer than two images are skipped.
    """
    usable = []
    for c in selected_classes:
        if len(dataset.by_class[c]) < 2:
            log.warning("identity %s has fewer than 2 images; skipped for triplet generation", c)
        else:
            usable.append(c)
    if len(usable) < 2:
        raise ConfigError("triplet generation needs at least two identities with >= 2 images")

    triplets: list[Triplet] = []
    for c in usable:
        own = np.asarray(dataset.by_class[c])
        others = np.concatenate([dataset.by_class[o] for o in usable if o != c])
        slot = np.arange(per_person) % len(own)
        r = rng.integers(0, len(own) - 1, size=per_person)
        matched = np.where(r >= slot, r + 1, r)
        mismatched = others[rng.integers(0, len(others), size=per_person)]
        triplets.extend(Triplet(int(own[q]), int(own[p]), int(n))
                        for q, p, n in zip(slot, matched, mismatched))
    return triplets


def iteration_rng(seed: int, t: int) -> np.random.Generator:
    # keyed on (seed, iteration) so a resumed run draws the same batches
    return np.random.default_rng([seed, t])


def train_batch_mode(dataset: Dataset, params: nn.NetworkParams, cfg: TrainConfig,
                     augment: AugmentConfig | None = None,
                     on_iteration: Callable[[IterationReport], None] | None = None,
                     start_iteration: int = 0, threads: int = 1) -> TrainResult:
    """Sample identities, generate triplets, take one image-based step; repeat.

    Stops once the current batch has fewer than ``cfg.violation_threshold``
    violated triplets (checked before the update) or after
    ``cfg.max_iterations`` iterations.
    """
    classes = eligible_classes(dataset)
    if len(classes) < 2:
        raise ConfigError(f"dataset has {len(classes)} identities with >= 2 images; need at least 2")
    k = min(cfg.classes_per_iteration, len(classes))
    if k < cfg.classes_per_iteration:
        log.warning("only %d usable identities; sampling %d per iteration instead of %d",
                    len(classes), k, cfg.classes_per_iteration)
    labels = dataset.labels
    result = TrainResult(params)
    counter = PropagationCounter()
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for t in range(start_iteration, cfg.max_iterations):
            start = time.perf_counter()
            counter.reset()
            rng = iteration_rng(cfg.seed, t)
            chosen = rng.choice(len(classes), size=k, replace=False)
            triplets = generate_triplets(dataset, [classes[i] for i in chosen], cfg.triplets_per_person, rng)
            ids = sorted({i for tr in triplets for i in tr})
            if augment is None:
                images = {i: dataset.images[i].pixels for i in ids}
            else:
                images = {i: augment_crop(dataset.images[i].pixels, augment, rng) for i in ids}

            batch = image_based_gradient(result.params, images, triplets, cfg.loss, counter,
                                         labels=labels, executor=executor)
            lr = cfg.learning_rate(t)
            report = IterationReport(t, batch.objective, batch.violations, len(ids), len(triplets),
                                     counter.forward_count, counter.backward_count, lr,
                                     time.perf_counter() - start)
            result.reports.append(report)
            result.last_gradient = batch.gradient
            if on_iteration is not None:
                on_iteration(report)
            if batch.violations < cfg.violation_threshold:
                result.converged = True
                break
            result.params = sgd_update(result.params, batch.gradient, lr)
    finally:
        if executor is not None:
            executor.shutdown()
    return result
