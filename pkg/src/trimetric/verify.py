"""Self-checks run by ``trimetric verify``.

Each check returns a :class:`Check` with the largest error it observed.
Layer functions are looked up on the :mod:`trimetric.nn` module at call
time so a patched (broken) backward is caught and named.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .loss import ImageTable, LossConfig, Triplet, objective
from .trainer import PropagationCounter, image_based_gradient, triplet_based_gradient

LAYER_TOL = 1e-5
NETWORK_TOL = 1e-4
EQUIV_TOL = 1e-10


@dataclass
class Check:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def _layer_cases(rng: np.random.Generator):
    """Yield (layer name, [(analytic, numeric), ...]) for each layer."""
    h = 1e-6

    x = rng.normal(size=(2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(3, 2, 2))
    loss = lambda: float(np.sum(nn.conv2d_forward(x, w, b, 2) * r))
    wg, bg, xg = nn.conv2d_backward(x, w, 2, r)
    yield "conv2d", [(wg, numeric_grad(loss, w, h)), (bg, numeric_grad(loss, b, h)),
                     (xg, numeric_grad(loss, x, h))]

    x = rng.normal(size=(2, 5, 4))
    r = rng.normal(size=(2, 4, 3))
    out, idx = nn.maxpool_forward(x, 2, 1)
    loss = lambda: float(np.sum(nn.maxpool_forward(x, 2, 1)[0] * r))
    yield "maxpool", [(nn.maxpool_backward(idx, r), numeric_grad(loss, x, h))]

    x = rng.uniform(0.1, 1.0, size=(2, 3, 3)) * rng.choice([-1.0, 1.0], size=(2, 3, 3))
    r = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(nn.relu(x) * r))
    yield "relu", [(nn.relu_backward(x, r), numeric_grad(loss, x, h))]

    x = rng.normal(size=6)
    w = rng.normal(size=(4, 6))
    b = rng.normal(size=4)
    r = rng.normal(size=4)
    loss = lambda: float(nn.fc_forward(x, w, b) @ r)
    wg, bg, xg = nn.fc_backward(x, w, r)
    yield "fc", [(wg, numeric_grad(loss, w, h)), (bg, numeric_grad(loss, b, h)),
                 (xg, numeric_grad(loss, x, h))]

    x = rng.normal(size=5)
    r = rng.normal(size=5)
    loss = lambda: float(nn.l2_normalize(x) @ r)
    yield "l2_normalize", [(nn.l2_normalize_backward(x, r), numeric_grad(loss, x, h))]


def check_layers(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for name, pairs in _layer_cases(rng):
        err = max(rel_error(a, n) for a, n in pairs)
        out.append(Check(f"layer:{name}", err < LAYER_TOL, err, LAYER_TOL))
    return out


def random_instance(rng: np.random.Generator, cfg: nn.ArchitectureConfig, n_images: int,
                    n_triplets: int, n_classes: int = 3):
    """Random images with labels and valid triplets that share images."""
    labels = {i: i % n_classes for i in range(n_images)}
    images = {i: rng.uniform(0.0, 1.0, cfg.input_shape) for i in range(n_images)}
    triplets = []
    while len(triplets) < n_triplets:
        q, p, n = (int(v) for v in rng.integers(n_images, size=3))
        if q != p and labels[q] == labels[p] and labels[q] != labels[n]:
            triplets.append(Triplet(q, p, n))
    return images, labels, triplets


def pipeline_objective(params, images, labels, triplets, loss=LossConfig()) -> float:
    table = ImageTable.from_triplets(triplets, labels)
    table.embeddings = np.array([nn.network_forward(images[i], params)[0] for i in table.ids])
    return objective(table, triplets, loss)


def check_network(seed: int = 0) -> Check:
    """Image-based gradient vs central differences of objective(network(.))."""
    rng = np.random.default_rng(seed)
    cfg = nn.ArchitectureConfig.desk()
    # larger-than-default init keeps the fc output norm O(1), away from the
    # normalization's 1/||x|| curvature that would swamp the difference quotient
    params = nn.init_params(cfg, seed, conv_std=0.3, fc_std=0.3)
    images, labels, triplets = random_instance(rng, cfg, 6, 8)
    batch = image_based_gradient(params, images, triplets, labels=labels)
    f = lambda: pipeline_objective(params, images, labels, triplets)
    worst, detail = 0.0, []
    for name, arr in params.items():
        err = rel_error(getattr(batch.gradient, name), numeric_grad(f, arr, 1e-5))
        detail.append(f"{name}={err:.2e}")
        worst = max(worst, err)
    return Check("network:finite_difference", worst < NETWORK_TOL, worst, NETWORK_TOL, ", ".join(detail))


def check_equivalence(instances: int = 5, seed: int = 0) -> Check:
    """Triplet-based and image-based gradients on random shared-image instances."""
    rng = np.random.default_rng(seed)
    cfg = nn.ArchitectureConfig.desk()
    worst = 0.0
    for k in range(instances):
        params = nn.init_params(cfg, int(rng.integers(2**31)), conv_std=0.3, fc_std=0.3)
        images, labels, triplets = random_instance(rng, cfg, 8, 20)
        g_img = image_based_gradient(params, images, triplets, labels=labels).gradient.flat()
        g_tri = triplet_based_gradient(params, images, triplets, labels=labels).gradient.flat()
        worst = max(worst, rel_error(g_img, g_tri))
    return Check("equivalence:triplet_vs_image", worst < EQUIV_TOL, worst, EQUIV_TOL,
                 f"{instances} instances, 8 images / 20 triplets each")


def check_counts(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    cfg = nn.ArchitectureConfig.desk()
    params = nn.init_params(cfg, seed, conv_std=0.3, fc_std=0.3)
    images, labels, triplets = random_instance(rng, cfg, 8, 20)
    m = len({i for t in triplets for i in t})
    ci, ct = PropagationCounter(), PropagationCounter()
    image_based_gradient(params, images, triplets, counter=ci)
    triplet_based_gradient(params, images, triplets, counter=ct)
    ok = (ci.forward_count, ci.backward_count) == (m, m) and \
        (ct.forward_count, ct.backward_count) == (3 * len(triplets),) * 2
    detail = (f"image-based {ci.forward_count}/{ci.backward_count} (m={m}), "
              f"triplet-based {ct.forward_count}/{ct.backward_count} (3n={3 * len(triplets)})")
    return Check("counts:propagation", ok, 0.0, 0.0, detail)


def run_all(seed: int = 0) -> list[Check]:
    checks = check_layers(seed)
    checks.append(check_network(seed))
    checks.append(check_equivalence(5, seed))
    checks.append(check_counts(seed))
    return checks


def format_report(checks: list[Check], elapsed: float | None = None) -> str:
    lines = []
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        line = f"{status}  {c.name:<32} max_error={c.max_error:.3e}  tol={c.tolerance:.0e}"
        if c.detail:
            line += f"  [{c.detail}]"
        lines.append(line)
    if elapsed is not None:
        lines.append(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed in {elapsed:.1f}s")
    return "\n".join(lines)


def timed_run(seed: int = 0) -> tuple[list[Check], float]:
    start = time.perf_counter()
    checks = run_all(seed)
    return checks, time.perf_counter() - start
