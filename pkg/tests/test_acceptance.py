"""Acceptance criteria A1-A8, each checked against an oracle defined in this file.

Every test prints one ``A<n> PASS|FAIL`` line; the lines are collected again in
the terminal summary under "acceptance criteria".
"""

import time
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from trimetric import nn
from trimetric.config import load_config, train_test
from trimetric.data import Dataset, LabeledImage
from trimetric.evaluation import GalleryProbeSplit, average_trials, cmc
from trimetric.loss import ImageTable, LossConfig, Triplet, distance_diffs, objective, output_gradients_array
from trimetric.trainer import (PropagationCounter, generate_triplets, image_based_gradient, train_batch_mode,
                               triplet_based_gradient)

from conftest import CONFIG_DIR, central_diff, rel_err

DESK = nn.ArchitectureConfig.desk()


def shared_instance(rng, n_images, n_triplets, n_classes=3):
    """Random images and valid triplets drawn from a small pool, so images recur."""
    labels = {i: i % n_classes for i in range(n_images)}
    images = {i: rng.uniform(0.0, 1.0, DESK.input_shape) for i in range(n_images)}
    triplets = []
    while len(triplets) < n_triplets:
        q, p, n = (int(v) for v in rng.integers(n_images, size=3))
        if q != p and labels[q] == labels[p] and labels[q] != labels[n]:
            triplets.append(Triplet(q, p, n))
    return images, labels, triplets


def pipeline_objective(params, images, labels, triplets, loss=LossConfig()):
    table = ImageTable.from_triplets(triplets, labels)
    table.embeddings = np.array([nn.network_forward(images[i], params)[0] for i in table.ids])
    return objective(table, triplets, loss)


# -- A1 ----------------------------------------------------------------------

def test_a1_gradient_equivalence(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, shared = 0.0, []
    for _ in range(5):
        params = nn.init_params(DESK, int(rng.integers(2**31)), conv_std=0.3, fc_std=0.3)
        images, labels, triplets = shared_instance(rng, 8, 20)
        shared.append(3 * len(triplets) - len({i for t in triplets for i in t}))
        g_tri = triplet_based_gradient(params, images, triplets, labels=labels).gradient.flat()
        g_img = image_based_gradient(params, images, triplets, labels=labels).gradient.flat()
        assert np.linalg.norm(g_tri) > 0
        worst = max(worst, np.linalg.norm(g_tri - g_img) / np.linalg.norm(g_tri))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 10 and min(shared) > 0
    acceptance("A1", ok, f"max rel Frobenius diff {worst:.2e} (tol 1e-10), {elapsed:.2f}s (limit 10s)")
    assert ok


# -- A2 ----------------------------------------------------------------------

def _layer_fd_errors(rng):
    h = 1e-6
    errs = {}

    x = rng.normal(size=(3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride in (1, 2):
        g = rng.normal(size=nn.conv2d_forward(x, w, b, stride).shape)
        f = lambda: float(np.sum(g * nn.conv2d_forward(x, w, b, stride)))
        wg, bg, xg = nn.conv2d_backward(x, w, stride, g)
        errs[f"conv2d(stride={stride})"] = max(rel_err(wg, central_diff(f, w, h)),
                                               rel_err(bg, central_diff(f, b, h)),
                                               rel_err(xg, central_diff(f, x, h)))

    x = rng.normal(size=(3, 6, 5))
    out, idx = nn.maxpool_forward(x, 2, 1)
    g = rng.normal(size=out.shape)
    f = lambda: float(np.sum(g * nn.maxpool_forward(x, 2, 1)[0]))
    errs["maxpool"] = rel_err(nn.maxpool_backward(idx, g), central_diff(f, x, h))

    x = rng.normal(size=(4, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep the kink out of reach of the step
    g = rng.normal(size=x.shape)
    f = lambda: float(np.sum(g * nn.relu(x)))
    errs["relu"] = rel_err(nn.relu_backward(x, g), central_diff(f, x, h))

    x = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(5, 24))
    b = rng.normal(size=5)
    g = rng.normal(size=5)
    f = lambda: float(np.sum(g * nn.fc_forward(x, w, b)))
    wg, bg, xg = nn.fc_backward(x, w, g)
    errs["fc"] = max(rel_err(wg, central_diff(f, w, h)), rel_err(bg, central_diff(f, b, h)),
                     rel_err(xg, central_diff(f, x, h)))

    x = rng.normal(size=9)
    g = rng.normal(size=9)
    f = lambda: float(np.sum(g * nn.l2_normalize(x)))
    errs["l2_normalize"] = rel_err(nn.l2_normalize_backward(x, g), central_diff(f, x, h))
    return errs


def test_a2_finite_differences(acceptance):
    rng = np.random.default_rng(77)
    start = time.perf_counter()
    layer = _layer_fd_errors(rng)

    params = nn.init_params(DESK, 5, conv_std=0.3, fc_std=0.3)
    images, labels, triplets = shared_instance(rng, 6, 8)
    analytic = image_based_gradient(params, images, triplets, labels=labels).gradient
    f = lambda: pipeline_objective(params, images, labels, triplets)
    whole = {name: rel_err(getattr(analytic, name), central_diff(f, arr, 1e-5)) for name, arr in params.items()}
    elapsed = time.perf_counter() - start

    ok = max(layer.values()) < 1e-5 and max(whole.values()) < 1e-4 and elapsed < 60
    acceptance("A2", ok, f"layer max {max(layer.values()):.2e} (tol 1e-5), pipeline max "
                         f"{max(whole.values()):.2e} (tol 1e-4), {elapsed:.1f}s (limit 60s)")
    assert ok, (layer, whole)


# -- A3 ----------------------------------------------------------------------

def test_a3_propagation_counts(acceptance):
    rng = np.random.default_rng(3)
    small = nn.ArchitectureConfig.desk()
    ds = Dataset([LabeledImage(rng.uniform(size=small.input_shape), c) for c in range(40) for _ in range(8)])
    triplets = generate_triplets(ds, list(range(40)), 80, rng)
    images = {i: im.pixels for i, im in enumerate(ds.images)}
    distinct = len({i for t in triplets for i in t})
    params = nn.init_params(small, 0, 0.3, 0.3)
    ci, ct = PropagationCounter(), PropagationCounter()
    image_based_gradient(params, images, triplets, counter=ci)
    triplet_based_gradient(params, images, triplets, counter=ct)
    ok = distinct == 320 and ci.forward_count == 320 and ct.forward_count == 9600 \
        and ci.backward_count == 320 and ct.backward_count == 9600
    acceptance("A3", ok, f"{len(triplets)} triplets over {distinct} images: forward image-based "
                         f"{ci.forward_count}, triplet-based {ct.forward_count} (expected 320 vs 9600)")
    assert ok


# -- A4 ----------------------------------------------------------------------

def test_a4_unit_norm(acceptance):
    rng = np.random.default_rng(4)
    params = nn.init_params(DESK, 4)  # default initialization
    norms = np.array([np.linalg.norm(nn.network_forward(rng.uniform(size=DESK.input_shape), params)[0])
                      for _ in range(1000)])
    worst = float(np.max(np.abs(norms - 1.0)))
    ok = worst <= 1e-9
    acceptance("A4", ok, f"1000 images, max | ||F(I)|| - 1 | = {worst:.2e} (tol 1e-9)")
    assert ok


# -- A5 ----------------------------------------------------------------------

@pytest.mark.slow
def test_a5_end_to_end(acceptance):
    cfg = load_config(CONFIG_DIR / "desk_synthetic.json")
    start = time.perf_counter()
    train, test = train_test(cfg)
    params = nn.init_params(cfg.architecture, cfg.train.seed, cfg.train.init_conv_std, cfg.train.init_fc_std)
    result = train_batch_mode(train, params, cfg.train, cfg.augment, threads=1)
    curve = average_trials(result.params, test, trials=2, seed=cfg.eval.seed, max_rank=cfg.eval.max_rank)
    elapsed = time.perf_counter() - start
    last = result.reports[-1]
    ok = (result.converged and last.violations < 10 and len(result.reports) <= 500
          and len(test.classes) == 4 and curve.at(1) >= 0.90 and elapsed < 300)
    acceptance("A5", ok, f"converged={result.converged} after {len(result.reports)} iterations "
                         f"(violations {last.violations} < 10), rank-1 {curve.at(1):.3f} (need >= 0.90), "
                         f"{elapsed:.1f}s (limit 300s)")
    assert ok


# -- A6 ----------------------------------------------------------------------

def brute_force_cmc(emb, gallery, probe, labels, max_rank):
    """Full sort of the gallery for every probe; ties keep gallery order."""
    hits = np.zeros(max_rank)
    for p in probe:
        order = sorted(range(len(gallery)),
                       key=lambda k: (np.sqrt(sum((a - b) ** 2 for a, b in zip(emb[p], emb[gallery[k]]))), k))
        rank = 1 + next(r for r, k in enumerate(order) if labels[gallery[k]] == labels[p])
        hits[rank - 1:] += 1
    return hits / len(probe)


def test_a6_cmc_oracle(acceptance):
    rng = np.random.default_rng(6)
    mismatches = 0
    for inst in range(50):
        n_gallery = int(rng.integers(2, 21))
        n_probe = int(rng.integers(1, 61))
        dim = int(rng.integers(1, 6))
        labels = {g: g for g in range(n_gallery)}
        labels.update({n_gallery + k: int(rng.integers(n_gallery)) for k in range(n_probe)})
        # every other instance sits on a coarse grid, so distance ties occur
        draw = (lambda: rng.integers(-2, 3, size=dim) * 0.25) if inst % 2 else (lambda: rng.normal(size=dim))
        emb = {i: draw() for i in labels}
        gallery = tuple(int(g) for g in rng.permutation(n_gallery))
        probe = tuple(range(n_gallery, n_gallery + n_probe))
        got = cmc(emb, GalleryProbeSplit(gallery, probe, labels), 30).rates
        want = brute_force_cmc(emb, gallery, probe, labels, 30)
        mismatches += not np.array_equal(got, want)
    ok = mismatches == 0
    acceptance("A6", ok, f"{50 - mismatches}/50 instances identical to the full-sort oracle")
    assert ok


# -- A7 ----------------------------------------------------------------------

def test_a7_triplet_generation(acceptance):
    rng = np.random.default_rng(7)
    per_class = 8
    ds = Dataset([LabeledImage(np.zeros((3, 1, 1)), c) for c in range(25) for _ in range(per_class)])
    selected = sorted(int(c) for c in rng.choice(25, size=10, replace=False))
    triplets = generate_triplets(ds, selected, 1000, rng)
    lab = ds.labels

    valid = all(q != p and lab[q] == lab[p] and lab[n] != lab[q] and lab[q] in selected and lab[n] in selected
                for q, p, n in triplets)
    quota = Counter(lab[q] for q, _, _ in triplets)
    quota_ok = len(triplets) == 10_000 and set(quota) == set(selected) and set(quota.values()) == {1000}

    # matched: uniform over the other images of the query's identity, given the query
    pair_counts = Counter((q, p) for q, p, _ in triplets)
    query_counts = Counter(q for q, _, _ in triplets)
    obs, exp = [], []
    for q, nq in query_counts.items():
        for p in ds.by_class[lab[q]]:
            if p != q:
                obs.append(pair_counts[(q, p)])
                exp.append(nq / (per_class - 1))
    p_matched = stats.chisquare(obs, exp, ddof=len(query_counts) - 1).pvalue

    # mismatched: uniform over the images of the other selected identities, given the query identity
    neg_counts = Counter((lab[q], n) for q, _, n in triplets)
    pool = [i for c in selected for i in ds.by_class[c]]
    obs, exp = [], []
    for c in selected:
        cands = [i for i in pool if lab[i] != c]
        for n in cands:
            obs.append(neg_counts[(c, n)])
            exp.append(1000 / len(cands))
    p_mismatched = stats.chisquare(obs, exp, ddof=len(selected) - 1).pvalue

    ok = valid and quota_ok and p_matched > 0.01 and p_mismatched > 0.01
    acceptance("A7", ok, f"10000 triplets valid={valid}, quota={quota_ok}, chi2 p matched {p_matched:.3f}, "
                         f"mismatched {p_mismatched:.3f} (need > 0.01)")
    assert ok


# -- A8 ----------------------------------------------------------------------

def test_a8_hinge_boundary(acceptance):
    eps = 1e-6
    margin = LossConfig().margin
    # query at the origin, matched on the x axis, mismatched on the y axis: d = x^2 - y^2
    cases = {"C-eps": (0.0, np.sqrt(1.0 + eps)), "C": (0.0, 1.0), "C+eps": (np.sqrt(eps), 1.0)}
    table = ImageTable(list(range(9)), [None] * 9)
    table.embeddings = np.array([v for x, y in cases.values() for v in ([0.0, 0.0], [x, 0.0], [0.0, y])])
    triplets = [Triplet(3 * k, 3 * k + 1, 3 * k + 2) for k in range(3)]
    d = distance_diffs(table, triplets)
    placed = d[0] < margin and d[1] == margin and d[2] > margin and np.allclose(d, [margin - eps, margin,
                                                                                     margin + eps], atol=1e-15)
    norms = [float(np.abs(output_gradients_array(table, [t])).sum()) for t in triplets]
    loss_ok = norms[0] == 0.0 and norms[1] == 0.0 and norms[2] > 0.0

    # the same boundary through the full network: shift the margin around a measured diff
    rng = np.random.default_rng(8)
    params = nn.init_params(DESK, 8, 0.3, 0.3)
    images, labels, pool = shared_instance(rng, 6, 40)
    tab = ImageTable.from_triplets(pool, labels)
    tab.embeddings = np.array([nn.network_forward(images[i], params)[0] for i in tab.ids])
    pd = distance_diffs(tab, pool)
    t = pool[int(np.argmin(pd))]
    dt = float(pd[int(np.argmin(pd))])
    assert dt < -2 * eps
    net = []
    for m in (dt + eps, dt, dt - eps):  # the triplet then sits at C-eps, C, C+eps
        for fn in (triplet_based_gradient, image_based_gradient):
            net.append(float(np.abs(fn(params, images, [t], LossConfig(m), labels=labels).gradient.flat()).sum()))
    net_ok = net[:4] == [0.0] * 4 and net[4] > 0 and net[5] > 0

    ok = placed and loss_ok and net_ok
    acceptance("A8", ok, f"diffs {d[0] - margin:+.1e}/{d[1] - margin:+.1e}/{d[2] - margin:+.1e} from C -> "
                         f"gradient |.|_1 {norms[0]:.1e}/{norms[1]:.1e}/{norms[2]:.1e}; "
                         f"network-level zero/zero/nonzero={net_ok}")
    assert ok
