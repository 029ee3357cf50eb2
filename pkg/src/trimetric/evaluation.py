"""CMC evaluation with single-shot gallery / multi-shot probe splits."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from . import nn
from .data import AugmentConfig, Dataset, center_crop
from .errors import ContractViolation

log = logging.getLogger(__name__)

SUMMARY_RANKS = (1, 5, 10, 15, 20, 30)


@dataclass(frozen=True)
class GalleryProbeSplit:
    gallery: tuple
    probe: tuple
    labels: Mapping[Hashable, Hashable]

    def __post_init__(self):
        if set(self.gallery) & set(self.probe):
            raise ContractViolation("gallery and probe overlap")
        gallery_people = [self.labels[g] for g in self.gallery]
        if len(set(gallery_people)) != len(gallery_people):
            raise ContractViolation("gallery holds more than one image of some person")
        missing = {self.labels[p] for p in self.probe} - set(gallery_people)
        if missing:
            raise ContractViolation(f"probe persons without a gallery image: {sorted(map(str, missing))}")


@dataclass
class CmcCurve:
    """``rates[r - 1]`` is the fraction of probes matched within the top r."""

    rates: np.ndarray

    def __len__(self) -> int:
        return len(self.rates)

    def at(self, rank: int) -> float:
        if rank > len(self.rates):
            # the curve is padded with 1.0 past the gallery size, so it is flat from here on
            return float(self.rates[-1])
        return float(self.rates[rank - 1])

    def summary(self) -> dict:
        return {f"top{r}": self.at(r) for r in SUMMARY_RANKS}

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.rates) >= 0))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "rate"])
            for r, v in enumerate(self.rates, 1):
                w.writerow([r, repr(float(v))])

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


def extract_embeddings(params: nn.NetworkParams, images: Mapping[Hashable, np.ndarray],
                       augment: AugmentConfig | None = None) -> dict:
    """Embed each image; with ``augment`` given, the unperturbed centre crop is used."""
    out = {}
    for key, pixels in images.items():
        if augment is not None:
            pixels = center_crop(pixels, augment)
        out[key] = nn.embed(pixels, params)
    return out


def make_split(dataset: Dataset, rng: np.random.Generator) -> GalleryProbeSplit:
    """One random gallery image per person; every other image becomes a probe."""
    gallery, probe = [], []
    for person, idx in dataset.by_class.items():
        if len(idx) < 2:
            log.warning("person %s has a single image; used as gallery only", person)
        pick = idx[int(rng.integers(len(idx)))]
        gallery.append(pick)
        probe.extend(i for i in idx if i != pick)
    return GalleryProbeSplit(tuple(gallery), tuple(probe), dict(enumerate(dataset.labels)))


def match_ranks(embeddings: Mapping, split: GalleryProbeSplit) -> np.ndarray:
    """1-based rank of the correct gallery image for every probe."""
    try:
        g = np.array([embeddings[i] for i in split.gallery])
        p = np.array([embeddings[i] for i in split.probe])
    except KeyError as exc:
        raise ContractViolation(f"no embedding for image {exc.args[0]}") from None
    if len(split.probe) == 0:
        return np.zeros(0, dtype=int)
    gallery_labels = [split.labels[i] for i in split.gallery]
    truth = np.array([gallery_labels.index(split.labels[i]) for i in split.probe])
    dist = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1))
    # stable sort keeps gallery order among equal distances
    order = np.argsort(dist, axis=1, kind="stable")
    return np.argmax(order == truth[:, None], axis=1) + 1


def cmc(embeddings: Mapping, split: GalleryProbeSplit, max_rank: int = 30) -> CmcCurve:
    ranks = match_ranks(embeddings, split)
    if len(ranks) == 0:
        raise ContractViolation("split has no probe images")
    counts = np.bincount(ranks, minlength=max_rank + 1)[1:max_rank + 1]
    return CmcCurve(np.cumsum(counts) / len(ranks))


def average_trials(params: nn.NetworkParams, dataset: Dataset, trials: int = 10, seed: int = 0,
                   max_rank: int = 30, augment: AugmentConfig | None = None) -> CmcCurve:
    """Mean CMC over ``trials`` independent gallery/probe splits."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    emb = extract_embeddings(params, {i: im.pixels for i, im in enumerate(dataset.images)}, augment)
    seeds = np.random.SeedSequence(seed).spawn(trials)
    curves = [cmc(emb, make_split(dataset, np.random.default_rng(s)), max_rank).rates for s in seeds]
    return CmcCurve(np.mean(curves, axis=0))


def mean_curve(curves: Sequence[CmcCurve]) -> CmcCurve:
    return CmcCurve(np.mean([c.rates for c in curves], axis=0))
