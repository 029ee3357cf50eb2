"""Relative-distance triplet objective and its derivative w.r.t. each embedding."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, InvalidShapeError


class Triplet(NamedTuple):
    query: int
    matched: int
    mismatched: int


@dataclass(frozen=True)
class LossConfig:
    margin: float = -1.0

    def __post_init__(self):
        if not self.margin < 0:
            raise ConfigError(f"margin must be negative, got {self.margin}")


def check_triplet(t: Triplet, labels: Mapping[int, Hashable] | Sequence[Hashable]) -> None:
    """Raise ContractViolation unless ``t`` is a well-formed (query, matched, mismatched) unit."""
    q, p, n = t
    if q == p:
        raise ContractViolation(f"{t}: query and matched reference are the same image")
    if labels[q] != labels[p]:
        raise ContractViolation(f"{t}: matched reference has a different identity")
    if labels[q] == labels[n]:
        raise ContractViolation(f"{t}: mismatched reference has the query's identity")


@dataclass
class ImageTable:
    """The distinct images referenced by a triplet set, in sorted id order.

    ``embeddings[k]`` holds the network output for ``ids[k]`` once populated.
    """

    ids: list
    labels: list
    embeddings: np.ndarray | None = None
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {img: k for k, img in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ContractViolation("image table ids must be distinct")

    @classmethod
    def from_triplets(cls, triplets: Iterable[Triplet], labels) -> "ImageTable":
        ids = sorted({i for t in triplets for i in t})
        return cls(ids, [labels[i] for i in ids])

    def __len__(self) -> int:
        return len(self.ids)

    def positions(self, triplets: Sequence[Triplet]) -> np.ndarray:
        """(n, 3) array of table rows for each triplet member."""
        try:
            rows = [[self.index[i] for i in t] for t in triplets]
        except KeyError as exc:
            raise ContractViolation(f"triplet references image {exc.args[0]} missing from the table") from None
        return np.asarray(rows, dtype=np.intp).reshape(-1, 3)

    def _emb(self) -> np.ndarray:
        if self.embeddings is None or len(self.embeddings) != len(self.ids):
            raise ContractViolation("image table embeddings are not populated")
        return self.embeddings


def distance_diff(e1: np.ndarray, e2: np.ndarray, e3: np.ndarray) -> float:
    """||e1 - e2||^2 - ||e1 - e3||^2."""
    e1, e2, e3 = (np.asarray(e, dtype=np.float64) for e in (e1, e2, e3))
    if not (e1.shape == e2.shape == e3.shape):
        raise InvalidShapeError(f"embedding shapes differ: {e1.shape}, {e2.shape}, {e3.shape}")
    a, b = e1 - e2, e1 - e3
    return float(np.dot(a, a) - np.dot(b, b))


def distance_diffs(table: ImageTable, triplets: Sequence[Triplet]) -> np.ndarray:
    """Vector of distance_diff over ``triplets``."""
    emb = table._emb()
    pos = table.positions(triplets)
    e1, e2, e3 = emb[pos[:, 0]], emb[pos[:, 1]], emb[pos[:, 2]]
    a, b = e1 - e2, e1 - e3
    return np.einsum("ij,ij->i", a, a) - np.einsum("ij,ij->i", b, b)


def objective(table: ImageTable, triplets: Sequence[Triplet], cfg: LossConfig = LossConfig()) -> float:
    """Sum over triplets of max{distance_diff, margin}."""
    return float(np.maximum(distance_diffs(table, triplets), cfg.margin).sum())


def output_gradients_array(table: ImageTable, triplets: Sequence[Triplet],
                           cfg: LossConfig = LossConfig()) -> np.ndarray:
    """d objective / d embedding for every table row, as an (m, D) array.

    Only triplets with distance_diff strictly above the margin contribute.
    Contributions are added in triplet order.
    """
    emb = table._emb()
    grad = np.zeros_like(emb)
    if len(triplets) == 0:
        return grad
    pos = table.positions(triplets)
    e1, e2, e3 = emb[pos[:, 0]], emb[pos[:, 1]], emb[pos[:, 2]]
    a, b = e1 - e2, e1 - e3
    diffs = np.einsum("ij,ij->i", a, a) - np.einsum("ij,ij->i", b, b)
    active = diffs > cfg.margin
    if not active.any():
        return grad
    pos = pos[active]
    e1, e2, e3 = e1[active], e2[active], e3[active]
    # rows of the three blocks interleave per triplet so accumulation follows triplet order
    rows = pos.reshape(-1)
    contrib = np.stack([2.0 * (e3 - e2), -2.0 * (e1 - e2), 2.0 * (e1 - e3)], axis=1)
    np.add.at(grad, rows, contrib.reshape(-1, emb.shape[1]))
    return grad


def output_gradients(table: ImageTable, triplets: Sequence[Triplet],
                     cfg: LossConfig = LossConfig()) -> dict:
    """Map image id -> d objective / d F_W(image), in table order."""
    grad = output_gradients_array(table, triplets, cfg)
    return {img: grad[k] for k, img in enumerate(table.ids)}


def count_violations(table: ImageTable, triplets: Sequence[Triplet]) -> int:
    """Triplets whose matched pair is strictly farther apart than the mismatched pair."""
    if len(triplets) == 0:
        return 0
    return int(np.count_nonzero(distance_diffs(table, triplets) > 0))


# ---------------------------------------------------------------------------
# triplet list files
# ---------------------------------------------------------------------------

def write_triplets(path, triplets: Iterable[Triplet]) -> None:
    lines = ["# query matched mismatched"]
    lines += [f"{q} {p} {n}" for q, p, n in triplets]
    Path(path).write_text("\n".join(lines) + "\n")


def read_triplets(path) -> list[Triplet]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 image ids, got {len(parts)}")
        out.append(Triplet(*(int(p) for p in parts)))
    return out
