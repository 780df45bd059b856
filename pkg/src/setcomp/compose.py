"""Inference-time set algebra: subset embedding tables built by folding the
union head over singleton embeddings, nearest-subset decoding, and
containment queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .labelsets import LabelSet, canonical_elements, enumerate_label_sets
from .nets import encode, pair_fn

PairFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SubsetTable:
    """Embeddings for every nonempty label set up to the size cap, in canonical order."""

    sets: list[LabelSet]
    vectors: np.ndarray  # (n_sets, m), row i embeds sets[i]
    k: int
    cap: int

    def __post_init__(self):
        if len(self.sets) != self.vectors.shape[0]:
            raise ValueError("one vector per label set required")
        self._index = {s.mask: i for i, s in enumerate(self.sets)}

    def __len__(self) -> int:
        return len(self.sets)

    def vector_for(self, t: LabelSet) -> np.ndarray:
        return self.vectors[self._index[t.mask]]

    def index_of(self, t: LabelSet) -> int:
        return self._index[t.mask]

    @classmethod
    def from_entries(cls, entries: dict[LabelSet, np.ndarray], k: int, cap: int) -> "SubsetTable":
        """Build from an unordered mapping; rows are re-sorted canonically, so the
        construction order of ``entries`` never affects decoding."""
        sets = enumerate_label_sets(k, cap)
        missing = [s for s in sets if s not in entries]
        if missing:
            raise ValueError(f"missing table entries, first: {missing[0]}")
        vectors = np.stack([np.asarray(entries[s], dtype=np.float64) for s in sets])
        return cls(sets, vectors, k, cap)


def build_subset_table(
    singletons: Sequence[np.ndarray],
    g: PairFn,
    cap: int,
    order_average: int = 1,
    rng: np.random.Generator | None = None,
) -> SubsetTable:
    """Fold ``g`` over the canonical element order to embed every subset.

    Singleton entries are the inputs unchanged; each larger set is one
    ``g`` call on its size-(l-1) prefix entry and the last element's
    singleton, so ``g`` runs exactly once per non-singleton entry.

    ``order_average > 1`` additionally averages the fold over that many
    random element orders and renormalizes (disabled by default; canonical
    order alone reproduces the reference behavior).
    """
    singletons = [np.asarray(v, dtype=np.float64) for v in singletons]
    k = len(singletons)
    if not 1 <= cap <= k:
        raise ValueError(f"cap must be in 1..k, got {cap}")
    if order_average < 1:
        raise ValueError("order_average must be >= 1")
    if order_average > 1 and rng is None:
        rng = np.random.default_rng(0)

    sets = enumerate_label_sets(k, cap)
    entries: dict[int, np.ndarray] = {1 << i: singletons[i] for i in range(k)}
    for s in sets:
        if len(s) == 1:
            continue
        elems = canonical_elements(s)
        prefix = s.mask ^ (1 << elems[-1])
        vec = np.asarray(g(entries[prefix], singletons[elems[-1]]), dtype=np.float64)
        if order_average > 1:
            folds = [vec]
            for _ in range(order_average - 1):
                order = rng.permutation(elems)
                acc = singletons[order[0]]
                for e in order[1:]:
                    acc = np.asarray(g(acc, singletons[e]), dtype=np.float64)
                folds.append(acc)
            vec = np.mean(folds, axis=0)
            vec = vec / max(np.linalg.norm(vec), 1e-12)
        entries[s.mask] = vec
    vectors = np.stack([entries[s.mask] for s in sets])
    return SubsetTable(sets, vectors, k, cap)


def fold_table_tensor(ref_emb: torch.Tensor, g_head, cap: int) -> tuple[list[LabelSet], torch.Tensor]:
    """Differentiable table build used inside training loops.

    Same recurrence as ``build_subset_table`` but batched per subset size so
    BatchNorm heads see a whole level at once; gradients flow to both the
    singleton embeddings and the head parameters.
    """
    k = ref_emb.shape[0]
    sets = enumerate_label_sets(k, cap)
    index = {s.mask: i for i, s in enumerate(sets)}
    rows: list[torch.Tensor] = [ref_emb[i] for i in range(k)]
    for size in range(2, cap + 1):
        level = [s for s in sets if len(s) == size]
        prefix_rows = torch.stack([rows[index[s.mask ^ (1 << canonical_elements(s)[-1])]] for s in level])
        last_rows = torch.stack([ref_emb[canonical_elements(s)[-1]] for s in level])
        out = g_head(prefix_rows, last_rows)
        rows.extend(out[i] for i in range(len(level)))
    return sets, torch.stack(rows)


def decode_nearest_subset(query: np.ndarray, table: SubsetTable, topk: int = 1) -> list[tuple[LabelSet, float]]:
    """Exhaustive scan of the table by ascending squared Euclidean distance.

    Ties break toward the canonically smaller label set; result length is
    min(topk, table size).
    """
    if len(table) == 0:
        raise RuntimeError("cannot decode against an empty subset table")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    diffs = table.vectors - query[None, :]
    d2 = np.einsum("ij,ij->i", diffs, diffs)
    order = np.argsort(d2, kind="stable")[: min(topk, len(table))]
    return [(table.sets[i], float(d2[i])) for i in order]


def infer_label_set(
    encoder,
    g_head,
    reference_images: Sequence[np.ndarray],
    query_image: np.ndarray,
    cap: int,
    topk: int = 1,
) -> list[tuple[LabelSet, float]]:
    """One-shot inference: embed the references, fold the union head into a
    full subset table, embed the query, and rank subsets by distance."""
    refs = encode(encoder, np.stack([np.asarray(r, dtype=np.float32) for r in reference_images]))
    table = build_subset_table(list(refs), pair_fn(g_head), cap)
    q = encode(encoder, query_image)
    return decode_nearest_subset(q, table, topk)


def query_contains(encoder, h_head, image_a, image_b, threshold: float = 0.5) -> tuple[bool, float]:
    """Does image_a contain all classes of image_b?  Score >= threshold decides yes."""
    emb = encode(encoder, np.stack([np.asarray(image_a, np.float32), np.asarray(image_b, np.float32)]))
    score = float(pair_fn(h_head)(emb[0], emb[1]))
    return score >= threshold, score
