"""Exact set algebra over episode-local class universes.

A label set is a bitmask over the ``k`` classes active in an episode
(bit ``i`` set means episode class ``i`` is present).  The universe is
capped at 16 classes so the full subset lattice stays enumerable.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

MAX_UNIVERSE = 16


@dataclass(frozen=True, order=False)
class LabelSet:
    """Subset of an episode's classes, as a bitmask over ``universe_size`` bits."""

    mask: int
    universe_size: int

    def __post_init__(self):
        if not 1 <= self.universe_size <= MAX_UNIVERSE:
            raise ValueError(f"universe_size must be in 1..{MAX_UNIVERSE}, got {self.universe_size}")
        if not 0 <= self.mask < (1 << self.universe_size):
            raise ValueError(f"mask {self.mask:#x} out of range for universe of {self.universe_size}")

    @classmethod
    def from_indices(cls, indices, universe_size: int) -> "LabelSet":
        mask = 0
        for i in indices:
            if not 0 <= i < universe_size:
                raise ValueError(f"class index {i} outside universe of {universe_size}")
            mask |= 1 << i
        return cls(mask, universe_size)

    def __len__(self) -> int:
        return self.mask.bit_count()

    def __contains__(self, index: int) -> bool:
        return bool(self.mask >> index & 1)

    def __str__(self) -> str:
        # report serialization: sorted bracket list, e.g. "[0,2,4]"
        return "[" + ",".join(str(i) for i in canonical_elements(self)) + "]"


@dataclass(frozen=True)
class Episode:
    """One sampled task: k distinct catalog classes plus one reference exemplar per class.

    ``class_ids`` fixes the episode-local ordering: bit ``i`` of every
    LabelSet in the episode refers to ``class_ids[i]``, and the composition
    recurrence folds elements in ascending bit order.
    """

    class_ids: tuple[int, ...]
    reference_exemplar_ids: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("episode class_ids must be distinct")
        if len(self.reference_exemplar_ids) != len(self.class_ids):
            raise ValueError("need exactly one reference exemplar per class")

    @property
    def k(self) -> int:
        return len(self.class_ids)


def canonical_elements(t: LabelSet) -> list[int]:
    """Indices of set bits, ascending."""
    return [i for i in range(t.universe_size) if t.mask >> i & 1]


def enumerate_label_sets(k: int, max_size: int) -> list[LabelSet]:
    """All nonempty subsets of a k-class universe with at most ``max_size`` elements.

    Canonical order: ascending cardinality, then ascending mask.  This is
    the one total order used everywhere (recurrence construction, decoder
    tie-breaking, report rows), so it must stay deterministic.
    """
    if not 1 <= k <= MAX_UNIVERSE:
        raise ValueError(f"k must be in 1..{MAX_UNIVERSE}, got {k}")
    if not 1 <= max_size <= k:
        raise ValueError(f"max_size must be in 1..k, got {max_size}")
    out: list[LabelSet] = []
    for size in range(1, max_size + 1):
        masks = sorted(sum(1 << i for i in combo) for combo in combinations(range(k), size))
        out.extend(LabelSet(m, k) for m in masks)
    return out


def _check_same_universe(a: LabelSet, b: LabelSet) -> None:
    if a.universe_size != b.universe_size:
        raise ValueError(f"universe mismatch: {a.universe_size} vs {b.universe_size}")


def is_subset(a: LabelSet, b: LabelSet) -> bool:
    """True iff every class of ``a`` is present in ``b``."""
    _check_same_universe(a, b)
    return a.mask & b.mask == a.mask


def union(a: LabelSet, b: LabelSet) -> LabelSet:
    _check_same_universe(a, b)
    return LabelSet(a.mask | b.mask, a.universe_size)
