"""Vocabularies, composition label spaces, splits and frequency statistics.

Compositions are (attribute index, object index) pairs. The canonical
enumeration of the full Cartesian label space is row-major over
(attribute, object): index = attr * n_objs + obj. Names are case-sensitive
exact strings; embedded whitespace is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Pair = tuple[int, int]


class SpaceError(ValueError):
    """Invalid vocabulary or composition-set structure."""


@dataclass(frozen=True)
class CompositionSpace:
    """Attribute/object vocabularies plus the seen and unseen pair sets.

    Immutable after construction; safe to share across threads. `seen` and
    `unseen` are disjoint subsets of the full Cartesian set, which they are
    expected (not forced) to cover only partially.
    """

    attributes: tuple[str, ...]
    objects: tuple[str, ...]
    seen: frozenset[Pair]
    unseen: frozenset[Pair] = frozenset()

    def __post_init__(self):
        if not self.attributes or not self.objects:
            raise SpaceError("empty vocabulary")
        if len(set(self.attributes)) != len(self.attributes):
            raise SpaceError("duplicate attribute names")
        if len(set(self.objects)) != len(self.objects):
            raise SpaceError("duplicate object names")
        overlap = self.seen & self.unseen
        if overlap:
            raise SpaceError(f"seen/unseen overlap on {sorted(overlap)[:5]}")
        for a, o in self.seen | self.unseen:
            if not (0 <= a < self.n_attrs and 0 <= o < self.n_objs):
                raise SpaceError(f"pair ({a}, {o}) out of vocabulary bounds")

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    @property
    def n_objs(self) -> int:
        return len(self.objects)

    @property
    def n_comps(self) -> int:
        return self.n_attrs * self.n_objs

    @property
    def test_closed(self) -> frozenset[Pair]:
        return self.seen | self.unseen

    def comp_index(self, attr: int, obj: int) -> int:
        return attr * self.n_objs + obj

    def comp_pair(self, index: int) -> Pair:
        a, o = divmod(int(index), self.n_objs)
        return a, o

    def all_pairs(self) -> list[Pair]:
        """Full Cartesian set in canonical (row-major) order."""
        return [(a, o) for a in range(self.n_attrs) for o in range(self.n_objs)]

    def sorted_pairs(self, pairs) -> list[Pair]:
        """Pairs sorted by canonical composition index."""
        return sorted(pairs, key=lambda p: self.comp_index(*p))

    def pair_name(self, pair: Pair) -> str:
        return f"{self.attributes[pair[0]]} {self.objects[pair[1]]}"


def build_space(attrs, objs, seen_names, unseen_names=()) -> CompositionSpace:
    """Build a validated space from name-level vocabularies and pair lists.

    `seen_names`/`unseen_names` are iterables of (attribute name, object name).
    """
    attrs = tuple(attrs)
    objs = tuple(objs)
    if not attrs or not objs:
        raise SpaceError("empty vocabulary")
    a_ix = {name: i for i, name in enumerate(attrs)}
    o_ix = {name: i for i, name in enumerate(objs)}

    def resolve(pairs, label):
        out = set()
        for a, o in pairs:
            if a not in a_ix:
                raise SpaceError(f"unknown attribute {a!r} in {label} pair list")
            if o not in o_ix:
                raise SpaceError(f"unknown object {o!r} in {label} pair list")
            out.add((a_ix[a], o_ix[o]))
        return frozenset(out)

    return CompositionSpace(attrs, objs, resolve(seen_names, "seen"),
                            resolve(unseen_names, "unseen"))


@dataclass
class Sample:
    """One image: its id, precomputed backbone feature and ground-truth labels."""

    image_id: str
    feature: np.ndarray
    attr: int
    obj: int

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if not np.all(np.isfinite(self.feature)):
            raise ValueError(f"sample {self.image_id}: non-finite feature entries")

    @property
    def pair(self) -> Pair:
        return (self.attr, self.obj)


@dataclass
class FrequencyTable:
    """Training-set occurrence counts per attribute, object and composition."""

    attr_counts: np.ndarray
    obj_counts: np.ndarray
    comp_counts: np.ndarray = field(repr=False)

    @property
    def n_samples(self) -> int:
        return int(self.comp_counts.sum())


def count_frequencies(samples, space: CompositionSpace) -> FrequencyTable:
    """Count label occurrences; every sample label must be a seen composition."""
    attr_counts = np.zeros(space.n_attrs, dtype=np.int64)
    obj_counts = np.zeros(space.n_objs, dtype=np.int64)
    comp_counts = np.zeros(space.n_comps, dtype=np.int64)
    for s in samples:
        if s.pair not in space.seen:
            raise SpaceError(
                f"sample {s.image_id} labeled {space.pair_name(s.pair)!r}, "
                "which is not a seen composition")
        attr_counts[s.attr] += 1
        obj_counts[s.obj] += 1
        comp_counts[space.comp_index(s.attr, s.obj)] += 1
    return FrequencyTable(attr_counts, obj_counts, comp_counts)
