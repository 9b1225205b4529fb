"""Two-level semantic class tree: root -> coarse -> fine."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Mapping, Sequence

MANY_MIN_EXCLUSIVE = 50_000
FEW_MAX_EXCLUSIVE = 5_000


class TaxonomyError(ValueError):
    pass


class Group(str, Enum):
    MANY = "Many"
    MEDIUM = "Medium"
    FEW = "Few"


@dataclass(frozen=True)
class Taxonomy:
    root: str
    children: Mapping[str, tuple[str, ...]]
    train_counts: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        children = {str(k): tuple(str(c) for c in v) for k, v in self.children.items()}
        names = [self.root, *children]
        fine = [c for kids in children.values() for c in kids]
        names += fine
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise TaxonomyError(f"class names must be unique, duplicates: {dupes}")
        if not fine:
            raise TaxonomyError("taxonomy has no fine classes")
        counts = dict(self.train_counts)
        for name in fine:
            counts.setdefault(name, 0)
        unknown = set(counts) - set(fine)
        if unknown:
            raise TaxonomyError(f"train_counts for non-fine classes: {sorted(unknown)}")
        if any(int(v) != v or v < 0 for v in counts.values()):
            raise TaxonomyError("train_counts must be non-negative integers")
        object.__setattr__(self, "children", MappingProxyType(children))
        object.__setattr__(self, "train_counts", MappingProxyType({k: int(counts[k]) for k in fine}))
        object.__setattr__(self, "_parent", {c: coarse for coarse, kids in children.items() for c in kids})

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild from plain dicts
        return (type(self), (self.root, dict(self.children), dict(self.train_counts)))

    @classmethod
    def from_dict(cls, obj: dict) -> "Taxonomy":
        try:
            root = obj["root"]
            coarse = obj["coarse"]
        except KeyError as exc:
            raise TaxonomyError(f"taxonomy missing field {exc}") from None
        children = {}
        for entry in coarse:
            kids = entry.get("children", [])
            for kid in kids:
                if not isinstance(kid, str):
                    # nested subtrees would make the tree deeper than two levels
                    raise TaxonomyError(f"fine class under {entry.get('name')!r} must be a name, got {kid!r}")
            if entry["name"] in children:
                raise TaxonomyError(f"duplicate coarse class {entry['name']!r}")
            children[entry["name"]] = tuple(kids)
        return cls(root, children, obj.get("train_counts", {}))

    @classmethod
    def load(cls, path) -> "Taxonomy":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "coarse": [{"name": k, "children": list(v)} for k, v in self.children.items()],
            "train_counts": dict(self.train_counts),
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @property
    def fine_classes(self) -> tuple[str, ...]:
        return tuple(self._parent)

    @property
    def coarse_classes(self) -> tuple[str, ...]:
        return tuple(self.children)

    def is_fine(self, name: str) -> bool:
        return name in self._parent

    def is_known(self, name: str) -> bool:
        return name in self._parent or name in self.children or name == self.root

    def parent(self, fine: str) -> str:
        try:
            return self._parent[fine]
        except KeyError:
            raise TaxonomyError(f"unknown fine class {fine!r}") from None

    def by_cardinality(self) -> list[str]:
        """Fine classes sorted by descending train count (ties keep declaration order)."""
        order = {c: i for i, c in enumerate(self.fine_classes)}
        return sorted(self.fine_classes, key=lambda c: (-self.train_counts[c], order[c]))


def lca_distance(t: Taxonomy, a: str, b: str) -> int:
    pa, pb = t.parent(a), t.parent(b)
    if a == b:
        return 0
    return 1 if pa == pb else 2


def siblings_within(t: Taxonomy, c: str, max_lca: int) -> frozenset[str]:
    """Fine classes other than ``c`` whose LCA distance to ``c`` is at most ``max_lca``."""
    if max_lca not in (0, 1, 2):
        raise ValueError(f"max_lca must be 0, 1 or 2, got {max_lca}")
    t.parent(c)
    if max_lca == 0:
        return frozenset()
    return frozenset(d for d in t.fine_classes if d != c and lca_distance(t, c, d) <= max_lca)


def cardinality_group(count: int) -> Group:
    if count > MANY_MIN_EXCLUSIVE:
        return Group.MANY
    if count < FEW_MAX_EXCLUSIVE:
        return Group.FEW
    return Group.MEDIUM


def group_by_cardinality(t: Taxonomy) -> dict[str, Group]:
    return {c: cardinality_group(t.train_counts[c]) for c in t.fine_classes}


def drop_coarse_detections(t: Taxonomy, dets):
    """Keep only detections labelled with a fine class, preserving order.

    Accepts a plain sequence or anything with a ``records`` attribute and a
    ``replace(records)`` method (the record sets in :mod:`lt3d.detections`).
    """
    if hasattr(dets, "records"):
        return dets.replace([d for d in dets.records if t.is_fine(d.cls)])
    return [d for d in dets if t.is_fine(d.cls)]


VARIANTS = ("a", "b", "c", "d")


def compose_hierarchical_scores(fine_score: float, coarse_score: float = 1.0,
                                object_score: float = 1.0, variant: str = "a") -> float:
    """Test-time score for a fine class from multi-level head outputs.

    a: fine; b: object * fine; c: coarse * fine; d: object * coarse * fine.
    """
    for name, s in (("fine", fine_score), ("coarse", coarse_score), ("object", object_score)):
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"{name} score must lie in [0, 1], got {s}")
    if variant == "a":
        return fine_score
    if variant == "b":
        return object_score * fine_score
    if variant == "c":
        return coarse_score * fine_score
    if variant == "d":
        return object_score * coarse_score * fine_score
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def members_of(t: Taxonomy, coarse: str) -> Sequence[str]:
    try:
        return t.children[coarse]
    except KeyError:
        raise TaxonomyError(f"unknown coarse class {coarse!r}") from None
