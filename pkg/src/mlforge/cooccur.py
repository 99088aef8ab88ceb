"""Co-occurrence statistics between a source vocabulary and machine tags.

Given per-image machine-annotation scores, thresholding produces positive
machine tags; counting how often machine tag j fires on images carrying
source tag i yields the ratio matrix CO(i,j) = n_ij / n_i. Pairs above a
ratio threshold with no hierarchy path between them are "strong" and drive
tag augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .curation import ImageRecord, Manifest
from .errors import DataError
from .taxonomy import LabelGraph, ancestors

_MOD = "cooccur"


@dataclass
class CoMatrix:
    """Sparse co-occurrence counts and ratios.

    ``counts[(i, j)]`` is n_ij (images with source tag i that are also
    machine-tagged j); ``support[i]`` is n_i. Ratios are exact quotients of
    these integers; zero counts store no entry.
    """

    counts: dict[tuple[int, int], int] = field(default_factory=dict)
    support: dict[int, int] = field(default_factory=dict)

    def ratio(self, i: int, j: int) -> float:
        n_i = self.support.get(i, 0)
        if n_i == 0:
            return 0.0
        return self.counts.get((i, j), 0) / n_i

    def entries(self) -> dict[tuple[int, int], float]:
        return {(i, j): n / self.support[i] for (i, j), n in self.counts.items()}

    def merge(self, other: "CoMatrix") -> "CoMatrix":
        """Combine counts from a disjoint image shard."""
        merged = CoMatrix(dict(self.counts), dict(self.support))
        for key, n in other.counts.items():
            merged.counts[key] = merged.counts.get(key, 0) + n
        for i, n in other.support.items():
            merged.support[i] = merged.support.get(i, 0) + n
        return merged


def machine_annotate(scores: dict[int, float], threshold: float) -> set[int]:
    """Categories whose posterior score is strictly above ``threshold``."""
    for cat, p in scores.items():
        if not 0.0 <= p <= 1.0:
            raise DataError(_MOD, "score-range", f"score {p} for category {cat} outside [0,1]")
    return {cat for cat, p in scores.items() if p > threshold}


def compute_cooccurrence(
    source_tags: dict[str, set[int]], machine_tags: dict[str, set[int]]
) -> CoMatrix:
    """Count co-occurrence of source tags with machine tags per image.

    Both maps must cover the same image_ids. Images may be counted in
    disjoint shards and merged (CoMatrix.merge); the result is independent
    of sharding because only integer counts are accumulated.
    """
    if set(source_tags) != set(machine_tags):
        raise DataError(_MOD, "image-id-mismatch", "source and machine image_id sets differ")
    co = CoMatrix()
    for image_id, src in source_tags.items():
        mach = machine_tags[image_id]
        for i in src:
            co.support[i] = co.support.get(i, 0) + 1
            for j in mach:
                co.counts[(i, j)] = co.counts.get((i, j), 0) + 1
    return co


def strong_pairs(
    co: CoMatrix, graph: LabelGraph, threshold: float = 0.5
) -> set[tuple[int, int]]:
    """Pairs with CO(i,j) strictly above threshold and no hierarchy path.

    A pair is suppressed when i and j coincide or one is an ancestor of the
    other in either direction; co-occurrence between semantically related
    categories is already captured by hierarchy propagation.
    """
    pairs: set[tuple[int, int]] = set()
    for (i, j), n_ij in co.counts.items():
        if i not in graph or j not in graph:
            raise DataError(
                _MOD, "unknown-category", f"pair ({i},{j}) not in hierarchy vocabulary"
            )
        if n_ij / co.support[i] <= threshold:
            continue
        if i == j or j in ancestors(graph, i) or i in ancestors(graph, j):
            continue
        pairs.add((i, j))
    return pairs


def augment_by_cooccurrence(
    manifest: Manifest, pairs: set[tuple[int, int]]
) -> Manifest:
    """Add tag j (confidence 1.0) to every record tagged i, for each pair.

    One round only: added tags are derived from the record's tags on entry
    and do not trigger further pairs within the call. Idempotent whenever no
    added tag is itself the source side of a pair, which holds by
    construction when pairs relate two distinct source vocabularies.
    Existing tags and their confidences are never touched.
    """
    vocab = set(manifest.vocabulary())
    by_source: dict[int, set[int]] = {}
    for i, j in pairs:
        if i not in vocab:
            raise DataError(
                _MOD,
                "unknown-category",
                f"pair source category {i} not in manifest vocabulary",
            )
        by_source.setdefault(i, set()).add(j)
    records = []
    for rec in manifest.records:
        added: set[int] = set()
        for i in rec.tags:
            added.update(by_source.get(i, ()))
        if added - set(rec.tags):
            tags = dict(rec.tags)
            for j in added:
                tags.setdefault(j, 1.0)
            records.append(ImageRecord(rec.image_id, rec.source_uri, tags, rec.features))
        else:
            records.append(rec)
    return Manifest(records)


def propagate_hierarchy(manifest: Manifest, graph: LabelGraph) -> Manifest:
    """Close every record's tag set under the hierarchy's parent relation.

    Ancestor tags are added with confidence 1.0; existing tags keep their
    confidences. Tags missing from the hierarchy are a hard error.
    """
    from .taxonomy import propagate_tags

    records = []
    for rec in manifest.records:
        closed = propagate_tags(graph, set(rec.tags))
        if closed - set(rec.tags):
            tags = dict(rec.tags)
            for cat in closed:
                tags.setdefault(cat, 1.0)
            records.append(ImageRecord(rec.image_id, rec.source_uri, tags, rec.features))
        else:
            records.append(rec)
    return Manifest(records)


def write_comatrix(co: CoMatrix, path) -> None:
    """Lines ``i<TAB>j<TAB>n_ij<TAB>n_i<TAB>ratio`` (ratio to 6 decimals)."""
    with open(path, "w", encoding="utf-8") as fh:
        for (i, j) in sorted(co.counts):
            n_ij = co.counts[(i, j)]
            n_i = co.support[i]
            fh.write(f"{i}\t{j}\t{n_ij}\t{n_i}\t{n_ij / n_i:.6f}\n")


def read_comatrix(path) -> CoMatrix:
    co = CoMatrix()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(_MOD, "parse", f"line {lineno}: expected 5 fields")
            try:
                i, j, n_ij, n_i = int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError:
                raise DataError(_MOD, "parse", f"line {lineno}: non-integer field") from None
            if n_i <= 0 or n_ij < 0 or n_ij > n_i:
                raise DataError(_MOD, "parse", f"line {lineno}: bad counts {n_ij}/{n_i}")
            co.counts[(i, j)] = n_ij
            if i in co.support and co.support[i] != n_i:
                raise DataError(_MOD, "parse", f"line {lineno}: inconsistent n_i for {i}")
            co.support[i] = n_i
    return co


def write_pairs(pairs: set[tuple[int, int]], path) -> None:
    """Lines ``i<TAB>j``."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in sorted(pairs):
            fh.write(f"{i}\t{j}\n")


def read_pairs(path) -> set[tuple[int, int]]:
    pairs: set[tuple[int, int]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(_MOD, "parse", f"line {lineno}: expected 2 fields")
            try:
                pairs.add((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataError(_MOD, "parse", f"line {lineno}: non-integer field") from None
    return pairs
