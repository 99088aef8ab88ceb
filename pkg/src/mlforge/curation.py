"""Manifest I/O, vocabulary filtering/merging, validation splits, statistics.

A manifest is the dataset at any scale: one record per image holding its ID,
source URI, tag set with confidences, and an optional dense feature vector.
The file format is line-oriented TSV so toy corpora stay diffable and golden
tests can be byte-exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .seeds import as_generator

_MOD = "curation"


def format_confidence(value: float) -> str:
    """Canonical confidence rendering: up to 6 decimals, no trailing zeros."""
    text = f"{value:.6f}".rstrip("0").rstrip(".")
    return text if text else "0"


@dataclass
class ImageRecord:
    """One image: ID, source URI, tags (cat_id -> confidence), features."""

    image_id: str
    source_uri: str
    tags: dict[int, float]
    features: np.ndarray | None = None

    def __post_init__(self):
        for cat_id, conf in self.tags.items():
            if cat_id < 0:
                raise DataError(_MOD, "parse", f"{self.image_id}: negative cat_id {cat_id}")
            if not 0.0 <= conf <= 1.0:
                raise DataError(
                    _MOD,
                    "parse",
                    f"{self.image_id}: confidence {conf} for category {cat_id} outside [0,1]",
                )
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)

    def sorted_tags(self) -> list[tuple[int, float]]:
        return sorted(self.tags.items())


@dataclass
class Manifest:
    """Ordered image records with unique image_ids.

    Immutable by convention after construction; transformations return new
    manifests.
    """

    records: list[ImageRecord] = field(default_factory=list)
    feature_dim: int | None = None

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise DataError(_MOD, "duplicate-image", f"duplicate image_id {rec.image_id}")
            seen.add(rec.image_id)
            if rec.features is not None:
                if self.feature_dim is None:
                    self.feature_dim = int(rec.features.shape[0])
                elif rec.features.shape[0] != self.feature_dim:
                    raise DataError(
                        _MOD,
                        "parse",
                        f"{rec.image_id}: feature length {rec.features.shape[0]} "
                        f"!= declared {self.feature_dim}",
                    )

    def __len__(self) -> int:
        return len(self.records)

    def vocabulary(self) -> list[int]:
        """Sorted category ids present in any record."""
        vocab: set[int] = set()
        for rec in self.records:
            vocab.update(rec.tags)
        return sorted(vocab)

    def category_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for rec in self.records:
            for cat in rec.tags:
                counts[cat] = counts.get(cat, 0) + 1
        return counts


@dataclass
class DatasetStats:
    images_per_category: dict[int, int]
    tags_per_image: dict[int, int]
    mean_tags: float
    max_tags: int
    min_tags: int

    def trainable_count(self, threshold: int = 100) -> int:
        """Categories with image count strictly greater than ``threshold``."""
        return sum(1 for n in self.images_per_category.values() if n > threshold)


def read_manifest(path) -> Manifest:
    """Parse a manifest TSV.

    Lines: ``image_id<TAB>source_uri<TAB>tag_list[<TAB>feature_csv]`` with
    tag_list a comma-separated list of ``cat_id:confidence``. ``#`` comments
    allowed.
    """
    records: list[ImageRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise DataError(_MOD, "parse", f"line {lineno}: expected 3 or 4 fields")
            image_id, uri, tag_field = parts[0], parts[1], parts[2]
            tags: dict[int, float] = {}
            if tag_field:
                for item in tag_field.split(","):
                    cat_str, sep, conf_str = item.partition(":")
                    if not sep:
                        raise DataError(
                            _MOD, "parse", f"line {lineno}: malformed tag '{item}'"
                        )
                    try:
                        cat_id = int(cat_str)
                        conf = float(conf_str)
                    except ValueError:
                        raise DataError(
                            _MOD, "parse", f"line {lineno}: malformed tag '{item}'"
                        ) from None
                    if cat_id in tags:
                        raise DataError(
                            _MOD, "parse", f"line {lineno}: duplicate tag {cat_id}"
                        )
                    if not 0.0 <= conf <= 1.0:
                        raise DataError(
                            _MOD,
                            "parse",
                            f"line {lineno}: confidence {conf_str} outside [0,1]",
                        )
                    tags[cat_id] = conf
            features = None
            if len(parts) == 4 and parts[3]:
                try:
                    features = np.array([float(v) for v in parts[3].split(",")])
                except ValueError:
                    raise DataError(
                        _MOD, "parse", f"line {lineno}: malformed feature vector"
                    ) from None
            try:
                records.append(ImageRecord(image_id, uri, tags, features))
            except DataError as err:
                raise DataError(_MOD, err.code, f"line {lineno}: {err}") from None
    return Manifest(records)


def write_manifest(manifest: Manifest, path) -> None:
    """Write canonical manifest TSV (tags sorted ascending by cat_id)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            tag_field = ",".join(
                f"{cat}:{format_confidence(conf)}" for cat, conf in rec.sorted_tags()
            )
            line = f"{rec.image_id}\t{rec.source_uri}\t{tag_field}"
            if rec.features is not None:
                line += "\t" + ",".join(repr(float(v)) for v in rec.features)
            fh.write(line + "\n")


def filter_vocabulary(
    manifest: Manifest, min_count: int, drop_list: frozenset[int] | set[int] = frozenset()
) -> tuple[Manifest, set[int]]:
    """Drop rare and unwanted categories, then records left with no tags.

    A category is removed when its image count is strictly below
    ``min_count`` or it appears in ``drop_list``. Records whose tags were all
    removed are abandoned. Counts of surviving categories are unchanged (a
    record is only dropped when it carried no surviving tag), so one pass
    suffices.
    """
    if min_count < 0:
        raise DataError(_MOD, "parse", f"min_count must be >= 0, got {min_count}")
    counts = manifest.category_counts()
    removed = {c for c, n in counts.items() if n < min_count} | (
        set(drop_list) & set(counts)
    )
    records = []
    for rec in manifest.records:
        kept = {c: v for c, v in rec.tags.items() if c not in removed}
        if kept:
            records.append(ImageRecord(rec.image_id, rec.source_uri, kept, rec.features))
    return Manifest(records), removed


def merge_vocabularies(
    a: Manifest, b: Manifest, synonym_map: dict[int, int]
) -> Manifest:
    """Concatenate two manifests, rewriting b's tags through ``synonym_map``.

    The map must be idempotent (no chains: a mapped-to id may not itself be
    mapped elsewhere). When two of a record's tags collapse onto one
    canonical id, the larger confidence wins. Colliding image_ids are
    rejected.
    """
    for src, dst in synonym_map.items():
        if dst in synonym_map and synonym_map[dst] != dst:
            raise DataError(
                _MOD,
                "chained-synonyms",
                f"synonym chain {src}->{dst}->{synonym_map[dst]}",
            )
    records = list(a.records)
    for rec in b.records:
        tags: dict[int, float] = {}
        for cat, conf in rec.tags.items():
            canon = synonym_map.get(cat, cat)
            tags[canon] = max(conf, tags.get(canon, 0.0))
        records.append(ImageRecord(rec.image_id, rec.source_uri, tags, rec.features))
    try:
        return Manifest(records)
    except DataError as err:
        if err.code == "duplicate-image":
            raise DataError(_MOD, "id-collision", str(err)) from None
        raise


def split_validation(
    manifest: Manifest, n: int, per_category_cap: int, seed
) -> tuple[Manifest, Manifest]:
    """Carve out a validation set of at most ``n`` records.

    A seeded greedy pass in shuffled order accepts a record only while every
    one of its categories still has spare validation quota
    (< per_category_cap). Emits a UserWarning instead of failing when the cap
    makes ``n`` unreachable. Both halves keep the original record order.
    """
    if n > len(manifest.records):
        raise DataError(
            _MOD, "parse", f"validation size {n} exceeds manifest size {len(manifest)}"
        )
    rng = as_generator(seed)
    order = rng.permutation(len(manifest.records))
    val_idx: set[int] = set()
    taken: dict[int, int] = {}
    for idx in order:
        if len(val_idx) >= n:
            break
        rec = manifest.records[idx]
        if all(taken.get(c, 0) < per_category_cap for c in rec.tags):
            val_idx.add(int(idx))
            for c in rec.tags:
                taken[c] = taken.get(c, 0) + 1
    if len(val_idx) < n:
        warnings.warn(
            f"per-category cap {per_category_cap} made target {n} unreachable; "
            f"validation set has {len(val_idx)} records",
            UserWarning,
            stacklevel=2,
        )
    train = [r for i, r in enumerate(manifest.records) if i not in val_idx]
    val = [r for i, r in enumerate(manifest.records) if i in val_idx]
    return Manifest(train), Manifest(val)


def dataset_stats(manifest: Manifest) -> DatasetStats:
    """Exact per-category and per-image annotation counts."""
    per_category = manifest.category_counts()
    histogram: dict[int, int] = {}
    total = 0
    for rec in manifest.records:
        k = len(rec.tags)
        histogram[k] = histogram.get(k, 0) + 1
        total += k
    n = len(manifest.records)
    return DatasetStats(
        images_per_category=per_category,
        tags_per_image=histogram,
        mean_tags=total / n if n else 0.0,
        max_tags=max(histogram) if histogram else 0,
        min_tags=min(histogram) if histogram else 0,
    )
