"""Shared toy corpora for the test suite.

The hand-built corpus is 20 images over 12 categories arranged as two trees,
with source tags drawn from specific categories and machine annotations from
a disjoint general vocabulary, mirroring a two-source curation setting.
"""

import numpy as np
import pytest

from mlforge.curation import ImageRecord, Manifest
from mlforge.taxonomy import Category, LabelGraph

# 12 categories, 2 trees:
#   thing(0) -> animal(1) -> dog(2) -> husky(3)
#                         -> cat(4)
#                         -> sea_snake(6)
#            -> sea(5)
#            -> plant(9)  -> tree(10)
#                         -> grass(11)
#   matter(7) -> water(8)
TOY_TAXONOMY = {
    0: (None, "thing"),
    1: (0, "animal"),
    2: (1, "dog"),
    3: (2, "husky"),
    4: (1, "cat"),
    5: (0, "sea"),
    6: (1, "sea_snake"),
    7: (None, "matter"),
    8: (7, "water"),
    9: (0, "plant"),
    10: (9, "tree"),
    11: (9, "grass"),
}

# source-tag side (specific categories) vs machine-annotation side; the two
# vocabularies are disjoint as in a two-source corpus
SOURCE_VOCAB = [2, 3, 4, 6, 10, 11]
MACHINE_VOCAB = [1, 5, 8, 9]


def build_toy_graph() -> LabelGraph:
    categories = {cid: Category(cid, name, f"n{cid:08d}") for cid, (_, name) in TOY_TAXONOMY.items()}
    parent = {cid: par for cid, (par, _) in TOY_TAXONOMY.items()}
    return LabelGraph(categories, parent)


def write_toy_taxonomy(path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# toy taxonomy\n")
        for cid, (par, name) in sorted(TOY_TAXONOMY.items()):
            fh.write(f"{cid}\t{-1 if par is None else par}\tn{cid:08d}\t{name}\n")


def build_toy_manifest() -> Manifest:
    """20 images with source tags only (pre-augmentation)."""
    tag_sets = [
        {2}, {2}, {2, 4}, {3}, {3},
        {4}, {4}, {6}, {6}, {6},
        {6}, {10}, {10}, {11}, {11},
        {2, 11}, {4, 10}, {6, 4}, {3, 11}, {10, 11},
    ]
    records = [
        ImageRecord(f"img{i:03d}", f"uri://toy/{i}", {c: 1.0 for c in tags})
        for i, tags in enumerate(tag_sets)
    ]
    return Manifest(records)


def build_toy_scores(rng: np.random.Generator) -> dict[str, dict[int, float]]:
    """Machine-annotation scores over MACHINE_VOCAB for the toy manifest.

    Images tagged sea_snake(6) score high on sea(5); everything else is
    noise below the 0.95 threshold.
    """
    manifest = build_toy_manifest()
    scores = {}
    for rec in manifest.records:
        row = {cat: float(rng.uniform(0.0, 0.9)) for cat in MACHINE_VOCAB}
        if 6 in rec.tags:
            row[5] = float(rng.uniform(0.96, 1.0))
        scores[rec.image_id] = row
    return scores


@pytest.fixture
def toy_graph():
    return build_toy_graph()


@pytest.fixture
def toy_manifest():
    return build_toy_manifest()


@pytest.fixture
def toy_taxonomy_file(tmp_path):
    path = tmp_path / "toy.tax"
    write_toy_taxonomy(path)
    return path


def random_forest(rng: np.random.Generator, n: int) -> LabelGraph:
    """Random forest on cat_ids 0..n-1 (node i's parent drawn from 0..i-1)."""
    categories = {i: Category(i, f"cat{i}") for i in range(n)}
    parent: dict[int, int | None] = {}
    for i in range(n):
        if i == 0 or rng.random() < 0.15:
            parent[i] = None
        else:
            parent[i] = int(rng.integers(0, i))
    return LabelGraph(categories, parent)
