"""Instance-level evaluation metrics with top-k binarization.

Per image, the k largest scores become the positive prediction vector;
precision, recall, and F1 are computed per instance and then averaged over
instances (as opposed to per-category averaging). Also provides single-label
top-k accuracy for fine-tuning evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

_MOD = "metrics"


@dataclass(frozen=True)
class EvalResult:
    k: int
    precision: float
    recall: float
    f1: float
    n: int  # instances included in the averages
    n_excluded: int = 0  # rows dropped for having no positive label


def topk_binarize(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary vector with exactly k ones at the k largest scores.

    Ties break toward the lower category index so results are reproducible.
    """
    scores = np.asarray(scores, dtype=float)
    m = scores.shape[-1]
    if not 1 <= k <= m:
        raise DataError(_MOD, "k-range", f"k={k} outside 1..{m}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    out = np.zeros_like(scores, dtype=int)
    if scores.ndim == 1:
        out[order[:k]] = 1
    else:
        rows = np.arange(scores.shape[0])[:, None]
        out[rows, order[:, :k]] = 1
    return out


def instance_metrics(
    Y: np.ndarray, S: np.ndarray, k: int, exclude_empty: bool = True
) -> EvalResult:
    """Instance-averaged precision, recall, and F1 at top-k.

    Per instance i: P_i = hits / k, R_i = hits / (number of true positives),
    F1_i = harmonic mean (0 when P_i + R_i = 0). Rows without any positive
    label make R_i undefined; they are excluded from the averages and
    counted in ``n_excluded`` (or rejected when ``exclude_empty`` is False).
    """
    Y = np.asarray(Y, dtype=float)
    S = np.asarray(S, dtype=float)
    if Y.shape != S.shape or Y.ndim != 2:
        raise DataError(_MOD, "shape-mismatch", f"Y {Y.shape} and S {S.shape} must be equal n x m")
    pos_per_row = Y.sum(axis=1)
    empty = pos_per_row == 0
    if empty.any() and not exclude_empty:
        raise DataError(
            _MOD, "empty-row", f"{int(empty.sum())} rows have no positive label"
        )
    keep = ~empty
    n = int(keep.sum())
    if n == 0:
        return EvalResult(k, 0.0, 0.0, 0.0, 0, int(empty.sum()))
    yhat = topk_binarize(S[keep], k)
    hits = (Y[keep] * yhat).sum(axis=1)
    p = hits / k
    r = hits / pos_per_row[keep]
    denom = p + r
    f1 = np.where(denom > 0, 2.0 * p * r / np.where(denom > 0, denom, 1.0), 0.0)
    return EvalResult(
        k=k,
        precision=float(p.mean()),
        recall=float(r.mean()),
        f1=float(f1.mean()),
        n=n,
        n_excluded=int(empty.sum()),
    )


def read_scores(path, m: int) -> list[tuple[str, np.ndarray]]:
    """Score TSV: ``image_id<TAB>comma-separated m floats`` per line."""
    rows: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            image_id, sep, csv = line.partition("\t")
            if not sep:
                raise DataError(_MOD, "shape-mismatch", f"line {lineno}: expected 2 fields")
            if image_id in seen:
                raise DataError(_MOD, "shape-mismatch", f"line {lineno}: duplicate id {image_id}")
            seen.add(image_id)
            try:
                values = np.array([float(v) for v in csv.split(",")])
            except ValueError:
                raise DataError(_MOD, "shape-mismatch", f"line {lineno}: non-numeric score") from None
            if values.size != m:
                raise DataError(
                    _MOD, "shape-mismatch", f"line {lineno}: {values.size} scores, expected {m}"
                )
            rows.append((image_id, values))
    return rows


def write_scores(rows: list[tuple[str, np.ndarray]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, values in rows:
            fh.write(image_id + "\t" + ",".join(repr(float(v)) for v in values) + "\n")


def topk_accuracy(labels: np.ndarray, S: np.ndarray, k: int) -> float:
    """Fraction of instances whose true label lands in the top-k scores."""
    labels = np.asarray(labels, dtype=int)
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or labels.shape != (S.shape[0],):
        raise DataError(
            _MOD, "shape-mismatch", f"labels {labels.shape} vs scores {S.shape}"
        )
    m = S.shape[1]
    if (labels < 0).any() or (labels >= m).any():
        bad = labels[(labels < 0) | (labels >= m)][0]
        raise DataError(_MOD, "label-range", f"label {bad} outside vocabulary 0..{m - 1}")
    yhat = topk_binarize(S, k)
    return float(yhat[np.arange(labels.size), labels].mean())
