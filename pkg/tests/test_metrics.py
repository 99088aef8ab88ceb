import numpy as np
import pytest

from mlforge.errors import DataError
from mlforge.metrics import (
    EvalResult,
    instance_metrics,
    read_scores,
    topk_accuracy,
    topk_binarize,
    write_scores,
)


def oracle_instance_metrics(Y, S, k):
    """Nested-loop brute force over instances and categories."""
    n, m = Y.shape
    ps, rs, f1s = [], [], []
    excluded = 0
    for i in range(n):
        npos = int(Y[i].sum())
        if npos == 0:
            excluded += 1
            continue
        order = sorted(range(m), key=lambda j: (-S[i][j], j))
        top = set(order[:k])
        hits = sum(1 for j in top if Y[i][j] == 1)
        p = hits / k
        r = hits / npos
        ps.append(p)
        rs.append(r)
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    if not ps:
        return EvalResult(k, 0.0, 0.0, 0.0, 0, excluded)
    return EvalResult(
        k,
        sum(ps) / len(ps),
        sum(rs) / len(rs),
        sum(f1s) / len(f1s),
        len(ps),
        excluded,
    )


class TestTopkBinarize:
    def test_hand_sort(self):
        assert topk_binarize(np.array([0.9, 0.2, 0.8, 0.1]), 2).tolist() == [1, 0, 1, 0]

    def test_k_equals_m(self):
        assert topk_binarize(np.array([0.3, 0.1, 0.2]), 3).tolist() == [1, 1, 1]

    def test_tie_breaks_to_lowest_index(self):
        assert topk_binarize(np.array([0.5, 0.5, 0.1]), 1).tolist() == [1, 0, 0]

    def test_k_out_of_range(self):
        with pytest.raises(DataError):
            topk_binarize(np.array([0.5, 0.5]), 3)
        with pytest.raises(DataError):
            topk_binarize(np.array([0.5, 0.5]), 0)

    def test_matrix_form(self):
        S = np.array([[0.9, 0.2, 0.8], [0.1, 0.7, 0.3]])
        out = topk_binarize(S, 1)
        assert out.tolist() == [[1, 0, 0], [0, 1, 0]]

    def test_exactly_k_ones(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = int(rng.integers(1, 20))
            k = int(rng.integers(1, m + 1))
            out = topk_binarize(rng.random(m), k)
            assert out.sum() == k


class TestInstanceMetrics:
    def test_worked_example(self):
        Y = np.array([[1, 1, 0, 0]])
        S = np.array([[0.9, 0.2, 0.8, 0.1]])
        result = instance_metrics(Y, S, 2)
        assert result.precision == pytest.approx(0.5)
        assert result.recall == pytest.approx(0.5)
        assert result.f1 == pytest.approx(0.5)
        assert result.n == 1 and result.n_excluded == 0

    def test_perfect_ranking(self):
        Y = np.array([[1, 0, 1, 0]])
        S = np.array([[0.9, 0.1, 0.8, 0.0]])
        result = instance_metrics(Y, S, 2)
        assert result.precision == result.recall == result.f1 == 1.0

    def test_brute_force_oracle_500_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            n = int(rng.integers(1, 9))
            m = int(rng.integers(2, 12))
            Y = (rng.random((n, m)) < 0.35).astype(float)
            S = rng.random((n, m))
            k = int(rng.integers(1, m + 1))
            got = instance_metrics(Y, S, k)
            want = oracle_instance_metrics(Y, S, k)
            assert got.n == want.n and got.n_excluded == want.n_excluded
            assert got.precision == pytest.approx(want.precision, abs=1e-12)
            assert got.recall == pytest.approx(want.recall, abs=1e-12)
            assert got.f1 == pytest.approx(want.f1, abs=1e-12)

    def test_exclusion_counting(self):
        Y = np.array([[1, 0], [0, 0], [0, 0]])
        S = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
        result = instance_metrics(Y, S, 1)
        assert result.n == 1 and result.n_excluded == 2

    def test_exclusion_disabled_raises(self):
        Y = np.array([[0, 0]])
        S = np.array([[0.5, 0.5]])
        with pytest.raises(DataError) as err:
            instance_metrics(Y, S, 1, exclude_empty=False)
        assert err.value.code == "empty-row"

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n, m = 6, 8
            Y = (rng.random((n, m)) < 0.4).astype(float)
            S = rng.random((n, m))
            k = int(rng.integers(1, m + 1))
            perm = rng.permutation(m)
            a = instance_metrics(Y, S, k)
            b = instance_metrics(Y[:, perm], S[:, perm], k)
            assert a.precision == pytest.approx(b.precision, abs=1e-12)
            assert a.recall == pytest.approx(b.recall, abs=1e-12)
            assert a.f1 == pytest.approx(b.f1, abs=1e-12)

    def test_precision_identity(self):
        # P_k * k * n equals total true positives in the top-k predictions
        rng = np.random.default_rng(3)
        Y = (rng.random((10, 7)) < 0.5).astype(float)
        Y[Y.sum(axis=1) == 0, 0] = 1.0
        S = rng.random((10, 7))
        k = 3
        result = instance_metrics(Y, S, k)
        total_tp = (Y * topk_binarize(S, k)).sum()
        assert result.precision * k * result.n == pytest.approx(total_tp, abs=1e-9)

    def test_f1_between_min_and_max(self):
        rng = np.random.default_rng(4)
        Y = np.array([[1, 1, 0, 0, 1]], dtype=float)
        S = rng.random((1, 5))
        r = instance_metrics(Y, S, 2)
        assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12


class TestTopkAccuracy:
    def test_perfect_argmax(self):
        S = np.array([[0.9, 0.1], [0.2, 0.8]])
        assert topk_accuracy(np.array([0, 1]), S, 1) == 1.0

    def test_three_of_four(self):
        S = np.array(
            [[0.9, 0.1, 0.0], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.6, 0.2, 0.2]]
        )
        labels = np.array([0, 1, 2, 1])
        assert topk_accuracy(labels, S, 1) == 0.75

    def test_non_decreasing_in_k(self):
        rng = np.random.default_rng(5)
        S = rng.random((20, 6))
        labels = rng.integers(0, 6, size=20)
        accs = [topk_accuracy(labels, S, k) for k in range(1, 7)]
        assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))
        assert accs[-1] == 1.0

    def test_label_out_of_vocab(self):
        with pytest.raises(DataError) as err:
            topk_accuracy(np.array([5]), np.zeros((1, 3)), 1)
        assert err.value.code == "label-range"


class TestScoresIO:
    def test_round_trip(self, tmp_path):
        rows = [("a", np.array([0.25, 0.5])), ("b", np.array([1.0, 0.0]))]
        path = tmp_path / "scores.tsv"
        write_scores(rows, path)
        loaded = read_scores(path, 2)
        assert [r[0] for r in loaded] == ["a", "b"]
        assert np.array_equal(loaded[0][1], rows[0][1])

    def test_wrong_width_rejected(self, tmp_path):
        path = tmp_path / "scores.tsv"
        path.write_text("a\t0.5,0.5,0.5\n", encoding="utf-8")
        with pytest.raises(DataError):
            read_scores(path, 2)
