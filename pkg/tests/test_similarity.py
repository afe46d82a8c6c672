import math
from fractions import Fraction

import numpy as np
import pytest

from services.similarity import (DimMismatch, EmbeddingTable, EmptyTable, NonPositiveTemperature, SimilarityMatrix,
                                 l2_normalize, masked_argmax, pairwise_scores, row_softmax)
from tests.helpers import unit_rows


class TestEmbeddingTable:
    """Test suite for EmbeddingTable."""

    def test_from_rows_normalizes(self, np_rng):
        table = EmbeddingTable.from_rows(np_rng.normal(size=(5, 4)) * 3.0)
        assert table.rows == 5
        assert table.dim == 4
        assert table.is_unit_norm()

    def test_rejects_non_matrix(self):
        with pytest.raises(DimMismatch):
            EmbeddingTable(np.zeros(3))

    def test_take_keeps_rows(self, np_rng):
        table = EmbeddingTable(unit_rows(np_rng, 6, 3))
        np.testing.assert_array_equal(table.take([4, 1]).data, table.data[[4, 1]])

    def test_l2_normalize_zero_row_stays_finite(self):
        out = l2_normalize(np.zeros((1, 3)))
        assert np.all(np.isfinite(out))


class TestPairwiseScores:
    """Test suite for pairwise_scores."""

    def test_self_similarity(self):
        u = np.array([[0.6, 0.8]])
        assert pairwise_scores(u, u).data[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert pairwise_scores(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).data[0, 0] == 0.0

    def test_matches_loop_oracle(self, np_rng):
        img, txt = unit_rows(np_rng, 3, 5), unit_rows(np_rng, 2, 5)
        S = pairwise_scores(EmbeddingTable(img), EmbeddingTable(txt)).data
        assert S.shape == (3, 2)
        for i in range(3):
            for j in range(2):
                expected = sum(float(img[i, k]) * float(txt[j, k]) for k in range(5))
                assert abs(S[i, j] - expected) < 1e-12

    def test_entries_bounded(self, np_rng):
        S = pairwise_scores(unit_rows(np_rng, 20, 8), unit_rows(np_rng, 30, 8)).data
        assert np.all(np.abs(S) <= 1 + 1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            pairwise_scores(np.ones((2, 3)), np.ones((2, 4)))

    def test_empty_table(self):
        with pytest.raises(EmptyTable):
            pairwise_scores(np.empty((0, 3)), np.ones((2, 3)))


class TestRowSoftmax:
    """Test suite for row_softmax."""

    def test_uniform_row(self):
        P = row_softmax(SimilarityMatrix(np.full((1, 4), 0.3)), 1.0).data
        np.testing.assert_allclose(P, [[0.25, 0.25, 0.25, 0.25]], atol=1e-12)

    def test_two_way_closed_form(self):
        P = row_softmax(np.array([[math.log(2), 0.0]]), 1.0).data
        np.testing.assert_allclose(P, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_matches_exact_reference(self, np_rng):
        """Rows agree with an exact-rational-arithmetic softmax over exp() values."""
        S = pairwise_scores(unit_rows(np_rng, 8, 6), unit_rows(np_rng, 8, 6)).data
        P = row_softmax(S, 0.07).data
        for i in range(8):
            shifted = [Fraction(math.exp((S[i, j] - S[i].max()) / 0.07)) for j in range(8)]
            total = sum(shifted)
            reference = [float(x / total) for x in shifted]
            np.testing.assert_allclose(P[i], reference, atol=1e-6)

    def test_rows_are_distributions(self, np_rng):
        S = pairwise_scores(unit_rows(np_rng, 16, 4), unit_rows(np_rng, 16, 4))
        for direction in ('v2t', 't2v'):
            P = row_softmax(S, 0.01, direction).data
            assert np.all(P >= 0)
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)

    def test_shift_invariance(self, np_rng):
        S = np_rng.uniform(-1, 1, size=(6, 6))
        np.testing.assert_allclose(row_softmax(S + 0.37, 0.1).data, row_softmax(S, 0.1).data, atol=1e-9)

    def test_transpose_duality(self, np_rng):
        S = np_rng.uniform(-1, 1, size=(5, 7))
        np.testing.assert_array_equal(row_softmax(S, 0.2, 't2v').data, row_softmax(S.T, 0.2, 'v2t').data)

    def test_argmax_matches_raw_rows(self, np_rng):
        S = np.round(np_rng.uniform(-1, 1, size=(40, 12)), 1)  # rounding forces ties
        P = row_softmax(S, 0.07).data
        np.testing.assert_array_equal(np.argmax(P, axis=1), np.argmax(S, axis=1))

    @pytest.mark.parametrize("tau", [0.0, -0.5])
    def test_non_positive_temperature(self, tau):
        with pytest.raises(NonPositiveTemperature):
            row_softmax(np.zeros((2, 2)), tau)


class TestMaskedArgmax:
    """Test suite for masked_argmax."""

    def test_skips_visited(self):
        row = np.array([0.9, 0.5, 0.7])
        assert masked_argmax(row, np.array([True, False, False])) == 2

    def test_ties_go_to_lowest_index(self):
        row = np.array([0.1, 0.8, 0.8, 0.8])
        assert masked_argmax(row, np.array([False, True, False, False])) == 2

    def test_penalty_vector_matches_boolean_mask(self, np_rng):
        for _ in range(50):
            row = np_rng.normal(size=12)
            visited = np_rng.random(12) < 0.5
            visited[np_rng.integers(12)] = False
            penalty = np.where(visited, -np.inf, 0.0)
            buf = np.empty(12)
            assert masked_argmax(row, penalty, out=buf) == masked_argmax(row, visited)

    def test_penalty_vector_keeps_tie_rule(self):
        row = np.array([0.8, 0.8, 0.8])
        assert masked_argmax(row, np.array([-np.inf, 0.0, 0.0])) == 1
