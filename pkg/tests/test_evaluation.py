import math

import numpy as np
import pytest
from scipy.special import softmax
from scipy.stats import binomtest

from services.core import GritConfig, StreamLabel, derive_stream, validate_config
from services.evaluation import (EmptySlice, InvalidK, hardness_stats, retrieval_at_k, retrieval_from_features,
                                 topk_accuracy, uov)
from services.grit import EpochSchedule, GritScheduler, Provenance, first_epoch_schedule
from services.objectives import HardNegativeAssignment, select_hard_negatives
from services.toymodel import CorpusSpec, ToyModel, generate_corpus
from tests.helpers import clustered_features, unit_rows

SPEC = CorpusSpec(n_examples=64, n_clusters=4, img_dim=8, seq_len=6, vocab_size=32, attribute_values=3,
                  topic_size=3)


def oracle_recall(S, k):
    """Row-by-row ranking with (score desc, index asc) ordering."""
    hits = 0
    for i in range(S.shape[0]):
        order = sorted(range(S.shape[1]), key=lambda j: (-S[i, j], j))
        hits += i in order[:k]
    return hits / S.shape[0]


def negatives_for(schedule, img, txt, seed, tau=0.07):
    assignments = []
    for b, ids in enumerate(schedule.batches):
        Z = img[ids] @ txt[ids].T / tau
        assignments.append(select_hard_negatives(softmax(Z, axis=1), softmax(Z.T, axis=1),
                                                 derive_stream(seed, StreamLabel.NEGATIVE_SAMPLING, 0, b)))
    return assignments


class TestTopkAccuracy:
    """Test suite for topk_accuracy."""

    def test_ties_rank_lower_id_first(self):
        logits = np.array([[1.0, 1.0, 0.0]])
        assert topk_accuracy(logits, [1], 1) == 0.0
        assert topk_accuracy(logits, [1], 2) == 1.0

    def test_mixed_rows(self):
        logits = np.array([[0.1, 0.9, 0.0], [0.5, 0.2, 0.3], [0.0, 0.1, 0.2]])
        assert topk_accuracy(logits, [1, 2, 0], 1) == pytest.approx(1 / 3)
        assert topk_accuracy(logits, [1, 2, 0], 2) == pytest.approx(2 / 3)

    def test_empty(self):
        assert topk_accuracy(np.zeros((0, 5)), [], 1) == 0.0


class TestRetrieval:
    """Test suite for recall@k."""

    def test_perfect_alignment(self):
        report = retrieval_from_features(np.eye(4), np.eye(4), (1, 2))
        assert report.i2t == (1.0, 1.0)
        assert report.t2i == (1.0, 1.0)
        assert report.as_dict() == {'r1_i2t': 1.0, 'r1_t2i': 1.0, 'r2_i2t': 1.0, 'r2_t2i': 1.0}

    def test_identical_features_break_ties_by_index(self):
        """Every score ties, so row i ranks its own pair at position i."""
        feats = np.tile([[1.0, 0.0]], (5, 1))
        report = retrieval_from_features(feats, feats, (1, 2, 5))
        assert report.i2t == pytest.approx((0.2, 0.4, 1.0))
        assert report.t2i == pytest.approx((0.2, 0.4, 1.0))

    def test_matches_sorting_oracle(self, np_rng):
        for _ in range(20):
            img = np.round(unit_rows(np_rng, 12, 3), 1)
            txt = np.round(unit_rows(np_rng, 12, 3), 1)
            report = retrieval_from_features(img, txt, (1, 3, 12))
            S = img @ txt.T
            for k, i2t, t2i in zip(report.ks, report.i2t, report.t2i):
                assert i2t == pytest.approx(oracle_recall(S, k))
                assert t2i == pytest.approx(oracle_recall(S.T, k))

    @pytest.mark.parametrize("ks", [(0,), (1, 5)])
    def test_invalid_k(self, ks):
        with pytest.raises(InvalidK):
            retrieval_from_features(np.eye(3), np.eye(3), ks)

    def test_model_retrieval_bounds(self):
        corpus = generate_corpus(SPEC, derive_stream(1, StreamLabel.DATA_GEN))
        model = ToyModel.initialize(GritConfig(embed_dim=4, hidden_dim=6, fusion_dim=8), SPEC,
                                    derive_stream(1, StreamLabel.WEIGHT_INIT))
        report = retrieval_at_k(model, corpus, (1, 5, 10))
        for values in (report.i2t, report.t2i):
            assert all(0.0 <= v <= 1.0 for v in values)
            assert list(values) == sorted(values)

    def test_empty_slice(self):
        corpus = generate_corpus(SPEC, derive_stream(1, StreamLabel.DATA_GEN)).take([])
        model = ToyModel.initialize(GritConfig(embed_dim=4, hidden_dim=6, fusion_dim=8), SPEC,
                                    derive_stream(1, StreamLabel.WEIGHT_INIT))
        with pytest.raises(EmptySlice):
            retrieval_at_k(model, corpus, (1,))


class TestUoV:
    """Test suite for usage-of-vision."""

    def setup_method(self):
        self.corpus = generate_corpus(SPEC, derive_stream(2, StreamLabel.DATA_GEN))
        self.model = ToyModel.initialize(GritConfig(embed_dim=4, hidden_dim=6, fusion_dim=8), SPEC,
                                         derive_stream(2, StreamLabel.WEIGHT_INIT))

    def test_rows_follow_grid(self):
        report = uov(self.model, self.corpus, (0.15, 0.5), derive_stream(2, StreamLabel.MASKING, 9))
        assert [r.mask_prob for r in report.rows] == [0.15, 0.5]
        for row in report.rows:
            assert row.uov1 == pytest.approx(row.acc1 - row.acc1_wo_image)
            assert row.uov5 == pytest.approx(row.acc5 - row.acc5_wo_image)
            assert row.acc5 >= row.acc1
            assert row.n_masked > 0
        assert report.at(0.5).mask_prob == 0.5
        with pytest.raises(KeyError):
            report.at(0.9)

    def test_replay_gives_same_masks_and_values(self):
        rng = derive_stream(2, StreamLabel.MASKING, 9)
        a = uov(self.model, self.corpus, (0.35,), rng)
        b = uov(self.model, self.corpus, (0.35,), rng.replay())
        assert a.records() == b.records()

    def test_grid_points_use_distinct_masks(self):
        report = uov(self.model, self.corpus, (0.5, 0.5), derive_stream(2, StreamLabel.MASKING, 9))
        assert report.rows[0].mask_hash != report.rows[1].mask_hash

    def test_image_blind_fusion_has_zero_uov(self):
        model = self.model.copy()
        model.params['W_f'][:model.hidden_dim] = 0.0
        report = uov(model, self.corpus, (0.15, 0.75), derive_stream(3, StreamLabel.MASKING))
        for row in report.rows:
            assert row.uov1 == 0.0
            assert row.uov5 == 0.0

    def test_fully_masked_caption_without_image_is_at_chance(self):
        """One grounded token per caption, always masked, text pathway cut:
        without the image the head only knows the position."""
        A = 8
        spec = CorpusSpec(n_examples=4096, n_clusters=4, img_dim=8, seq_len=1, grounded_fraction=1.0,
                          vocab_size=1 + A, attribute_values=A)
        corpus = generate_corpus(spec, derive_stream(5, StreamLabel.DATA_GEN))
        model = ToyModel.initialize(GritConfig(embed_dim=4, hidden_dim=6, fusion_dim=8), spec,
                                    derive_stream(5, StreamLabel.WEIGHT_INIT))
        h = model.hidden_dim
        model.params['W_f'][h:2 * h] = 0.0
        row = uov(model, corpus, (1.0,), derive_stream(5, StreamLabel.MASKING)).rows[0]
        n = len(corpus)
        assert row.n_masked == n
        for k, acc in ((1, row.acc1_wo_image), (5, row.acc5_wo_image)):
            p = k / A
            assert acc <= p + 4 * math.sqrt(p * (1 - p) / n)

    def test_empty_slice(self):
        with pytest.raises(EmptySlice):
            uov(self.model, self.corpus.take([]), (0.5,), derive_stream(3, StreamLabel.MASKING))


class TestHardnessStats:
    """Test suite for hardness_stats."""

    def test_hand_computed_batch(self):
        feats = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
        schedule = EpochSchedule(0, (np.array([0, 1, 2]),), Provenance.RANDOM, 3)
        assignment = HardNegativeAssignment(np.array([1, 0, 0]), np.array([1, 2, 0]))
        report = hardness_stats(schedule, (feats, feats), [assignment], labels=np.array([0, 0, 1]))
        assert report.mean_intra_batch_similarity == pytest.approx(2.8 / 6)
        assert report.mean_negative_similarity == pytest.approx(2.6 / 6)
        assert report.same_cluster_negative_fraction == pytest.approx(0.5)
        assert report.n_negatives == 6
        assert report.n_batches == 1
        assert len(report.negative_quantiles) == 5

    def test_nothing_sampled(self):
        schedule = EpochSchedule(0, (np.array([0]),), Provenance.RANDOM, 1)
        report = hardness_stats(schedule, (np.eye(1), np.eye(1)), [None])
        assert report.n_negatives == 0
        assert math.isnan(report.mean_negative_similarity)

    def test_without_labels(self, np_rng):
        feats = unit_rows(np_rng, 4, 3)
        schedule = EpochSchedule(0, (np.array([0, 1, 2, 3]),), Provenance.RANDOM, 4)
        report = hardness_stats(schedule, (feats, feats), [HardNegativeAssignment(np.array([1, 0, 3, 2]),
                                                                                  np.array([1, 0, 3, 2]))])
        assert math.isnan(report.same_cluster_negative_fraction)
        assert report.n_negatives == 8

    def test_grouped_batches_give_harder_negatives(self):
        """On clustered features, negatives drawn from grouped batches are
        more similar to their anchors than those from random batches."""
        wins = 0
        for seed in range(12):
            rng = np.random.default_rng(200 + seed)
            img, txt, labels = clustered_features(rng, K=32, per_cluster=64, dim=32)
            cfg = validate_config(GritConfig(batch_size=16, search_space=256, queue_capacity=1024,
                                             dataset_size=2048, embed_dim=32, master_seed=seed))
            scheduler = GritScheduler(cfg, 1)
            for lo in range(0, 2048, 16):
                ids = np.arange(lo, lo + 16)
                scheduler.collect(img[ids], txt[ids], ids)
            grouped = scheduler.finish()
            random = first_epoch_schedule(2048, 16, derive_stream(seed, StreamLabel.EXAMPLE_SHUFFLE, 1))
            hard = hardness_stats(grouped, (img, txt), negatives_for(grouped, img, txt, seed), labels)
            easy = hardness_stats(random, (img, txt), negatives_for(random, img, txt, seed), labels)
            assert hard.same_cluster_negative_fraction >= easy.same_cluster_negative_fraction - 0.05
            if hard.mean_negative_similarity > easy.mean_negative_similarity:
                wins += 1
        assert binomtest(wins, 12, 0.5, alternative='greater').pvalue < 0.01
