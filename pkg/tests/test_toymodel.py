import os
import json
import tempfile
from dataclasses import replace

import numpy as np
import pytest

from services.core import GritConfig, StreamLabel, derive_stream, validate_config
from services.objectives import MASK_TOKEN
from services.toymodel import (MAX_PARAMETERS, CorpusSpec, SpecInfeasible, ToyModel, check_corpus_spec,
                               corpus_spec_from_dict, corpus_spec_to_dict, encode_batch, fuse, generate_corpus,
                               load_corpus_spec, min_centroid_distance, scatter_rows, split_corpus,
                               token_counts)
from services.training import batch_losses

SMALL_SPEC = CorpusSpec(n_examples=128, n_clusters=8, noise=0.1, img_dim=12, seq_len=8, vocab_size=48,
                        grounded_fraction=0.25, attribute_values=4, topic_size=4)


def generate(spec=SMALL_SPEC, seed=3):
    return generate_corpus(spec, derive_stream(seed, StreamLabel.DATA_GEN))


class TestCorpusSpec:
    """Test suite for CorpusSpec and its checks."""

    def test_token_layout(self):
        assert SMALL_SPEC.n_grounded == 2
        assert SMALL_SPEC.content_offset == 9
        assert SMALL_SPEC.n_content == 39
        assert SMALL_SPEC.attribute_token(1, 3) == 8

    def test_dict_round_trip_and_unknown_key(self):
        assert corpus_spec_from_dict(corpus_spec_to_dict(SMALL_SPEC)) == SMALL_SPEC
        with pytest.raises(SpecInfeasible):
            corpus_spec_from_dict({'n_clusterz': 4})

    def test_load_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'spec.json')
            with open(path, 'w') as f:
                json.dump({'n_examples': 64, 'n_clusters': 4}, f)
            spec = load_corpus_spec(path)
        assert spec.n_examples == 64
        assert spec.img_dim == CorpusSpec().img_dim

    @pytest.mark.parametrize("overrides", [
        {'n_clusters': 1},
        {'n_examples': 20, 'n_clusters': 8},
        {'noise': -0.1},
        {'grounded_fraction': 1.5},
        {'attribute_values': 1},
        {'vocab_size': 12},
    ])
    def test_infeasible(self, overrides):
        with pytest.raises(SpecInfeasible):
            check_corpus_spec(replace(SMALL_SPEC, **overrides))


class TestGenerateCorpus:
    """Test suite for the synthetic corpus generator."""

    def test_shapes_and_balance(self):
        corpus = generate()
        assert corpus.images.shape == (128, 12)
        assert corpus.tokens.shape == (128, 8)
        assert corpus.attributes.shape == (128, 2)
        assert np.bincount(corpus.labels).tolist() == [16] * 8

    def test_token_ranges(self):
        corpus = generate()
        assert not np.any(corpus.tokens == MASK_TOKEN)
        assert corpus.tokens.max() < SMALL_SPEC.vocab_size
        for p in range(SMALL_SPEC.n_grounded):
            np.testing.assert_array_equal(corpus.tokens[:, p], SMALL_SPEC.attribute_token(p, corpus.attributes[:, p]))
        assert corpus.tokens[:, 2:].min() >= SMALL_SPEC.content_offset

    def test_centroids_separated(self):
        corpus = generate()
        assert min_centroid_distance(corpus.centroids) >= 4 * SMALL_SPEC.noise

    def test_fewer_dims_than_clusters(self):
        spec = replace(SMALL_SPEC, n_clusters=16, img_dim=8, noise=0.05)
        corpus = generate(spec)
        assert min_centroid_distance(corpus.centroids) >= 4 * spec.noise

    def test_deterministic(self):
        assert generate(seed=9).same_as(generate(seed=9))
        assert not generate(seed=9).same_as(generate(seed=10))

    def test_zero_noise_cluster_members_share_features(self):
        """With no noise and no grounded attributes, every image of a cluster
        is its centroid."""
        spec = replace(SMALL_SPEC, noise=0.0, grounded_fraction=0.0)
        corpus = generate(spec)
        np.testing.assert_array_equal(corpus.images, corpus.centroids[corpus.labels])

    def test_split(self):
        corpus = generate()
        train, held_out = split_corpus(corpus, 100)
        assert len(train) == 100 and len(held_out) == 28
        assert train.spec.n_examples == 100
        np.testing.assert_array_equal(held_out.images, corpus.images[100:])
        with pytest.raises(SpecInfeasible):
            split_corpus(corpus, 128)


class TestToyModel:
    """Test suite for the toy encoders and fusion head."""

    def setup_method(self):
        self.cfg = GritConfig(embed_dim=5, hidden_dim=6, fusion_dim=7)
        self.model = ToyModel.initialize(self.cfg, SMALL_SPEC, derive_stream(1, StreamLabel.WEIGHT_INIT))
        self.corpus = generate()

    def test_default_size_under_limit(self):
        model = ToyModel.initialize(GritConfig(), CorpusSpec(), derive_stream(1, StreamLabel.WEIGHT_INIT))
        assert model.parameter_count < MAX_PARAMETERS

    def test_oversized_model_rejected(self):
        cfg = GritConfig(hidden_dim=512, fusion_dim=1024)
        with pytest.raises(SpecInfeasible):
            ToyModel.initialize(cfg, CorpusSpec(vocab_size=2048), derive_stream(1, StreamLabel.WEIGHT_INIT))

    def test_missing_parameter(self):
        params = dict(self.model.params)
        del params['W_f']
        with pytest.raises(ValueError):
            ToyModel(params)

    def test_same_stream_same_weights(self):
        other = ToyModel.initialize(self.cfg, SMALL_SPEC, derive_stream(1, StreamLabel.WEIGHT_INIT))
        for name in ToyModel.PARAM_NAMES:
            np.testing.assert_array_equal(other.params[name], self.model.params[name])

    def test_encoded_features_are_unit_norm(self):
        enc = encode_batch(self.model, self.corpus.images[:10], self.corpus.tokens[:10])
        assert enc.img.is_unit_norm()
        assert enc.txt.is_unit_norm()
        assert enc.img.dim == 5

    def test_image_off_ignores_image(self):
        enc = encode_batch(self.model, self.corpus.images[:4], self.corpus.tokens[:4])
        out = fuse(self.model, enc.img_hidden, enc.txt_hidden, image_off=True)
        other = fuse(self.model, enc.img_hidden[::-1], enc.txt_hidden, image_off=True)
        np.testing.assert_array_equal(out.mlm_logits, other.mlm_logits)
        assert out.itm_logits.shape == (4, 2)
        assert out.mlm_logits.shape == (4, SMALL_SPEC.vocab_size)

    def test_sgd_step(self):
        model = self.model.copy()
        grads = {name: np.ones_like(p) for name, p in model.params.items()}
        model.sgd_step(grads, 0.1)
        np.testing.assert_allclose(model.params['W_f'], self.model.params['W_f'] - 0.1)
        model.sgd_step(grads, 0.0)
        np.testing.assert_allclose(model.params['W_f'], self.model.params['W_f'] - 0.1)

    def test_token_counts_and_scatter_rows_match_add_at(self, np_rng):
        tokens = np_rng.integers(0, 9, size=(5, 7))
        expected = np.zeros((5, 9))
        np.add.at(expected, (np.repeat(np.arange(5), 7), tokens.ravel()), 1.0)
        np.testing.assert_array_equal(token_counts(tokens, 9), expected)

        index = np.array([3, 0, 3, 3, 1])
        values = np_rng.normal(size=(5, 4))
        summed = np.zeros((6, 4))
        np.add.at(summed, index, values)
        np.testing.assert_allclose(scatter_rows(index, values, 6), summed)


class TestFullModelGradients:
    """Backpropagation through encoders, fusion and all four losses against
    central differences on every parameter."""

    def setup_method(self):
        spec = replace(SMALL_SPEC, n_examples=32, n_clusters=4, img_dim=5, seq_len=4, vocab_size=14,
                       attribute_values=3, topic_size=3)
        self.corpus = generate(spec)
        self.cfg = validate_config(GritConfig(batch_size=6, search_space=6, queue_capacity=12, dataset_size=32,
                                              embed_dim=3, hidden_dim=4, fusion_dim=5, lambda_cons=0.0,
                                              negatives='random', mask_prob=0.5, temperature=0.5)).config
        self.model = ToyModel.initialize(self.cfg, spec, derive_stream(2, StreamLabel.WEIGHT_INIT))
        self.ids = np.arange(6)

    def loss_at(self, model):
        return batch_losses(model, self.corpus.images[self.ids], self.corpus.tokens[self.ids], self.cfg,
                            derive_stream(2, StreamLabel.MASKING, 0, 0),
                            derive_stream(2, StreamLabel.NEGATIVE_SAMPLING, 0, 0))

    def test_gradients_match_finite_differences(self):
        result = self.loss_at(self.model)
        assert result.masked.n_masked > 0
        h = 1e-6
        for name in ToyModel.PARAM_NAMES:
            numeric = np.zeros_like(self.model.params[name])
            for idx in np.ndindex(numeric.shape):
                model = self.model.copy()
                model.params[name][idx] += h
                up = self.loss_at(model).bundle.total
                model.params[name][idx] -= 2 * h
                down = self.loss_at(model).bundle.total
                numeric[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(result.grads[name], numeric, rtol=1e-4, atol=1e-7, err_msg=name)

    def test_losses_are_finite_and_itm_starts_near_chance(self):
        bundle = self.loss_at(self.model).bundle
        for value in (bundle.itc, bundle.itm, bundle.mlm, bundle.total):
            assert np.isfinite(value)
        assert 0.2 < bundle.itm < 2.0
