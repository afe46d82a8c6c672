import json
import logging
from dataclasses import dataclass, asdict, fields, replace
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from services.core import GritConfig, RngStream
from services.similarity import EmbeddingTable

logger = logging.getLogger(__name__)

MAX_PARAMETERS = 1_000_000


class SpecInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    """Recipe for the synthetic clustered image/text corpus.

    Each example belongs to one of `n_clusters` clusters. Its image is the
    cluster centroid plus isotropic noise plus one embedding per grounded
    attribute. Its caption starts with one token per grounded attribute
    (only recoverable from the image once masked) followed by content tokens
    drawn mostly from a cluster-specific topic.
    """

    n_examples: int = 4096
    n_clusters: int = 32
    noise: float = 0.1
    img_dim: int = 64
    seq_len: int = 16
    vocab_size: int = 128
    grounded_fraction: float = 0.25
    attribute_values: int = 8
    attribute_scale: float = 0.5
    topic_size: int = 6
    topic_mass: float = 0.8

    @property
    def n_grounded(self) -> int:
        return int(round(self.grounded_fraction * self.seq_len))

    @property
    def content_offset(self) -> int:
        # token 0 is MASK, then one block of attribute_values ids per grounded position
        return 1 + self.n_grounded * self.attribute_values

    @property
    def n_content(self) -> int:
        return self.vocab_size - self.content_offset

    def attribute_token(self, position: int, value) -> np.ndarray:
        return 1 + position * self.attribute_values + np.asarray(value)


def corpus_spec_from_dict(raw: Mapping[str, Any]) -> CorpusSpec:
    known = {f.name for f in fields(CorpusSpec)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise SpecInfeasible(f"Unknown corpus spec key(s): {', '.join(unknown)}")
    return CorpusSpec(**dict(raw))


def load_corpus_spec(path: str) -> CorpusSpec:
    with open(path) as f:
        return corpus_spec_from_dict(json.load(f))


def check_corpus_spec(spec: CorpusSpec) -> None:
    if spec.n_clusters < 2:
        raise SpecInfeasible(f"Need at least 2 clusters, got {spec.n_clusters}")
    if spec.n_examples < 4 * spec.n_clusters:
        raise SpecInfeasible(f"Need at least 4 examples per cluster: {spec.n_examples} < 4 * {spec.n_clusters}")
    if spec.noise < 0:
        raise SpecInfeasible(f"noise must be >= 0, got {spec.noise}")
    if spec.img_dim < 1 or spec.seq_len < 1:
        raise SpecInfeasible("img_dim and seq_len must be positive")
    if not 0.0 <= spec.grounded_fraction <= 1.0 or not 0.0 <= spec.topic_mass <= 1.0:
        raise SpecInfeasible("grounded_fraction and topic_mass must lie in [0, 1]")
    if spec.n_grounded and spec.attribute_values < 2:
        raise SpecInfeasible("Grounded positions need at least 2 attribute values")
    if spec.seq_len > spec.n_grounded and not 1 <= spec.topic_size <= spec.n_content:
        raise SpecInfeasible(f"vocab_size {spec.vocab_size} leaves {spec.n_content} content tokens, "
                             f"need at least topic_size={spec.topic_size}")


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    spec: CorpusSpec
    images: np.ndarray      # (D, img_dim) float64
    tokens: np.ndarray      # (D, seq_len) int64
    labels: np.ndarray      # (D,) cluster of each pair
    attributes: np.ndarray  # (D, n_grounded) attribute value per grounded position
    centroids: np.ndarray   # (K, img_dim)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, ids) -> 'SyntheticCorpus':
        ids = np.asarray(ids, dtype=np.int64)
        return SyntheticCorpus(replace(self.spec, n_examples=len(ids)), self.images[ids], self.tokens[ids], self.labels[ids],
                               self.attributes[ids], self.centroids)

    def same_as(self, other: 'SyntheticCorpus') -> bool:
        return self.spec == other.spec and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ('images', 'tokens', 'labels', 'attributes', 'centroids'))


def min_centroid_distance(centroids: np.ndarray) -> float:
    diff = centroids[:, None, :] - centroids[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    dist[np.diag_indices_from(dist)] = np.inf
    return float(dist.min())


def _centroids(spec: CorpusSpec, rng: RngStream) -> np.ndarray:
    K, d = spec.n_clusters, spec.img_dim
    # Scaled so the pairwise distance sqrt(2) * radius stays above 4 sigma.
    radius = max(1.0, 3.0 * spec.noise)
    if d >= K:
        q, _ = np.linalg.qr(rng.normal(size=(d, K)))
        centroids = radius * q.T
    else:
        for _ in range(64):
            raw = rng.normal(size=(K, d))
            centroids = radius * raw / np.linalg.norm(raw, axis=1, keepdims=True)
            if spec.noise == 0 or min_centroid_distance(centroids) >= 4 * spec.noise:
                break
        else:
            raise SpecInfeasible(f"Could not place {K} centroids in {d} dims at >= 4 sigma separation")
    if spec.noise > 0 and min_centroid_distance(centroids) < 4 * spec.noise:
        raise SpecInfeasible("Centroid separation below 4 sigma")
    return centroids


def generate_corpus(spec: CorpusSpec, rng: RngStream) -> SyntheticCorpus:
    check_corpus_spec(spec)
    D, K, g, S = spec.n_examples, spec.n_clusters, spec.n_grounded, spec.seq_len

    centroids = _centroids(spec, rng)
    labels = np.concatenate([np.repeat(np.arange(K), D // K), np.arange(D % K)])
    labels = labels[rng.permutation(D)].astype(np.int64)

    attr_embed = rng.normal(size=(max(g, 1), max(spec.attribute_values, 1), spec.img_dim))
    attr_embed *= spec.attribute_scale / np.sqrt(spec.img_dim)
    attributes = rng.integers(spec.attribute_values, size=(D, g)).astype(np.int64) if g else np.zeros((D, 0), np.int64)

    images = centroids[labels] + spec.noise * rng.normal(size=(D, spec.img_dim))
    for p in range(g):
        images += attr_embed[p, attributes[:, p]]

    tokens = np.empty((D, S), dtype=np.int64)
    for p in range(g):
        tokens[:, p] = spec.attribute_token(p, attributes[:, p])
    n_content_pos = S - g
    if n_content_pos:
        topics = np.stack([rng.choice(spec.n_content, size=spec.topic_size, replace=False)
                           for _ in range(K)]) + spec.content_offset
        on_topic = rng.random((D, n_content_pos)) < spec.topic_mass
        topic_pick = topics[labels[:, None], rng.integers(spec.topic_size, size=(D, n_content_pos))]
        background = rng.integers(spec.content_offset, spec.vocab_size, size=(D, n_content_pos))
        tokens[:, g:] = np.where(on_topic, topic_pick, background)

    logger.info(f"Generated corpus: {D} pairs, {K} clusters, {g} grounded position(s), "
                f"min centroid distance {min_centroid_distance(centroids):.3f}")
    return SyntheticCorpus(spec, images, tokens, labels, attributes, centroids)


def split_corpus(corpus: SyntheticCorpus, n_train: int) -> Tuple[SyntheticCorpus, SyntheticCorpus]:
    """First n_train pairs for training, the rest held out. The generator
    already shuffles cluster labels, so a prefix split stays balanced."""
    if not 0 < n_train < len(corpus):
        raise SpecInfeasible(f"Cannot split {len(corpus)} pairs at {n_train}")
    ids = np.arange(len(corpus))
    return corpus.take(ids[:n_train]), corpus.take(ids[n_train:])


@dataclass(frozen=True, eq=False)
class EncodedBatch:
    img: EmbeddingTable
    txt: EmbeddingTable
    img_hidden: np.ndarray
    txt_hidden: np.ndarray
    images: np.ndarray
    tokens: np.ndarray
    txt_pooled: np.ndarray
    img_norm: np.ndarray
    txt_norm: np.ndarray


@dataclass(frozen=True, eq=False)
class FusionOutput:
    itm_logits: np.ndarray
    mlm_logits: np.ndarray
    inputs: np.ndarray
    activations: np.ndarray
    queries: np.ndarray
    image_off: bool


class ToyModel:
    """Mean-pool bimodal encoder pair with projection heads and a one-layer
    fusion head. Parameters live in a flat dict of float64 arrays so
    gradients can share the same keys.

    Fusion input per candidate is [image hidden, text hidden, query], where
    query row 0 is the matching (CLS) query and row p + 1 asks for the
    token at position p.
    """

    PARAM_NAMES = ('W_img', 'b_img', 'E_tok', 'W_txt', 'b_txt', 'G_v', 'G_t',
                   'Q', 'W_f', 'b_f', 'W_itm', 'b_itm', 'W_mlm', 'b_mlm')

    def __init__(self, params: Dict[str, np.ndarray]):
        missing = set(self.PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"Missing parameter(s): {', '.join(sorted(missing))}")
        self.params = params

    @classmethod
    def initialize(cls, cfg: GritConfig, spec: CorpusSpec, rng: RngStream) -> 'ToyModel':
        h, d, H, V = cfg.hidden_dim, cfg.embed_dim, cfg.fusion_dim, spec.vocab_size

        def dense(fan_in, fan_out):
            return rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)

        params = {
            'W_img': dense(spec.img_dim, h), 'b_img': np.zeros(h),
            'E_tok': rng.normal(size=(V, h)),
            'W_txt': dense(h, h), 'b_txt': np.zeros(h),
            'G_v': dense(h, d), 'G_t': dense(h, d),
            'Q': rng.normal(size=(spec.seq_len + 1, h)),
            'W_f': dense(3 * h, H), 'b_f': np.zeros(H),
            'W_itm': dense(H, 2), 'b_itm': np.zeros(2),
            'W_mlm': dense(H, V), 'b_mlm': np.zeros(V),
        }
        model = cls(params)
        if model.parameter_count >= MAX_PARAMETERS:
            raise SpecInfeasible(f"Toy model has {model.parameter_count} parameters, limit is {MAX_PARAMETERS}")
        return model

    @property
    def hidden_dim(self) -> int:
        return self.params['W_img'].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.params['E_tok'].shape[0]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self) -> 'ToyModel':
        return ToyModel({k: v.copy() for k, v in self.params.items()})

    def sgd_step(self, grads: Dict[str, np.ndarray], learning_rate: float) -> None:
        if learning_rate == 0:
            return
        for k, g in grads.items():
            self.params[k] -= learning_rate * g


def token_counts(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """(rows x vocab) occurrence counts of every token id in each row."""
    n = tokens.shape[0]
    flat = (np.arange(n)[:, None] * vocab_size + tokens).ravel()
    return np.bincount(flat, minlength=n * vocab_size).reshape(n, vocab_size).astype(np.float64)


def scatter_rows(index: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """out[r] = sum of values[k] over every k with index[k] == r."""
    onehot = np.zeros((n_rows, len(index)))
    onehot[index, np.arange(len(index))] = 1.0
    return onehot @ values


def text_hidden(model: ToyModel, tokens: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p = model.params
    pooled = p['E_tok'][tokens].mean(axis=1)
    return pooled @ p['W_txt'] + p['b_txt'], pooled


def text_hidden_backward(model: ToyModel, tokens: np.ndarray, pooled: np.ndarray, d_hidden: np.ndarray,
                         grads: Dict[str, np.ndarray]) -> None:
    p = model.params
    grads['W_txt'] += pooled.T @ d_hidden
    grads['b_txt'] += d_hidden.sum(axis=0)
    d_pooled = d_hidden @ p['W_txt'].T / tokens.shape[1]
    grads['E_tok'] += token_counts(tokens, p['E_tok'].shape[0]).T @ d_pooled


def encode_batch(model: ToyModel, images: np.ndarray, tokens: np.ndarray) -> EncodedBatch:
    """Projected unit-norm features for both modalities plus the hidden
    states the fusion head consumes."""
    p = model.params
    images = np.asarray(images, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    h_v = images @ p['W_img'] + p['b_img']
    h_t, pooled = text_hidden(model, tokens)
    z_v, z_t = h_v @ p['G_v'], h_t @ p['G_t']
    n_v = np.maximum(np.linalg.norm(z_v, axis=1, keepdims=True), 1e-12)
    n_t = np.maximum(np.linalg.norm(z_t, axis=1, keepdims=True), 1e-12)
    return EncodedBatch(EmbeddingTable(z_v / n_v), EmbeddingTable(z_t / n_t), h_v, h_t,
                        images, tokens, pooled, n_v, n_t)


def _normalize_backward(unit: np.ndarray, norm: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    return (d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)) / norm


def encode_backward(model: ToyModel, enc: EncodedBatch, grads: Dict[str, np.ndarray],
                    d_img: Optional[np.ndarray] = None, d_txt: Optional[np.ndarray] = None,
                    d_img_hidden: Optional[np.ndarray] = None, d_txt_hidden: Optional[np.ndarray] = None) -> None:
    """Accumulate parameter gradients given upstream gradients on the
    normalized features and/or the hidden states."""
    p = model.params
    dh_v = np.zeros_like(enc.img_hidden) if d_img_hidden is None else d_img_hidden.copy()
    dh_t = np.zeros_like(enc.txt_hidden) if d_txt_hidden is None else d_txt_hidden.copy()
    if d_img is not None:
        dz_v = _normalize_backward(enc.img.data, enc.img_norm, d_img)
        grads['G_v'] += enc.img_hidden.T @ dz_v
        dh_v += dz_v @ p['G_v'].T
    if d_txt is not None:
        dz_t = _normalize_backward(enc.txt.data, enc.txt_norm, d_txt)
        grads['G_t'] += enc.txt_hidden.T @ dz_t
        dh_t += dz_t @ p['G_t'].T
    grads['W_img'] += enc.images.T @ dh_v
    grads['b_img'] += dh_v.sum(axis=0)
    text_hidden_backward(model, enc.tokens, enc.txt_pooled, dh_t, grads)


def fuse(model: ToyModel, img_hidden: np.ndarray, txt_hidden: np.ndarray, queries=None,
         image_off: bool = False) -> FusionOutput:
    """Fusion head over aligned candidate rows. `queries` holds 0 for the
    matching query or p + 1 to predict position p; `image_off` feeds zeros
    in place of the image hidden state."""
    p = model.params
    img_hidden = np.asarray(img_hidden, dtype=np.float64)
    n = len(txt_hidden)
    queries = np.zeros(n, dtype=np.int64) if queries is None else np.asarray(queries, dtype=np.int64)
    a = np.zeros_like(img_hidden) if image_off else img_hidden
    c = np.hstack([a, txt_hidden, p['Q'][queries]])
    u = np.tanh(c @ p['W_f'] + p['b_f'])
    return FusionOutput(u @ p['W_itm'] + p['b_itm'], u @ p['W_mlm'] + p['b_mlm'], c, u, queries, image_off)


def fuse_backward(model: ToyModel, out: FusionOutput, grads: Dict[str, np.ndarray],
                  d_itm: Optional[np.ndarray] = None,
                  d_mlm: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Accumulate fusion-head gradients; returns the gradients w.r.t. the
    image and text hidden inputs."""
    p = model.params
    h = model.hidden_dim
    du = np.zeros_like(out.activations)
    if d_itm is not None:
        grads['W_itm'] += out.activations.T @ d_itm
        grads['b_itm'] += d_itm.sum(axis=0)
        du += d_itm @ p['W_itm'].T
    if d_mlm is not None:
        grads['W_mlm'] += out.activations.T @ d_mlm
        grads['b_mlm'] += d_mlm.sum(axis=0)
        du += d_mlm @ p['W_mlm'].T
    d_pre = du * (1.0 - out.activations ** 2)
    grads['W_f'] += out.inputs.T @ d_pre
    grads['b_f'] += d_pre.sum(axis=0)
    dc = d_pre @ p['W_f'].T
    grads['Q'] += scatter_rows(out.queries, dc[:, 2 * h:], p['Q'].shape[0])
    d_img_hidden = np.zeros_like(dc[:, :h]) if out.image_off else dc[:, :h]
    return d_img_hidden, dc[:, h:2 * h]


def corpus_spec_to_dict(spec: CorpusSpec) -> Dict[str, Any]:
    return asdict(spec)
