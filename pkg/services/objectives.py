import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax, rel_entr, softmax

from services.core import RngStream
from services.similarity import DimMismatch, DistributionMatrix, EmbeddingTable, pairwise_scores

logger = logging.getLogger(__name__)

MASK_TOKEN = 0
FIRST_REGULAR_TOKEN = 1
DEGENERATE_MASS = 1e-12
ROW_SUM_TOL = 1e-6


class ShapeMismatch(ValueError):
    pass


class RowNotNormalized(ValueError):
    pass


ArrayLike = Union[np.ndarray, EmbeddingTable, DistributionMatrix]


def _arr(x: ArrayLike) -> np.ndarray:
    if isinstance(x, DistributionMatrix):
        return x.data
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ItcResult:
    loss: float
    p_v2t: DistributionMatrix
    p_t2v: DistributionMatrix
    grad_img: np.ndarray
    grad_txt: np.ndarray
    grad_logits: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ConsistencyResult:
    loss: float
    grad_logits: np.ndarray
    grad_img: Optional[np.ndarray] = None
    grad_txt: Optional[np.ndarray] = None

    def with_table_grads(self, img: ArrayLike, txt: ArrayLike, tau: float) -> 'ConsistencyResult':
        gi, gt = logits_to_table_grads(self.grad_logits, img, txt, tau)
        return ConsistencyResult(self.loss, self.grad_logits, gi, gt)


@dataclass(frozen=True, eq=False)
class ItmResult:
    loss: float
    grad_pos: np.ndarray
    grad_neg: np.ndarray


@dataclass(frozen=True, eq=False)
class MlmResult:
    loss: float
    grad: np.ndarray


@dataclass(frozen=True, eq=False)
class HardNegativeAssignment:
    neg_text_for_image: np.ndarray
    neg_image_for_text: np.ndarray

    def __post_init__(self):
        own = np.arange(len(self.neg_text_for_image))
        if np.any(self.neg_text_for_image == own) or np.any(self.neg_image_for_text == own):
            raise ValueError("Hard negative assignment contains a positive pair")


@dataclass(frozen=True, eq=False)
class MaskedBatch:
    tokens: np.ndarray           # corrupted grid fed to the model
    mask: np.ndarray             # True where a position is a prediction target
    originals: np.ndarray        # original tokens at mask positions, row-major order
    original_tokens: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mask).tobytes())
        h.update(np.ascontiguousarray(self.tokens).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class LossComponents:
    itm: ItmResult
    mlm: MlmResult
    itc: Optional[ItcResult] = None
    cons: Optional[ConsistencyResult] = None


@dataclass(frozen=True, eq=False)
class LossBundle:
    itc: float
    cons: float
    itm: float
    mlm: float
    total: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)


def logits_to_table_grads(grad_logits: np.ndarray, img: ArrayLike, txt: ArrayLike,
                          tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Chain a gradient on Z = (img @ txt.T) / tau back to both tables."""
    g = grad_logits / tau
    return g @ _arr(txt), g.T @ _arr(img)


def itc_loss(img: ArrayLike, txt: ArrayLike, tau: float) -> ItcResult:
    """Symmetric in-batch contrastive loss with the diagonal as ground truth,
    averaged over examples. Also returns both distributions so consistency
    and hard-negative sampling can reuse them."""
    a, b = _arr(img), _arr(txt)
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"Image dim {a.shape[1]} != text dim {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"ITC needs aligned pairs, got {a.shape[0]} images and {b.shape[0]} texts")
    n = a.shape[0]
    if n < 2:
        raise ShapeMismatch(f"ITC needs at least 2 pairs, got {n}")

    Z = pairwise_scores(a, b).data / tau
    log_v2t = log_softmax(Z, axis=1)
    log_t2v = log_softmax(Z.T, axis=1)
    loss = -0.5 * (np.mean(np.diag(log_v2t)) + np.mean(np.diag(log_t2v)))

    p_v2t, p_t2v = np.exp(log_v2t), np.exp(log_t2v)
    eye = np.eye(n)
    grad_logits = ((p_v2t - eye) + (p_t2v - eye).T) / (2 * n)
    grad_img, grad_txt = logits_to_table_grads(grad_logits, a, b, tau)
    return ItcResult(float(loss), DistributionMatrix('v2t', p_v2t), DistributionMatrix('t2v', p_t2v),
                     grad_img, grad_txt, grad_logits)


def kl_divergence(target: np.ndarray, prediction: np.ndarray) -> np.ndarray:
    """Row-wise KL(target || prediction), with 0 * log 0 = 0."""
    return rel_entr(np.atleast_2d(target), np.atleast_2d(prediction)).sum(axis=1)


def _check_rows(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise RowNotNormalized(f"{name} rows must be probability vectors")


def consistency_loss(p_v2t: ArrayLike, p_t2v: ArrayLike,
                     targets: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ConsistencyResult:
    """Pulls each pair's image->text and text->image rows together.

    Both KL terms use a stop-gradient copy of the opposite direction as the
    target. `targets` overrides those copies; they are treated as constants
    either way, so the returned gradient (w.r.t. the v2t-oriented logits
    Z = S / tau) only flows through the prediction side of each KL.
    """
    P, Q = _arr(p_v2t), _arr(p_t2v)
    if P.shape != Q.shape or P.shape[0] != P.shape[1]:
        raise ShapeMismatch(f"Consistency needs two square distributions of the same shape, got {P.shape}, {Q.shape}")
    _check_rows(P, 'p_v2t')
    _check_rows(Q, 'p_t2v')
    target_v2t, target_t2v = (P.copy(), Q.copy()) if targets is None else (_arr(targets[0]), _arr(targets[1]))

    n = P.shape[0]
    loss = 0.5 * np.mean(kl_divergence(target_v2t, Q) + kl_divergence(target_t2v, P))
    # d KL(t || softmax(z)) / dz = softmax(z) * sum(t) - t
    grad_v2t_rows = P * target_t2v.sum(axis=1, keepdims=True) - target_t2v
    grad_t2v_rows = Q * target_v2t.sum(axis=1, keepdims=True) - target_v2t
    grad_logits = (grad_v2t_rows + grad_t2v_rows.T) / (2 * n)
    return ConsistencyResult(float(loss), grad_logits)


def sample_masked_rows(weights: np.ndarray, own: np.ndarray, rng: RngStream) -> np.ndarray:
    """Draw one column per row with probability proportional to `weights`,
    never picking the row's own column. Rows whose remaining mass is below
    1e-12 fall back to uniform over the other columns."""
    w = np.maximum(np.array(weights, dtype=np.float64), 0.0)
    rows = np.arange(w.shape[0])
    w[rows, own] = 0.0
    total = w.sum(axis=1)
    degenerate = total < DEGENERATE_MASS
    if np.any(degenerate):
        logger.warning(f"{int(degenerate.sum())} degenerate negative row(s), sampling uniformly instead")
        w[degenerate] = 1.0
        w[rows[degenerate], own[degenerate]] = 0.0
        total = w.sum(axis=1)

    cdf = np.cumsum(w, axis=1)
    u = rng.random(w.shape[0]) * total
    picked = (cdf <= u[:, None]).sum(axis=1)
    # Guards against u rounding up to the row total.
    last_positive = w.shape[1] - 1 - np.argmax(w[:, ::-1] > 0, axis=1)
    return np.minimum(picked, last_positive)


def _masked_argmax_rows(weights: np.ndarray) -> np.ndarray:
    w = np.array(weights, dtype=np.float64)
    np.fill_diagonal(w, -np.inf)
    return np.argmax(w, axis=1)


def select_hard_negatives(p_v2t: ArrayLike, p_t2v: ArrayLike, rng: RngStream,
                          mode: str = 'multinomial') -> HardNegativeAssignment:
    """In-batch negatives for ITM: a text for every image and an image for
    every text, drawn from the current batch's contrastive distributions.
    mode='argmax' takes the hardest one, mode='random' ignores similarity."""
    P, Q = _arr(p_v2t), _arr(p_t2v)
    n = P.shape[0]
    if P.shape != (n, n) or Q.shape != (n, n):
        raise ShapeMismatch(f"Hard negatives need square N x N distributions, got {P.shape}, {Q.shape}")
    if n < 2:
        raise ShapeMismatch("Hard negatives need at least 2 pairs")

    own = np.arange(n)
    if mode == 'multinomial':
        neg_txt = sample_masked_rows(P, own, rng)
        neg_img = sample_masked_rows(Q, own, rng)
    elif mode == 'argmax':
        neg_txt = _masked_argmax_rows(P)
        neg_img = _masked_argmax_rows(Q)
    elif mode == 'random':
        flat = np.ones((n, n))
        neg_txt = sample_masked_rows(flat, own, rng)
        neg_img = sample_masked_rows(flat, own, rng)
    else:
        raise ValueError(f"Unknown negatives mode {mode!r}")
    return HardNegativeAssignment(neg_txt.astype(np.int64), neg_img.astype(np.int64))


def itm_loss(fusion_scores_pos: np.ndarray, fusion_scores_neg: np.ndarray) -> ItmResult:
    """Matched / not-matched cross-entropy over the N positives and 2N
    negatives, all weighted equally. Inputs are 2-way logits with column 1
    meaning "match"; gradients are w.r.t. those logits."""
    pos, neg = np.atleast_2d(_arr(fusion_scores_pos)), np.atleast_2d(_arr(fusion_scores_neg))
    if pos.shape[1] != 2 or neg.shape[1] != 2:
        raise ShapeMismatch(f"ITM expects 2-way logits, got {pos.shape} and {neg.shape}")
    logits = np.vstack([pos, neg])
    labels = np.concatenate([np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)])
    k = len(labels)
    logp = log_softmax(logits, axis=1)
    loss = -np.mean(logp[np.arange(k), labels])
    grad = np.exp(logp)
    grad[np.arange(k), labels] -= 1.0
    grad /= k
    return ItmResult(float(loss), grad[:len(pos)], grad[len(pos):])


def mask_tokens(tokens: np.ndarray, mask_prob: float, rng: RngStream, vocab_size: int) -> MaskedBatch:
    """Pick each position independently with probability mask_prob; of the
    picked ones 80% become MASK, 10% a random regular token and 10% stay.
    The three draw grids are always consumed, so the stream position after
    the call doesn't depend on mask_prob."""
    original = np.asarray(tokens, dtype=np.int64)
    picked = rng.random(original.shape) < mask_prob
    corruption = rng.random(original.shape)
    replacement = rng.integers(FIRST_REGULAR_TOKEN, vocab_size, size=original.shape)

    corrupted = original.copy()
    corrupted[picked & (corruption < 0.8)] = MASK_TOKEN
    swap = picked & (corruption >= 0.8) & (corruption < 0.9)
    corrupted[swap] = replacement[swap]
    return MaskedBatch(corrupted, picked, original[picked], original)


def mlm_loss(predictions: np.ndarray, originals: np.ndarray) -> MlmResult:
    """Mean cross-entropy over masked positions. `predictions` are vocabulary
    logits, one row per masked position; no masked positions gives a zero
    loss and zero gradient."""
    logits = _arr(predictions)
    originals = np.asarray(originals, dtype=np.int64)
    k = len(originals)
    if k == 0:
        return MlmResult(0.0, np.zeros_like(logits))
    if logits.shape[0] != k:
        raise ShapeMismatch(f"{logits.shape[0]} prediction rows for {k} masked positions")
    logp = log_softmax(logits, axis=1)
    loss = -np.mean(logp[np.arange(k), originals])
    grad = np.exp(logp)
    grad[np.arange(k), originals] -= 1.0
    grad /= k
    return MlmResult(float(loss), grad)


def total_loss(components: LossComponents, lambda_cons: float) -> LossBundle:
    """L = ITM + MLM + ITC + lambda_cons * consistency, with the gradients of
    terms that share an input summed into one entry."""
    itc = components.itc
    cons = components.cons
    itc_value = itc.loss if itc is not None else 0.0
    cons_value = cons.loss if cons is not None else 0.0
    total = components.itm.loss + components.mlm.loss + itc_value + lambda_cons * cons_value

    grads: Dict[str, np.ndarray] = {
        'itm_pos': components.itm.grad_pos,
        'itm_neg': components.itm.grad_neg,
        'mlm': components.mlm.grad,
    }
    if itc is not None:
        grads['img'] = itc.grad_img.copy()
        grads['txt'] = itc.grad_txt.copy()
    if cons is not None and lambda_cons:
        if cons.grad_img is None:
            raise ValueError("Consistency term needs table gradients; call with_table_grads() first")
        grads['img'] = grads.get('img', 0.0) + lambda_cons * cons.grad_img
        grads['txt'] = grads.get('txt', 0.0) + lambda_cons * cons.grad_txt

    return LossBundle(itc=itc_value, cons=cons_value, itm=components.itm.loss, mlm=components.mlm.loss,
                      total=float(total), grads=grads)


class FeatureQueue:
    """FIFO store of previously seen projected features, used only as extra
    ITC negatives for the queue baseline."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.img = np.empty((0, dim), dtype=np.float64)
        self.txt = np.empty((0, dim), dtype=np.float64)

    def enqueue(self, img: ArrayLike, txt: ArrayLike) -> None:
        if self.capacity == 0:
            return
        self.img = np.vstack([self.img, _arr(img)])[-self.capacity:]
        self.txt = np.vstack([self.txt, _arr(txt)])[-self.capacity:]

    def __len__(self) -> int:
        return len(self.img)


def queue_extended_distributions(img: ArrayLike, txt: ArrayLike, queue: FeatureQueue, tau: float,
                                 update: bool = True) -> Tuple[DistributionMatrix, DistributionMatrix]:
    """Contrastive distributions whose denominators range over the batch
    plus the queue; queue rows only ever act as negatives."""
    a, b = _arr(img), _arr(txt)
    p_v2t = softmax(a @ np.vstack([b, queue.txt]).T / tau, axis=1)
    p_t2v = softmax(b @ np.vstack([a, queue.img]).T / tau, axis=1)
    if update:
        queue.enqueue(a, b)
    return DistributionMatrix('v2t', p_v2t), DistributionMatrix('t2v', p_t2v)


def queue_itc_loss(img: ArrayLike, txt: ArrayLike, queue: FeatureQueue, tau: float,
                   update: bool = True) -> ItcResult:
    """ITC over the queue-extended distributions. Queue features are
    constants; gradients go to the batch tables only."""
    a, b = _arr(img), _arr(txt)
    n = a.shape[0]
    if a.shape != b.shape:
        raise ShapeMismatch(f"ITC needs aligned pairs, got {a.shape} and {b.shape}")
    txt_all = np.vstack([b, queue.txt])
    img_all = np.vstack([a, queue.img])
    log_v2t = log_softmax(a @ txt_all.T / tau, axis=1)
    log_t2v = log_softmax(b @ img_all.T / tau, axis=1)
    rows = np.arange(n)
    loss = -0.5 * (np.mean(log_v2t[rows, rows]) + np.mean(log_t2v[rows, rows]))

    g_v2t = np.exp(log_v2t)
    g_v2t[rows, rows] -= 1.0
    g_v2t /= 2 * n
    g_t2v = np.exp(log_t2v)
    g_t2v[rows, rows] -= 1.0
    g_t2v /= 2 * n
    grad_img = (g_v2t @ txt_all + g_t2v[:, :n].T @ b) / tau
    grad_txt = (g_t2v @ img_all + g_v2t[:, :n].T @ a) / tau

    result = ItcResult(float(loss), DistributionMatrix('v2t', np.exp(log_v2t)),
                       DistributionMatrix('t2v', np.exp(log_t2v)), grad_img, grad_txt)
    if update:
        queue.enqueue(a, b)
    return result
