import logging
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.core import RngStream
from services.grit import EpochSchedule
from services.objectives import HardNegativeAssignment, MaskedBatch, mask_tokens
from services.similarity import TableLike, pairwise_scores
from services.toymodel import SyntheticCorpus, ToyModel, encode_batch, fuse, text_hidden

logger = logging.getLogger(__name__)

DEFAULT_MASK_GRID = (0.15, 0.35, 0.5, 0.75)
DEFAULT_RETRIEVAL_KS = (1, 5, 10)
NEGATIVE_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


class EmptySlice(ValueError):
    pass


class InvalidK(ValueError):
    pass


@dataclass(frozen=True)
class UoVRow:
    mask_prob: float
    acc1: float
    acc5: float
    acc1_wo_image: float
    acc5_wo_image: float
    uov1: float
    uov5: float
    n_masked: int
    mask_hash: str


@dataclass(frozen=True)
class UoVReport:
    rows: Tuple[UoVRow, ...]

    def at(self, mask_prob: float) -> UoVRow:
        for row in self.rows:
            if np.isclose(row.mask_prob, mask_prob):
                return row
        raise KeyError(mask_prob)

    def records(self) -> List[Dict]:
        return [asdict(r) for r in self.rows]


@dataclass(frozen=True)
class RetrievalReport:
    ks: Tuple[int, ...]
    i2t: Tuple[float, ...]
    t2i: Tuple[float, ...]

    def as_dict(self) -> Dict[str, float]:
        out = {}
        for k, a, b in zip(self.ks, self.i2t, self.t2i):
            out[f'r{k}_i2t'] = a
            out[f'r{k}_t2i'] = b
        return out


@dataclass(frozen=True)
class HardnessReport:
    mean_negative_similarity: float
    negative_quantiles: Tuple[float, ...]
    same_cluster_negative_fraction: float
    mean_intra_batch_similarity: float
    n_negatives: int
    n_batches: int


def topk_accuracy(logits: np.ndarray, targets: np.ndarray, k: int) -> float:
    """Share of rows whose target is among the k highest logits. Ties rank
    the lower token id first. No rows means accuracy 0."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        return 0.0
    top = np.argsort(-logits, axis=1, kind='stable')[:, :k]
    return float(np.mean(np.any(top == targets[:, None], axis=1)))


def masked_token_logits(model: ToyModel, corpus: SyntheticCorpus, masked: MaskedBatch,
                        image_off: bool = False) -> np.ndarray:
    enc = encode_batch(model, corpus.images, corpus.tokens)
    h_masked, _ = text_hidden(model, masked.tokens)
    rows, pos = np.nonzero(masked.mask)
    return fuse(model, enc.img_hidden[rows], h_masked[rows], pos + 1, image_off=image_off).mlm_logits


def uov(model: ToyModel, corpus: SyntheticCorpus, mask_grid: Sequence[float], rng: RngStream) -> UoVReport:
    """Usage of vision: masked-token accuracy with the image pathway minus
    accuracy with it zeroed. Each grid point draws one mask realization
    (from its own child stream) and scores both passes on it."""
    if len(corpus) == 0:
        raise EmptySlice("UoV needs a non-empty evaluation slice")
    vocab_size = model.vocab_size
    rows = []
    for i, mask_prob in enumerate(mask_grid):
        masked = mask_tokens(corpus.tokens, mask_prob, rng.child(i), vocab_size)
        with_image = masked_token_logits(model, corpus, masked, image_off=False)
        without_image = masked_token_logits(model, corpus, masked, image_off=True)
        acc1, acc5 = topk_accuracy(with_image, masked.originals, 1), topk_accuracy(with_image, masked.originals, 5)
        wo1, wo5 = (topk_accuracy(without_image, masked.originals, 1),
                    topk_accuracy(without_image, masked.originals, 5))
        rows.append(UoVRow(float(mask_prob), acc1, acc5, wo1, wo5, acc1 - wo1, acc5 - wo5,
                           masked.n_masked, masked.fingerprint()))
        logger.debug(f"UoV at mask_prob={mask_prob}: acc@1={acc1:.4f}, w/o image={wo1:.4f}")
    return UoVReport(tuple(rows))


def _true_pair_ranks(S: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row, ordering by score
    descending and then by index ascending."""
    diag = np.diag(S)[:, None]
    ahead = (S > diag).sum(axis=1)
    tied_before = np.tril(S == diag, k=-1).sum(axis=1)
    return ahead + tied_before


def retrieval_from_features(img: TableLike, txt: TableLike, ks: Sequence[int]) -> RetrievalReport:
    S = pairwise_scores(img, txt).data
    n = S.shape[0]
    if S.shape[0] != S.shape[1]:
        raise EmptySlice(f"Retrieval needs paired tables, got {S.shape}")
    bad = [k for k in ks if not 1 <= k <= n]
    if bad:
        raise InvalidK(f"k must lie in [1, {n}], got {bad}")
    i2t_rank, t2i_rank = _true_pair_ranks(S), _true_pair_ranks(S.T)
    ks = tuple(int(k) for k in ks)
    return RetrievalReport(ks, tuple(float(np.mean(i2t_rank < k)) for k in ks),
                           tuple(float(np.mean(t2i_rank < k)) for k in ks))


def retrieval_at_k(model: ToyModel, corpus: SyntheticCorpus, ks: Sequence[int]) -> RetrievalReport:
    if len(corpus) == 0:
        raise EmptySlice("Retrieval needs a non-empty evaluation slice")
    enc = encode_batch(model, corpus.images, corpus.tokens)
    return retrieval_from_features(enc.img, enc.txt, ks)


def hardness_stats(schedule: EpochSchedule, features: Tuple[TableLike, TableLike],
                   assignments: Sequence[Optional[HardNegativeAssignment]],
                   labels: Optional[np.ndarray] = None) -> HardnessReport:
    """Similarity of sampled ITM negatives to their anchors and mean
    cross-modal similarity between distinct batch members. `features` are
    full tables indexed by example id; `assignments` line up with
    schedule.batches (None for batches that never trained)."""
    img, txt = np.asarray(features[0], dtype=np.float64), np.asarray(features[1], dtype=np.float64)
    negatives, same_cluster, intra = [], [], []
    for ids, assignment in zip(schedule.batches, assignments):
        n = len(ids)
        if assignment is None or n < 2:
            continue
        S = img[ids] @ txt[ids].T
        intra.append((S.sum() - np.trace(S)) / (n * (n - 1)))
        rows = np.arange(n)
        neg_txt, neg_img = assignment.neg_text_for_image, assignment.neg_image_for_text
        negatives.append(S[rows, neg_txt])
        negatives.append(S[neg_img, rows])
        if labels is not None:
            batch_labels = np.asarray(labels)[ids]
            same_cluster.append(batch_labels == batch_labels[neg_txt])
            same_cluster.append(batch_labels[neg_img] == batch_labels)

    if not negatives:
        nan = float('nan')
        return HardnessReport(nan, tuple(nan for _ in NEGATIVE_QUANTILES), nan, nan, 0, 0)
    neg = np.concatenate(negatives)
    return HardnessReport(
        mean_negative_similarity=float(neg.mean()),
        negative_quantiles=tuple(float(q) for q in np.quantile(neg, NEGATIVE_QUANTILES)),
        same_cluster_negative_fraction=float(np.concatenate(same_cluster).mean()) if same_cluster else float('nan'),
        mean_intra_batch_similarity=float(np.mean(intra)),
        n_negatives=len(neg),
        n_batches=len(intra),
    )
