import time
import logging
from contextlib import nullcontext
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from services.core import GritConfig, RngStream, StreamLabel, ValidatedConfig, derive_stream
from services.evaluation import hardness_stats
from services.grit import EpochSchedule, GritScheduler, first_epoch_schedule, naive_schedule
from services.objectives import (FeatureQueue, HardNegativeAssignment, LossBundle, LossComponents, MaskedBatch,
                                 consistency_loss, itc_loss, itm_loss, mask_tokens, mlm_loss, queue_itc_loss,
                                 select_hard_negatives, total_loss)
from services.toymodel import (CorpusSpec, EncodedBatch, SyntheticCorpus, ToyModel, encode_backward, encode_batch,
                               fuse, fuse_backward, scatter_rows, text_hidden, text_hidden_backward)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('epoch', 'steps', 'itc', 'cons', 'itm', 'mlm', 'total', 'mean_intra_batch_similarity',
                  'mean_negative_similarity', 'same_cluster_negative_fraction')
TIMING_COLUMNS = ('epoch', 'wall_seconds', 'schedule_seconds', 'encode_seconds')


class ScheduleMismatch(ValueError):
    pass


@dataclass
class TrainState:
    model: ToyModel
    cfg: ValidatedConfig
    epoch: int = 0
    steps: int = 0
    feature_queue: Optional[FeatureQueue] = None
    pending_schedule: Optional[EpochSchedule] = None


StepHook = Callable[[TrainState], None]


@dataclass(frozen=True, eq=False)
class StepResult:
    bundle: LossBundle
    grads: Dict[str, np.ndarray]
    encoded: EncodedBatch
    assignment: HardNegativeAssignment
    masked: MaskedBatch


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    steps: int
    itc: float
    cons: float
    itm: float
    mlm: float
    total: float
    mean_intra_batch_similarity: float
    mean_negative_similarity: float
    same_cluster_negative_fraction: float
    wall_seconds: float = 0.0
    schedule_seconds: float = 0.0
    encode_seconds: float = 0.0

    def metric_row(self) -> Dict:
        row = asdict(self)
        return {k: row[k] for k in METRIC_COLUMNS}

    def timing_row(self) -> Dict:
        row = asdict(self)
        return {k: row[k] for k in TIMING_COLUMNS}


def init_train_state(cfg: ValidatedConfig, corpus_spec: CorpusSpec,
                     initial_schedule: Optional[EpochSchedule] = None) -> TrainState:
    """Fresh model plus the epoch-0 schedule: a uniform shuffle, or a
    preloaded schedule (warm start) when one is given."""
    seed = cfg.config.master_seed
    model = ToyModel.initialize(cfg.config, corpus_spec, derive_stream(seed, StreamLabel.WEIGHT_INIT))
    if initial_schedule is None:
        schedule = first_epoch_schedule(cfg.D, cfg.N, derive_stream(seed, StreamLabel.EXAMPLE_SHUFFLE, 0))
    else:
        _check_schedule(initial_schedule, cfg.D)
        schedule = initial_schedule
    queue = FeatureQueue(cfg.config.itc_queue_size, cfg.config.embed_dim) if cfg.config.itc_queue_size else None
    logger.info(f"Initialized toy model with {model.parameter_count} parameters, "
                f"epoch-0 schedule from {schedule.provenance.value}")
    return TrainState(model=model, cfg=cfg, feature_queue=queue, pending_schedule=schedule)


def _check_schedule(schedule: EpochSchedule, n_examples: int) -> None:
    flat = schedule.flat()
    if len(flat) != n_examples or not schedule.is_permutation():
        raise ScheduleMismatch(f"Schedule covering {len(flat)} ids does not match a corpus of {n_examples} pairs")


def batch_losses(model: ToyModel, images: np.ndarray, tokens: np.ndarray, cfg: GritConfig,
                 rng_mask: RngStream, rng_neg: RngStream,
                 feature_queue: Optional[FeatureQueue] = None) -> StepResult:
    """Forward pass, all four objectives and the parameter gradients for one
    batch. Pure apart from the FIFO feature queue, which is refreshed when
    given."""
    enc = encode_batch(model, images, tokens)
    n = len(enc.img)
    tau = cfg.temperature

    in_batch = itc_loss(enc.img, enc.txt, tau)
    itc = cons = None
    if cfg.use_itc:
        itc = queue_itc_loss(enc.img, enc.txt, feature_queue, tau) if feature_queue is not None else in_batch
        cons = consistency_loss(in_batch.p_v2t, in_batch.p_t2v).with_table_grads(enc.img, enc.txt, tau)
    assignment = select_hard_negatives(in_batch.p_v2t, in_batch.p_t2v, rng_neg, mode=cfg.negatives)

    # ITM candidates: N positives, then a negative text per image, then a negative image per text.
    rows = np.arange(n)
    itm_img = np.concatenate([rows, rows, assignment.neg_image_for_text])
    itm_txt = np.concatenate([rows, assignment.neg_text_for_image, rows])
    itm_out = fuse(model, enc.img_hidden[itm_img], enc.txt_hidden[itm_txt])
    itm = itm_loss(itm_out.itm_logits[:n], itm_out.itm_logits[n:])

    masked = mask_tokens(tokens, cfg.mask_prob, rng_mask, model.vocab_size)
    mlm_rows, mlm_pos = np.nonzero(masked.mask)
    h_masked, pooled_masked = text_hidden(model, masked.tokens)
    mlm_out = fuse(model, enc.img_hidden[mlm_rows], h_masked[mlm_rows], mlm_pos + 1)
    mlm = mlm_loss(mlm_out.mlm_logits, masked.originals)

    bundle = total_loss(LossComponents(itm=itm, mlm=mlm, itc=itc, cons=cons), cfg.lambda_cons)

    grads = model.zero_grads()
    d_a, d_b = fuse_backward(model, itm_out, grads, d_itm=np.vstack([bundle.grads['itm_pos'], bundle.grads['itm_neg']]))
    d_img_hidden = scatter_rows(itm_img, d_a, n)
    d_txt_hidden = scatter_rows(itm_txt, d_b, n)
    if len(mlm_rows):
        d_a, d_b = fuse_backward(model, mlm_out, grads, d_mlm=bundle.grads['mlm'])
        d_img_hidden += scatter_rows(mlm_rows, d_a, n)
        d_masked = scatter_rows(mlm_rows, d_b, n)
        text_hidden_backward(model, masked.tokens, pooled_masked, d_masked, grads)
    encode_backward(model, enc, grads, d_img=bundle.grads.get('img'), d_txt=bundle.grads.get('txt'),
                    d_img_hidden=d_img_hidden, d_txt_hidden=d_txt_hidden)
    return StepResult(bundle, grads, enc, assignment, masked)


def train_epoch(state: TrainState, corpus: SyntheticCorpus, schedule: EpochSchedule,
                cfg: Optional[ValidatedConfig] = None,
                on_step: Optional[StepHook] = None) -> Tuple[TrainState, EpochSchedule, EpochMetrics]:
    """One pass over `schedule`: per batch encode, compute the losses, take
    an SGD step and hand the batch's pre-update features to the next-epoch
    scheduler. Returns the updated state, the complete schedule for the next
    epoch and this epoch's metrics.

    `on_step` is called with the state after every SGD step (state.steps
    already counts it)."""
    cfg = cfg or state.cfg
    conf = cfg.config
    seed = conf.master_seed
    epoch = state.epoch
    _check_schedule(schedule, len(corpus))
    if len(corpus) != cfg.D:
        raise ScheduleMismatch(f"Corpus has {len(corpus)} pairs, config expects dataset_size={cfg.D}")

    started = time.perf_counter()
    feats_img = np.zeros((cfg.D, conf.embed_dim))
    feats_txt = np.zeros((cfg.D, conf.embed_dim))
    assignments: List[Optional[HardNegativeAssignment]] = []
    sums = dict(itc=0.0, cons=0.0, itm=0.0, mlm=0.0, total=0.0)
    steps = 0
    encode_seconds = 0.0

    with GritScheduler(cfg, epoch + 1) if conf.scheduler == 'grit' else nullcontext() as scheduler:
        for b, ids in enumerate(schedule.batches):
            images, tokens = corpus.images[ids], corpus.tokens[ids]
            if len(ids) < 2:
                logger.warning(f"Epoch {epoch}: batch {b} has {len(ids)} example(s), collecting without a step")
                enc = encode_batch(state.model, images, tokens)
                img, txt = enc.img.data, enc.txt.data
                assignments.append(None)
            else:
                result = batch_losses(state.model, images, tokens, conf,
                                      derive_stream(seed, StreamLabel.MASKING, epoch, b),
                                      derive_stream(seed, StreamLabel.NEGATIVE_SAMPLING, epoch, b),
                                      state.feature_queue)
                img, txt = result.encoded.img.data, result.encoded.txt.data
                assignments.append(result.assignment)
                for key in sums:
                    sums[key] += getattr(result.bundle, key)
                state.model.sgd_step(result.grads, conf.learning_rate)
                steps += 1
                state.steps += 1
            feats_img[ids], feats_txt[ids] = img, txt
            if scheduler is not None:
                scheduler.collect(img, txt, ids)
            if on_step is not None and len(ids) >= 2:
                on_step(state)
            logger.debug(f"Epoch {epoch} batch {b}: {len(ids)} examples")

        schedule_started = time.perf_counter()
        if scheduler is not None:
            next_schedule = scheduler.finish()
        elif conf.scheduler == 'naive':
            model = state.model

            def encoder_fn(ids):
                enc = encode_batch(model, corpus.images[ids], corpus.tokens[ids])
                return enc.img, enc.txt

            next_schedule = naive_schedule(corpus, encoder_fn, cfg,
                                           derive_stream(seed, StreamLabel.EXAMPLE_SHUFFLE, epoch + 1), epoch + 1)
            encode_seconds = next_schedule.encode_seconds
        else:
            next_schedule = first_epoch_schedule(cfg.D, cfg.N,
                                                 derive_stream(seed, StreamLabel.EXAMPLE_SHUFFLE, epoch + 1),
                                                 epoch=epoch + 1)
        schedule_seconds = time.perf_counter() - schedule_started

    hardness = hardness_stats(schedule, (feats_img, feats_txt), assignments, corpus.labels)
    means = {k: (v / steps if steps else 0.0) for k, v in sums.items()}
    metrics = EpochMetrics(epoch=epoch, steps=steps, **means,
                           mean_intra_batch_similarity=hardness.mean_intra_batch_similarity,
                           mean_negative_similarity=hardness.mean_negative_similarity,
                           same_cluster_negative_fraction=hardness.same_cluster_negative_fraction,
                           wall_seconds=time.perf_counter() - started,
                           schedule_seconds=schedule_seconds, encode_seconds=encode_seconds)

    state.epoch = epoch + 1
    state.pending_schedule = next_schedule
    logger.info(f"Epoch {epoch} done: {steps} steps, total loss {metrics.total:.4f}, "
                f"same-cluster negatives {metrics.same_cluster_negative_fraction:.3f}")
    return state, next_schedule, metrics
