import time
import atexit
import logging
from concurrent.futures import Executor, Future, ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sized, Tuple, Union

import numpy as np

from services.core import ValidatedConfig, RngStream, StreamLabel, derive_stream
from services.similarity import EmbeddingTable, DimMismatch, masked_argmax, row_softmax

logger = logging.getLogger(__name__)


class Overflow(ValueError):
    pass


class MisalignedBatch(ValueError):
    pass


class TooSmall(ValueError):
    pass


class NotAPermutation(ValueError):
    pass


class Direction(str, Enum):
    START = 'start'
    V2T = 'v2t'
    T2V = 't2v'


class Provenance(str, Enum):
    GRIT = 'grit'
    RANDOM = 'random'
    NAIVE = 'naive'
    LOADED = 'loaded'


class CollectorState:
    """The paired image/text feature queues plus the index queue, all of
    capacity L. Row k of each queue belongs to the same example. Single
    writer: whoever collects also decides when to flush.

    Ids collected in the current cycle are tracked in a boolean mask over
    the id space (`id_space`, grown on demand); clear() resets only the
    entries of the ids it held.
    """

    def __init__(self, capacity: int, dim: int, id_space: int = 0):
        self.capacity = capacity
        self.dim = dim
        self.img = np.empty((capacity, dim), dtype=np.float64)
        self.txt = np.empty((capacity, dim), dtype=np.float64)
        self.ids = np.empty(capacity, dtype=np.int64)
        self.fill = 0
        self._seen = np.zeros(id_space, dtype=bool)

    @property
    def full(self) -> bool:
        return self.fill == self.capacity

    def view(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.img[:self.fill], self.txt[:self.fill], self.ids[:self.fill]

    def snapshot(self, order: Optional[np.ndarray] = None) -> 'CollectorState':
        """Independent copy of the filled rows, optionally reordered. The
        copy is only ever read, so it carries no id mask."""
        img, txt, ids = self.view()
        if order is not None:
            img, txt, ids = img[order], txt[order], ids[order]
        copy = CollectorState(self.fill, self.dim)
        copy.img[:] = img
        copy.txt[:] = txt
        copy.ids[:] = ids
        copy.fill = self.fill
        return copy

    def mark(self, ids: np.ndarray) -> None:
        """Record `ids` as collected this cycle, refusing repeats."""
        if len(ids) == 0:
            return
        if ids.min() < 0:
            raise MisalignedBatch(f"Example ids must be >= 0, got {int(ids.min())}")
        top = int(ids.max()) + 1
        if top > len(self._seen):
            grown = np.zeros(max(top, 2 * len(self._seen)), dtype=bool)
            grown[:len(self._seen)] = self._seen
            self._seen = grown
        if self._seen[ids].any() or len(np.unique(ids)) != len(ids):
            raise MisalignedBatch("Example id collected twice within one flush cycle")
        self._seen[ids] = True

    def clear(self) -> None:
        if self.fill and len(self._seen):
            self._seen[self.ids[:self.fill]] = False
        self.fill = 0

    def __len__(self) -> int:
        return self.fill


@dataclass(frozen=True, eq=False)
class SubQueue:
    img: np.ndarray
    txt: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class IndexChain:
    ids: np.ndarray
    positions: np.ndarray  # sub-queue-local row of each chain entry
    trace: Tuple[Direction, ...]

    def alternates(self) -> bool:
        steps = self.trace[1:]
        if not self.trace or self.trace[0] != Direction.START:
            return False
        return all(a != b for a, b in zip(steps, steps[1:])) and Direction.START not in steps

    def direction_counts(self) -> Tuple[int, int]:
        return self.trace.count(Direction.V2T), self.trace.count(Direction.T2V)


@dataclass(frozen=True, eq=False)
class EpochSchedule:
    epoch: int
    batches: Tuple[np.ndarray, ...]
    provenance: Provenance
    batch_size: int
    build_seconds: float = 0.0
    encode_seconds: float = 0.0

    def flat(self) -> np.ndarray:
        if not self.batches:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(self.batches)

    @property
    def dataset_size(self) -> int:
        return sum(len(b) for b in self.batches)

    def is_permutation(self) -> bool:
        return is_permutation(self.flat())

    def same_batches(self, other: 'EpochSchedule') -> bool:
        return len(self.batches) == len(other.batches) and all(
            np.array_equal(a, b) for a, b in zip(self.batches, other.batches))

    def __len__(self) -> int:
        return len(self.batches)


def is_permutation(G: np.ndarray) -> bool:
    return np.array_equal(np.sort(G), np.arange(len(G)))


def partition_batches(G: np.ndarray, N: int) -> List[np.ndarray]:
    return [G[s:s + N].copy() for s in range(0, len(G), N)]


def collect(state: CollectorState, img_feats: EmbeddingTable, txt_feats: EmbeddingTable,
            ids) -> CollectorState:
    """Phase 1: append one batch of projected features to all three queues.
    Mutates and returns `state`; `state.full` reports whether it hit L."""
    img = np.asarray(img_feats, dtype=np.float64)
    txt = np.asarray(txt_feats, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    n = len(ids)
    if img.shape[0] != n or txt.shape[0] != n:
        raise MisalignedBatch(f"Batch rows differ: img={img.shape[0]}, txt={txt.shape[0]}, ids={n}")
    if img.shape[1] != state.dim or txt.shape[1] != state.dim:
        raise DimMismatch(f"Feature dim must be {state.dim}, got img={img.shape[1]}, txt={txt.shape[1]}")
    if state.fill + n > state.capacity:
        raise Overflow(f"Collecting {n} rows into a queue at {state.fill}/{state.capacity} without a flush")
    state.mark(ids)

    lo, hi = state.fill, state.fill + n
    state.img[lo:hi] = img
    state.txt[lo:hi] = txt
    state.ids[lo:hi] = ids
    state.fill = hi
    return state


def example_shuffle(state: CollectorState, rng: RngStream) -> CollectorState:
    """Phase 2: one shared permutation over all three queues."""
    return state.snapshot(rng.permutation(state.fill))


def split_subqueues(state: CollectorState, M: int) -> List[SubQueue]:
    """Phase 2 split into sub-queues of M rows in queue order. A short tail
    (only on an epoch-final partial flush) becomes its own SubQueue; flush()
    passes a single-row tail through ungrouped."""
    img, txt, ids = state.view()
    return [SubQueue(img[s:s + M], txt[s:s + M], ids[s:s + M]) for s in range(0, state.fill, M)]


def group(sq: SubQueue, rng: RngStream, first_direction: Union[Direction, str] = Direction.V2T,
          form: str = 'raw', temperature: Optional[float] = None) -> IndexChain:
    """Phase 3: greedy alternating-direction chain through one sub-queue.

    Starts from a uniformly drawn row, then repeatedly takes the most similar
    unvisited example, switching between the image->text row of the current
    example and its text->image row. `form='softmax'` selects on the
    softmax-normalized rows instead of raw scores; the chain is the same
    because softmax is monotone per row.
    """
    m = len(sq)
    if m < 2:
        raise TooSmall(f"Grouping needs at least 2 rows, got {m}")

    S = sq.img @ sq.txt.T
    if form == 'softmax':
        if temperature is None:
            raise ValueError("form='softmax' needs a temperature")
        v2t = row_softmax(S, temperature, 'v2t').data
        t2v = row_softmax(S, temperature, 't2v').data
    elif form == 'raw':
        v2t = S
        t2v = np.ascontiguousarray(S.T)
    else:
        raise ValueError(f"form must be 'raw' or 'softmax', got {form!r}")

    current = int(rng.integers(m))
    # Additive mask: 0 while a row is open, -inf once the chain has used it.
    penalty = np.zeros(m)
    penalty[current] = -np.inf
    buf = np.empty(m)
    order = np.empty(m, dtype=np.int64)
    order[0] = current
    trace = [Direction.START]
    use_v2t = Direction(first_direction) == Direction.V2T

    for step in range(1, m):
        row = v2t[current] if use_v2t else t2v[current]
        current = masked_argmax(row, penalty, out=buf)
        penalty[current] = -np.inf
        order[step] = current
        trace.append(Direction.V2T if use_v2t else Direction.T2V)
        use_v2t = not use_v2t

    return IndexChain(ids=sq.ids[order], positions=order, trace=tuple(trace))


def flush(state: CollectorState, cfg: ValidatedConfig, rng_shuffle: Optional[RngStream],
          rng_start: RngStream) -> np.ndarray:
    """Phases 2-3 over a filled (or epoch-final) queue. Returns the grouped
    dataset ids in chain order and empties `state`. Passing rng_shuffle=None
    (or shuffle_examples=False in the config) skips the example shuffle."""
    if rng_shuffle is not None and cfg.config.shuffle_examples:
        shuffled = example_shuffle(state, rng_shuffle)
    else:
        shuffled = state.snapshot()

    out = []
    for sq in split_subqueues(shuffled, cfg.M):
        if len(sq) < 2:
            out.append(sq.ids.copy())
            continue
        chain = group(sq, rng_start, first_direction=cfg.config.first_direction)
        out.append(chain.ids)

    state.clear()
    grouped = np.concatenate(out) if out else np.empty(0, dtype=np.int64)
    logger.debug(f"Flushed {len(grouped)} ids in {len(out)} sub-queue(s)")
    return grouped


def build_epoch_schedule(G, N: int, rng: RngStream, epoch: int = 0,
                         provenance: Provenance = Provenance.GRIT, shuffle: bool = True) -> EpochSchedule:
    """Phase 4: cut G into N-sized batches and shuffle the order of the full
    ones. Batch interiors are untouched and a short tail stays last."""
    G = np.asarray(G, dtype=np.int64)
    if not is_permutation(G):
        raise NotAPermutation(f"Index array of length {len(G)} is not a permutation of 0..{len(G) - 1}")
    batches = partition_batches(G, N)
    n_full = len(G) // N
    full, tail = batches[:n_full], batches[n_full:]
    if shuffle and n_full > 1:
        full = [full[i] for i in rng.permutation(n_full)]
    return EpochSchedule(epoch=epoch, batches=tuple(full + tail), provenance=provenance, batch_size=N)


def first_epoch_schedule(D: int, N: int, rng: RngStream, epoch: int = 0) -> EpochSchedule:
    perm = rng.permutation(D).astype(np.int64)
    return EpochSchedule(epoch=epoch, batches=tuple(partition_batches(perm, N)),
                         provenance=Provenance.RANDOM, batch_size=N)


_POOLS: Dict[int, ProcessPoolExecutor] = {}


def grouping_pool(workers: int) -> ProcessPoolExecutor:
    """Process pool for flush grouping, one per worker count, shared by every
    scheduler in this process and kept across epochs."""
    pool = _POOLS.get(workers)
    if pool is None:
        pool = ProcessPoolExecutor(max_workers=workers)
        _POOLS[workers] = pool
        logger.debug(f"Started grouping pool with {workers} worker process(es)")
    return pool


def shutdown_grouping_pools() -> None:
    while _POOLS:
        _, pool = _POOLS.popitem()
        pool.shutdown(wait=True, cancel_futures=True)


atexit.register(shutdown_grouping_pools)


class GritScheduler:
    """Builds the schedule for `epoch` from features collected while the
    previous epoch trains.

    Every filled queue is frozen and handed to flush() - synchronously, or on
    a process pool when grouping_workers > 0 (or an `executor` is given), so
    grouping runs beside the training loop. `inline=True` forces synchronous
    grouping whatever the config says. The RNG streams of flush k are
    derived from (seed, epoch, k) up front, so the schedule is the same no
    matter how the grouping tasks interleave.

    Use it as a context manager (or call close()) so an epoch that dies
    part-way cancels its queued grouping tasks.
    """

    def __init__(self, cfg: ValidatedConfig, epoch: int, provenance: Provenance = Provenance.GRIT,
                 shuffle_examples: Optional[bool] = None, executor: Optional[Executor] = None,
                 inline: bool = False):
        self.cfg = cfg
        self.epoch = epoch
        self.provenance = provenance
        self.shuffle_examples = cfg.config.shuffle_examples if shuffle_examples is None else shuffle_examples
        self.state = CollectorState(cfg.L, cfg.config.embed_dim, id_space=cfg.D)
        self._parts: List[Union[Future, np.ndarray]] = []
        self._flushes = 0
        workers = cfg.config.grouping_workers
        if executor is None and workers > 0 and not inline:
            executor = grouping_pool(workers)
        self._executor = None if inline else executor

    def __enter__(self) -> 'GritScheduler':
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def collect(self, img_feats, txt_feats, ids) -> None:
        """Phase 1 for one training batch. A batch that straddles the queue
        boundary fills the queue, triggers the flush, then continues into the
        fresh queue."""
        img = np.asarray(img_feats, dtype=np.float64)
        txt = np.asarray(txt_feats, dtype=np.float64)
        ids = np.asarray(ids, dtype=np.int64)
        offset = 0
        while offset < len(ids):
            take = min(self.state.capacity - self.state.fill, len(ids) - offset)
            sl = slice(offset, offset + take)
            collect(self.state, img[sl], txt[sl], ids[sl])
            offset += take
            if self.state.full:
                self._flush()

    def _flush(self) -> None:
        frozen = self.state.snapshot()
        self.state.clear()
        k = self._flushes
        self._flushes += 1
        seed = self.cfg.config.master_seed
        rng_shuffle = derive_stream(seed, StreamLabel.EXAMPLE_SHUFFLE, self.epoch, k) if self.shuffle_examples else None
        rng_start = derive_stream(seed, StreamLabel.GROUPING_START, self.epoch, k)
        if self._executor is not None:
            self._parts.append(self._executor.submit(flush, frozen, self.cfg, rng_shuffle, rng_start))
        else:
            self._parts.append(flush(frozen, self.cfg, rng_shuffle, rng_start))

    @property
    def flush_count(self) -> int:
        return self._flushes

    def close(self) -> None:
        """Cancel grouping tasks that have not started and drop the collected
        state. Safe to call more than once, and after finish()."""
        cancelled = sum(1 for p in self._parts if isinstance(p, Future) and p.cancel())
        if cancelled:
            logger.warning(f"Epoch {self.epoch} schedule abandoned, cancelled {cancelled} grouping task(s)")
        self._parts = []
        self.state.clear()

    def finish(self) -> EpochSchedule:
        """Flush whatever is left, join every flush in flush order and run the
        mini-batch-level shuffle."""
        if self.state.fill:
            self._flush()
        try:
            parts = [p.result() if isinstance(p, Future) else p for p in self._parts]
        except BrokenProcessPool:
            shutdown_grouping_pools()
            raise
        finally:
            self._parts = []
        G = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        rng_batch = derive_stream(self.cfg.config.master_seed, StreamLabel.BATCH_SHUFFLE, self.epoch)
        schedule = build_epoch_schedule(G, self.cfg.N, rng_batch, epoch=self.epoch, provenance=self.provenance,
                                        shuffle=self.cfg.config.shuffle_batches)
        logger.info(f"Built {self.provenance.value} schedule for epoch {self.epoch}: "
                    f"{len(G)} ids, {self._flushes} flush(es), {len(schedule)} batches")
        return schedule


EncoderFn = Callable[[np.ndarray], Tuple[EmbeddingTable, EmbeddingTable]]


def naive_schedule(corpus: Sized, encoder_fn: EncoderFn, cfg: ValidatedConfig, rng: RngStream,
                   epoch: int = 0) -> EpochSchedule:
    """The non-concurrent variant: shuffle the whole dataset, run a dedicated
    forward pass over all of it, then group and batch in the calling thread.
    The extra pass is timed and reported on the schedule."""
    started = time.perf_counter()
    order = rng.permutation(len(corpus)).astype(np.int64)
    encode_seconds = 0.0
    # The full-data shuffle above stands in for the example-level shuffle.
    with GritScheduler(cfg, epoch, provenance=Provenance.NAIVE, shuffle_examples=False, inline=True) as scheduler:
        for lo in range(0, len(order), cfg.N):
            ids = order[lo:lo + cfg.N]
            t0 = time.perf_counter()
            img, txt = encoder_fn(ids)
            encode_seconds += time.perf_counter() - t0
            scheduler.collect(img, txt, ids)
        schedule = scheduler.finish()
    build_seconds = time.perf_counter() - started
    logger.info(f"Naive schedule for epoch {epoch}: {build_seconds:.3f}s total, "
                f"{encode_seconds:.3f}s in the extra forward pass")
    return replace(schedule, build_seconds=build_seconds, encode_seconds=encode_seconds)
