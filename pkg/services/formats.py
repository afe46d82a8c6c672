"""Binary dump formats.

GRSC (epoch schedule), all little-endian:
    b"GRSC" | u32 version | u64 D | u32 N | D x u32 example ids in schedule order

GRCO (synthetic corpus), all little-endian:
    b"GRCO" | u32 version | spec header | labels u32[D] | images f64[D, img_dim]
    | tokens u32[D, seq_len] | attributes u32[D, n_grounded] | centroids f64[K, img_dim]
"""
import os
import struct
import logging
from dataclasses import astuple
from typing import Tuple

import numpy as np

from services.grit import EpochSchedule, NotAPermutation, Provenance, is_permutation, partition_batches
from services.toymodel import CorpusSpec, SyntheticCorpus

logger = logging.getLogger(__name__)

SCHEDULE_MAGIC = b"GRSC"
CORPUS_MAGIC = b"GRCO"
FORMAT_VERSION = 1

_SCHEDULE_HEADER = struct.Struct('<4sIQI')
_CORPUS_HEADER = struct.Struct('<4sI')
# Field order follows CorpusSpec.
_CORPUS_SPEC = struct.Struct('<QIdIIIdIdId')


class FormatError(ValueError):
    pass


class BadMagic(FormatError):
    pass


class VersionUnsupported(FormatError):
    pass


class TruncatedFile(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class _Reader:
    """Cursor over a byte buffer that raises TruncatedFile with the offset
    where the data ran out."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def struct(self, fmt: struct.Struct, what: str) -> Tuple:
        if self.offset + fmt.size > len(self.data):
            raise TruncatedFile(f"Truncated {what}", len(self.data))
        values = fmt.unpack_from(self.data, self.offset)
        self.offset += fmt.size
        return values

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        if self.offset + nbytes > len(self.data):
            raise TruncatedFile(f"Truncated {what}: need {nbytes} bytes", len(self.data))
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += nbytes
        return out

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing byte(s) after offset {self.offset}")


def _check_magic(data: bytes, magic: bytes) -> None:
    head = data[:len(magic)]
    if head != magic[:len(head)]:
        raise BadMagic(f"Expected magic {magic!r}, found {head!r}")


def _check_version(version: int) -> None:
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"Format version {version} is not supported (expected {FORMAT_VERSION})")


def encode_schedule(schedule: EpochSchedule) -> bytes:
    flat = schedule.flat()
    if flat.size and flat.max() > np.iinfo(np.uint32).max:
        raise FormatError("Example ids do not fit in u32")
    header = _SCHEDULE_HEADER.pack(SCHEDULE_MAGIC, FORMAT_VERSION, len(flat), schedule.batch_size)
    return header + flat.astype('<u4').tobytes()


def decode_schedule(data: bytes, epoch: int = 0) -> EpochSchedule:
    _check_magic(data, SCHEDULE_MAGIC)
    reader = _Reader(data)
    _, version, D, N = reader.struct(_SCHEDULE_HEADER, "schedule header")
    _check_version(version)
    if N == 0:
        raise FormatError("Batch size in schedule header is 0")
    ids = reader.array('<u4', D, "index section").astype(np.int64)
    reader.finish()
    if not is_permutation(ids):
        raise NotAPermutation(f"Loaded schedule of {D} ids is not a permutation")
    return EpochSchedule(epoch=epoch, batches=tuple(partition_batches(ids, N)),
                         provenance=Provenance.LOADED, batch_size=N)


def dump_schedule(schedule: EpochSchedule, path: str) -> None:
    _atomic_write(path, encode_schedule(schedule))
    logger.info(f"Wrote schedule for epoch {schedule.epoch} ({schedule.dataset_size} ids) to {path}")


def load_schedule(path: str, epoch: int = 0) -> EpochSchedule:
    with open(path, 'rb') as f:
        return decode_schedule(f.read(), epoch=epoch)


def encode_corpus(corpus: SyntheticCorpus) -> bytes:
    spec = corpus.spec
    parts = [
        _CORPUS_HEADER.pack(CORPUS_MAGIC, FORMAT_VERSION),
        _CORPUS_SPEC.pack(*astuple(spec)),
        corpus.labels.astype('<u4').tobytes(),
        corpus.images.astype('<f8').tobytes(),
        corpus.tokens.astype('<u4').tobytes(),
        corpus.attributes.astype('<u4').tobytes(),
        corpus.centroids.astype('<f8').tobytes(),
    ]
    return b''.join(parts)


def decode_corpus(data: bytes) -> SyntheticCorpus:
    _check_magic(data, CORPUS_MAGIC)
    reader = _Reader(data)
    _, version = reader.struct(_CORPUS_HEADER, "corpus header")
    _check_version(version)
    spec = CorpusSpec(*reader.struct(_CORPUS_SPEC, "corpus spec"))
    D, K, g = spec.n_examples, spec.n_clusters, spec.n_grounded
    labels = reader.array('<u4', D, "labels").astype(np.int64)
    images = reader.array('<f8', D * spec.img_dim, "images").reshape(D, spec.img_dim).copy()
    tokens = reader.array('<u4', D * spec.seq_len, "tokens").astype(np.int64).reshape(D, spec.seq_len)
    attributes = reader.array('<u4', D * g, "attributes").astype(np.int64).reshape(D, g)
    centroids = reader.array('<f8', K * spec.img_dim, "centroids").reshape(K, spec.img_dim).copy()
    reader.finish()
    return SyntheticCorpus(spec, images, tokens, labels, attributes, centroids)


def dump_corpus(corpus: SyntheticCorpus, path: str) -> None:
    _atomic_write(path, encode_corpus(corpus))
    logger.info(f"Wrote corpus of {len(corpus)} pairs to {path}")


def load_corpus(path: str) -> SyntheticCorpus:
    with open(path, 'rb') as f:
        return decode_corpus(f.read())


def _atomic_write(path: str, payload: bytes) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as f:
        f.write(payload)
    os.replace(tmp, path)
