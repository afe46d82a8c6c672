import os
import struct
import tempfile

import numpy as np
import pytest

from services.core import StreamLabel, derive_stream
from services.formats import (BadMagic, FormatError, TruncatedFile, VersionUnsupported, decode_corpus,
                              decode_schedule, dump_corpus, dump_schedule, encode_corpus, encode_schedule,
                              load_corpus, load_schedule)
from services.grit import EpochSchedule, NotAPermutation, Provenance, build_epoch_schedule
from services.toymodel import CorpusSpec, generate_corpus, split_corpus


def small_schedule(D=10, N=4, seed=1):
    G = np.random.default_rng(seed).permutation(D)
    return build_epoch_schedule(G, N, derive_stream(seed, StreamLabel.BATCH_SHUFFLE), epoch=3)


class TestScheduleFormat:
    """Test suite for the GRSC schedule dump."""

    def test_exact_bytes(self):
        schedule = EpochSchedule(epoch=1, batches=(np.array([2, 0]), np.array([1])),
                                 provenance=Provenance.GRIT, batch_size=2)
        expected = (b"GRSC" + struct.pack('<I', 1) + struct.pack('<Q', 3) + struct.pack('<I', 2)
                    + struct.pack('<III', 2, 0, 1))
        assert encode_schedule(schedule) == expected

    def test_decode_restores_batches(self):
        schedule = small_schedule()
        loaded = decode_schedule(encode_schedule(schedule), epoch=7)
        assert loaded.same_batches(schedule)
        assert loaded.provenance == Provenance.LOADED
        assert loaded.epoch == 7
        assert loaded.batch_size == 4

    def test_file_dump_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'schedules', 'epoch-001.grsc')
            schedule = small_schedule(D=97, N=8)
            dump_schedule(schedule, path)
            assert not os.path.exists(path + '.tmp')
            assert load_schedule(path).same_batches(schedule)

    def test_flipped_magic_byte(self):
        data = bytearray(encode_schedule(small_schedule()))
        data[0] ^= 0xFF
        with pytest.raises(BadMagic):
            decode_schedule(bytes(data))

    def test_unsupported_version(self):
        data = bytearray(encode_schedule(small_schedule()))
        data[4:8] = struct.pack('<I', 2)
        with pytest.raises(VersionUnsupported):
            decode_schedule(bytes(data))

    def test_truncated_index_section_reports_offset(self):
        data = encode_schedule(small_schedule())[:-6]
        with pytest.raises(TruncatedFile) as exc_info:
            decode_schedule(data)
        assert exc_info.value.offset == len(data)
        assert str(len(data)) in str(exc_info.value)

    def test_truncated_header(self):
        with pytest.raises(TruncatedFile):
            decode_schedule(b"GRSC\x01\x00")

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            decode_schedule(encode_schedule(small_schedule()) + b"\x00")

    def test_not_a_permutation(self):
        data = bytearray(encode_schedule(small_schedule()))
        data[-4:] = data[-8:-4]
        with pytest.raises(NotAPermutation):
            decode_schedule(bytes(data))


class TestCorpusFormat:
    """Test suite for the GRCO corpus dump."""

    def setup_method(self):
        self.spec = CorpusSpec(n_examples=96, n_clusters=8, img_dim=12, seq_len=8, vocab_size=64,
                               attribute_values=4, topic_size=4)
        self.corpus = generate_corpus(self.spec, derive_stream(5, StreamLabel.DATA_GEN))

    def test_decode_restores_corpus(self):
        loaded = decode_corpus(encode_corpus(self.corpus))
        assert loaded.same_as(self.corpus)
        assert loaded.spec == self.spec

    def test_split_corpus_encodes(self):
        train, held_out = split_corpus(self.corpus, 64)
        assert decode_corpus(encode_corpus(held_out)).same_as(held_out)
        assert decode_corpus(encode_corpus(train)).spec.n_examples == 64

    def test_file_dump_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'corpus.grco')
            dump_corpus(self.corpus, path)
            assert load_corpus(path).same_as(self.corpus)

    def test_magic_checked(self):
        data = bytearray(encode_corpus(self.corpus))
        data[3] = ord('X')
        with pytest.raises(BadMagic):
            decode_corpus(bytes(data))

    def test_schedule_is_not_a_corpus(self):
        with pytest.raises(BadMagic):
            decode_corpus(encode_schedule(small_schedule()))

    def test_truncated(self):
        data = encode_corpus(self.corpus)[:200]
        with pytest.raises(TruncatedFile) as exc_info:
            decode_corpus(data)
        assert exc_info.value.offset == 200
