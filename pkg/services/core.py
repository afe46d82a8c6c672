import json
import math
import hashlib
import logging
from dataclasses import dataclass, asdict, fields, replace
from enum import Enum
from typing import Any, Dict, Mapping, Optional

import numpy as np

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Base class for every config validation failure."""


class OrderingViolation(ConfigError):
    pass


class NonPositive(ConfigError):
    pass


class DivisibilityViolation(ConfigError):
    pass


class OutOfRange(ConfigError):
    pass


class UnknownConfigKey(ConfigError):
    pass


class InvalidType(ConfigError):
    pass


SCHEDULERS = ('random', 'grit', 'naive')
NEGATIVE_MODES = ('multinomial', 'argmax', 'random')
DIRECTIONS = ('v2t', 't2v')


@dataclass(frozen=True)
class GritConfig:
    """Every knob of one training arm. Field names double as the keys of the
    flat JSON config document."""

    batch_size: int = 96
    search_space: int = 960
    queue_capacity: int = 48000
    dataset_size: int = 48000
    temperature: float = 0.07
    lambda_cons: float = 0.2
    mask_prob: float = 0.5
    embed_dim: int = 16
    master_seed: int = 42
    strict_divisibility: bool = False
    first_direction: str = 'v2t'
    negatives: str = 'multinomial'
    shuffle_examples: bool = True
    shuffle_batches: bool = True
    scheduler: str = 'grit'
    itc_queue_size: int = 0
    use_itc: bool = True
    learning_rate: float = 0.5
    hidden_dim: int = 32
    fusion_dim: int = 64
    grouping_workers: int = 0


@dataclass(frozen=True)
class ValidatedConfig:
    config: GritConfig
    subqueues_per_flush: int
    batches_per_epoch: int
    flushes_per_epoch: int
    config_hash: str

    # Shorthand for the four sizes every scheduling call needs.
    @property
    def N(self) -> int:
        return self.config.batch_size

    @property
    def M(self) -> int:
        return self.config.search_space

    @property
    def L(self) -> int:
        return self.config.queue_capacity

    @property
    def D(self) -> int:
        return self.config.dataset_size


_COUNT_FIELDS = ('batch_size', 'search_space', 'queue_capacity', 'dataset_size',
                 'embed_dim', 'hidden_dim', 'fusion_dim')
_INT_FIELDS = _COUNT_FIELDS + ('master_seed', 'itc_queue_size', 'grouping_workers')
_REAL_FIELDS = ('temperature', 'lambda_cons', 'mask_prob', 'learning_rate')
_BOOL_FIELDS = ('strict_divisibility', 'shuffle_examples', 'shuffle_batches', 'use_itc')
_CHOICE_FIELDS = {'scheduler': SCHEDULERS, 'negatives': NEGATIVE_MODES, 'first_direction': DIRECTIONS}


def config_to_dict(cfg: GritConfig) -> Dict[str, Any]:
    return asdict(cfg)


def config_from_dict(raw: Mapping[str, Any]) -> GritConfig:
    """Build a GritConfig from a flat mapping, rejecting keys GritConfig
    doesn't define (a typo'd key would otherwise silently run defaults)."""
    known = {f.name for f in fields(GritConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UnknownConfigKey(f"Unknown config key(s): {', '.join(unknown)}")
    return GritConfig(**dict(raw))


def load_config(path: str) -> GritConfig:
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return config_from_dict(raw)


def config_hash(cfg: GritConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def _coerce_types(raw: GritConfig) -> GritConfig:
    """Reject values of the wrong kind (strings, None, lists, bools posing as
    numbers) and turn numpy scalars into plain Python ones so the config
    hashes the same however it was built."""
    plain: Dict[str, Any] = {}
    for name in _INT_FIELDS:
        value = getattr(raw, name)
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise InvalidType(f"{name} must be an integer, got {value!r}")
        plain[name] = int(value)
    for name in _REAL_FIELDS:
        value = getattr(raw, name)
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise InvalidType(f"{name} must be a number, got {value!r}")
        if not math.isfinite(value):
            raise OutOfRange(f"{name} must be finite, got {value!r}")
        plain[name] = float(value)
    for name in _BOOL_FIELDS:
        value = getattr(raw, name)
        if not isinstance(value, (bool, np.bool_)):
            raise InvalidType(f"{name} must be true or false, got {value!r}")
        plain[name] = bool(value)
    for name in _CHOICE_FIELDS:
        value = getattr(raw, name)
        if not isinstance(value, str):
            raise InvalidType(f"{name} must be a string, got {value!r}")
    return replace(raw, **plain)


def validate_config(raw: GritConfig) -> ValidatedConfig:
    """Check the N <= M <= L <= D ordering and the scalar ranges, returning
    the config with its derived counts. Each failure maps to exactly one
    error class, checked in a fixed order: counts, ordering, divisibility,
    scalar ranges. Field types are checked before anything else."""
    raw = _coerce_types(raw)
    for name in _COUNT_FIELDS:
        value = getattr(raw, name)
        if value <= 0:
            raise NonPositive(f"{name} must be a positive integer, got {value!r}")
    if raw.itc_queue_size < 0 or raw.grouping_workers < 0:
        raise NonPositive("itc_queue_size and grouping_workers must be >= 0")

    N, M, L, D = raw.batch_size, raw.search_space, raw.queue_capacity, raw.dataset_size
    if N > M:
        raise OrderingViolation(f"batch_size ({N}) must not exceed search_space ({M})")
    if M > L:
        raise OrderingViolation(f"search_space ({M}) must not exceed queue_capacity ({L})")
    if L > D:
        raise OrderingViolation(f"queue_capacity ({L}) must not exceed dataset_size ({D})")

    if raw.strict_divisibility:
        if M % N:
            raise DivisibilityViolation(f"search_space ({M}) is not a multiple of batch_size ({N})")
        if L % M:
            raise DivisibilityViolation(f"queue_capacity ({L}) is not a multiple of search_space ({M})")

    if not raw.temperature > 0:
        raise NonPositive(f"temperature must be > 0, got {raw.temperature}")
    if raw.lambda_cons < 0:
        raise OutOfRange(f"lambda_cons must be >= 0, got {raw.lambda_cons}")
    if not 0.0 <= raw.mask_prob <= 1.0:
        raise OutOfRange(f"mask_prob must be within [0, 1], got {raw.mask_prob}")
    if raw.learning_rate < 0:
        raise OutOfRange(f"learning_rate must be >= 0, got {raw.learning_rate}")
    if raw.scheduler not in SCHEDULERS:
        raise OutOfRange(f"scheduler must be one of {SCHEDULERS}, got {raw.scheduler!r}")
    if raw.negatives not in NEGATIVE_MODES:
        raise OutOfRange(f"negatives must be one of {NEGATIVE_MODES}, got {raw.negatives!r}")
    if raw.first_direction not in DIRECTIONS:
        raise OutOfRange(f"first_direction must be one of {DIRECTIONS}, got {raw.first_direction!r}")

    return ValidatedConfig(
        config=raw,
        subqueues_per_flush=math.ceil(L / M),
        batches_per_epoch=math.ceil(D / N),
        flushes_per_epoch=math.ceil(D / L),
        config_hash=config_hash(raw),
    )


class StreamLabel(str, Enum):
    DATA_GEN = 'data-gen'
    EXAMPLE_SHUFFLE = 'example-shuffle'
    GROUPING_START = 'grouping-start'
    BATCH_SHUFFLE = 'batch-shuffle'
    MASKING = 'masking'
    NEGATIVE_SAMPLING = 'negative-sampling'
    WEIGHT_INIT = 'weight-init'


def _label_key(label: StreamLabel) -> int:
    # Stable across processes and Python versions, unlike hash().
    return int.from_bytes(hashlib.sha256(label.value.encode('utf-8')).digest()[:4], 'little')


class RngStream:
    """A labeled, replayable numpy Generator. Two streams with the same
    (seed, label, path) produce identical draws; any difference in the key
    gives an independent SeedSequence child."""

    def __init__(self, seed: int, label: StreamLabel, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = StreamLabel(label)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=(_label_key(self.label),) + self.path)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def replay(self) -> 'RngStream':
        return RngStream(self.seed, self.label, self.path)

    def child(self, *path: int) -> 'RngStream':
        return RngStream(self.seed, self.label, self.path + tuple(path))

    # Thin pass-throughs for the draws the pipeline actually makes.
    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)

    def random(self, *args, **kwargs):
        return self.generator.random(*args, **kwargs)

    def permutation(self, n):
        return self.generator.permutation(n)

    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def choice(self, *args, **kwargs):
        return self.generator.choice(*args, **kwargs)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label.value}, path={self.path})"


def derive_stream(master_seed: int, label: StreamLabel, *path: int) -> RngStream:
    return RngStream(master_seed, label, path)


def derive_seed(master_seed: int, *path: int) -> int:
    """Fold extra integers (e.g. a per-cell seed) into a 64-bit master seed."""
    seq = np.random.SeedSequence(int(master_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(p) for p in path))
    lo, hi = seq.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)
