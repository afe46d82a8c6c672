import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import softmax

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-5


class DimMismatch(ValueError):
    pass


class EmptyTable(ValueError):
    pass


class NonPositiveTemperature(ValueError):
    pass


def l2_normalize(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / np.maximum(norms, 1e-12)


@dataclass(frozen=True)
class EmbeddingTable:
    """Row-major matrix of projected, unit-norm [CLS] features - one row per
    example, for a single modality."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DimMismatch(f"EmbeddingTable needs a 2-D array, got shape {self.data.shape}")

    @classmethod
    def from_rows(cls, rows, normalize: bool = True) -> 'EmbeddingTable':
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        return cls(l2_normalize(rows) if normalize else rows)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def is_unit_norm(self, tol: float = UNIT_NORM_TOL) -> bool:
        return bool(np.all(np.abs(np.linalg.norm(self.data, axis=1) - 1.0) <= tol))

    def take(self, index) -> 'EmbeddingTable':
        return EmbeddingTable(self.data[index])

    def __len__(self) -> int:
        return self.rows

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class SimilarityMatrix:
    data: np.ndarray

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class DistributionMatrix:
    direction: str  # 'v2t' or 't2v'
    data: np.ndarray

    @property
    def rows(self) -> int:
        return self.data.shape[0]


TableLike = Union[EmbeddingTable, np.ndarray]


def pairwise_scores(img: TableLike, txt: TableLike) -> SimilarityMatrix:
    """s(V_i, T_j) for every image row i and text row j - a plain dot
    product, since both tables are already unit-norm."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(txt, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptyTable("Similarity needs at least one row per modality")
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"Image dim {a.shape[1]} != text dim {b.shape[1]}")
    return SimilarityMatrix(a @ b.T)


def row_softmax(S: Union[SimilarityMatrix, np.ndarray], tau: float, direction: str = 'v2t') -> DistributionMatrix:
    """p^{v2t} (rows over texts) or p^{t2v} (rows over images) at temperature
    tau. scipy's softmax subtracts the row max before exponentiating, which
    keeps tau down to 0.01 finite."""
    if not tau > 0:
        raise NonPositiveTemperature(f"Temperature must be > 0, got {tau}")
    data = S.data if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    if direction == 't2v':
        data = data.T
    elif direction != 'v2t':
        raise ValueError(f"direction must be 'v2t' or 't2v', got {direction!r}")
    return DistributionMatrix(direction, softmax(data / tau, axis=1))


def masked_argmax(row: np.ndarray, visited: np.ndarray, out: Optional[np.ndarray] = None) -> int:
    """Argmax over the entries not yet visited. np.argmax returns the first
    maximal index, which is the lowest-index-wins tie rule.

    `visited` is either a boolean mask or an additive penalty vector (0 for
    open entries, -inf for visited ones). The penalty form writes into `out`
    when given, so a caller looping over rows allocates nothing per step.
    """
    if visited.dtype == np.bool_:
        return int(np.argmax(np.where(visited, -np.inf, row)))
    return int(np.argmax(np.add(row, visited, out=out)))
