import numpy as np


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def clustered_features(rng: np.random.Generator, K: int, per_cluster: int, dim: int, noise: float = 0.1):
    """Paired unit features around K orthogonal centroids, rows shuffled.
    Returns (img, txt, labels)."""
    centroids = np.eye(dim)[:K]
    labels = np.repeat(np.arange(K), per_cluster)
    perm = rng.permutation(len(labels))
    labels = labels[perm]
    img = centroids[labels] + noise * rng.normal(size=(len(labels), dim))
    txt = centroids[labels] + noise * rng.normal(size=(len(labels), dim))
    return (img / np.linalg.norm(img, axis=1, keepdims=True),
            txt / np.linalg.norm(txt, axis=1, keepdims=True), labels)
