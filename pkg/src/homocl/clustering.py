"""k-means clustering of encoder features into pseudo-classes."""

from dataclasses import dataclass, field

import numpy as np

from . import augment, model


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def k(self):
        return self.centroids.shape[0]


@dataclass
class ClusterAssignment:
    """Per-image cluster ids, keyed by the dataset's sample ids."""

    image_ids: np.ndarray
    cluster_ids: np.ndarray
    k: int
    seed: int = 0

    def lookup(self, image_ids):
        pos = {int(i): c for i, c in zip(self.image_ids, self.cluster_ids)}
        return np.array([pos[int(i)] for i in image_ids], dtype=np.int64)


def _sq_dists(x, centroids):
    # |x|^2 - 2 x.c + |c|^2, clipped for round-off
    d = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centroids.T
         + np.sum(centroids * centroids, axis=1)[None, :])
    return np.maximum(d, 0.0)


def kmeans_plusplus(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[i:i + 1])[:, 0])
    return centroids


def assign(model_or_centroids, features):
    """Nearest-centroid ids; ties go to the lowest centroid index."""
    c = getattr(model_or_centroids, "centroids", model_or_centroids)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"features of width {x.shape[-1]} vs centroids of width {c.shape[1]}")
    # np.argmin returns the first minimum, which is the lowest index
    return np.argmin(_sq_dists(x, c), axis=1)


def _lloyd(x, k, rng, max_iters, tol):
    n = x.shape[0]
    centroids = kmeans_plusplus(x, k, rng)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), labels].sum()))
        counts = np.bincount(labels, minlength=k)
        new = np.zeros_like(centroids)
        np.add.at(new, labels, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        taken = set()
        for j in np.flatnonzero(~nonempty):
            far = d[np.arange(n), labels].copy()
            far[list(taken)] = -1.0
            idx = int(np.argmax(far))
            taken.add(idx)
            new[j] = x[idx]
        shift = np.sqrt(np.max(np.sum((new - centroids) ** 2, axis=1)))
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(x, centroids)
    labels = np.argmin(d, axis=1)
    inertia = float(np.sum((x - centroids[labels]) ** 2))
    history.append(inertia)
    return ClusterModel(centroids, labels, inertia, it, history)


def kmeans(features, k, max_iters=100, tol=1e-6, seed=0, n_init=1):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest centroid shift falls below ``tol``.  An empty
    cluster is re-seeded at the point farthest from its current centroid.
    With ``n_init > 1`` the run with the lowest inertia is kept (the
    earliest on ties).
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points {n}")
    if n_init < 1:
        raise ValueError("n_init must be positive")
    best = None
    for r in range(n_init):
        km = _lloyd(x, k, np.random.default_rng([seed, 0x4B4D, r]), max_iters, tol)
        if best is None or km.inertia < best.inertia:
            best = km
    return best


def cluster_stage(dataset, params, k, seed=0, max_iters=100, tol=1e-6, batch=256,
                  input_size=None, normalize=True, n_init=10):
    """Cluster the un-augmented images of ``dataset`` with encoder features.

    With ``normalize`` the backbone features are scaled to unit length
    before k-means, so clusters follow feature direction rather than
    activation magnitude.  k-means is restarted ``n_init`` times.
    """
    feats = encode(params, dataset.pixels, batch, input_size)
    if normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norms > 0, norms, 1.0)
    km = kmeans(feats, k, max_iters=max_iters, tol=tol, seed=seed, n_init=n_init)
    return ClusterAssignment(dataset.sample_ids.copy(), km.assignments.astype(np.int64), k, seed)


def encode(params, pixels, batch=256, input_size=None):
    size = input_size or pixels.shape[1]
    out = []
    for i in range(0, pixels.shape[0], batch):
        x = augment.center_crop(pixels[i:i + batch], size)
        out.append(model.backbone(params, x))
    return np.concatenate(out).astype(np.float64)


def save_assignment(assignment, path):
    with open(path, "w") as fh:
        fh.write(f"# K={assignment.k} seed={assignment.seed}\n")
        for i, c in zip(assignment.image_ids, assignment.cluster_ids):
            fh.write(f"{int(i)},{int(c)}\n")


def load_assignment(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError("assignment file lacks its '# K=... seed=...' header")
        fields = dict(tok.split("=", 1) for tok in header[1:].split())
        rows = [line.strip().split(",") for line in fh if line.strip()]
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    cl = np.array([int(r[1]) for r in rows], dtype=np.int64)
    return ClusterAssignment(ids, cl, int(fields["K"]), int(fields.get("seed", 0)))
