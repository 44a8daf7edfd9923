"""NT-Xent and its cluster-aware variant, with exact gradients.

For anchor view i with sibling j the per-anchor loss is

    -log( exp(s_ij / t) / sum_{k in D_i} exp(s_ik / t) )

where s is cosine similarity.  Plain NT-Xent uses D_i = {k != i}; the
cluster-aware loss uses D_i = {k : c_k != c_i}, so views sharing the
anchor's cluster (its sibling included) leave the denominator.
"""

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np
from scipy.special import logsumexp


class PositiveMode(str, Enum):
    SIBLING_ONLY = "sibling_only"
    CLUSTER_EXTENDED = "cluster_extended"


class EmptyNegativePolicy(str, Enum):
    SKIP_ANCHOR = "skip_anchor"
    ERROR = "error"


class PairLabel(IntEnum):
    SELF = 0
    POSITIVE = 1
    NEGATIVE = 2


class PairTruth(IntEnum):
    SELF = 0
    TRUE_POS = 1
    TRUE_NEG = 2
    FALSE_NEG = 3
    FALSE_POS = 4


class DegenerateBatchError(ValueError):
    """Every anchor in the batch lacks a negative (e.g. one cluster only)."""

    def __init__(self, msg, skipped=0, clusters=None):
        super().__init__(msg)
        self.skipped = skipped
        self.clusters = clusters


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    positive_mode: PositiveMode = PositiveMode.SIBLING_ONLY
    empty_negative_policy: EmptyNegativePolicy = EmptyNegativePolicy.SKIP_ANCHOR

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "positive_mode", PositiveMode(self.positive_mode))
        object.__setattr__(self, "empty_negative_policy",
                           EmptyNegativePolicy(self.empty_negative_policy))


@dataclass(frozen=True)
class BatchIndex:
    """View bookkeeping for one batch.

    Cluster ids are per view.  Normally siblings must share one; with
    ``per_view_clusters`` that check is lifted, so ``cluster_ids =
    arange(M)`` turns the cluster-aware loss back into plain NT-Xent.
    """

    source_ids: np.ndarray
    cluster_ids: np.ndarray = None
    per_view_clusters: bool = False

    def __post_init__(self):
        src = np.asarray(self.source_ids, dtype=np.int64)
        m = src.size
        if m % 2:
            raise ValueError("number of views must be even")
        _, counts = np.unique(src, return_counts=True)
        if np.any(counts != 2):
            raise ValueError("each source image must contribute exactly two views")
        object.__setattr__(self, "source_ids", src)
        if self.cluster_ids is not None:
            cl = np.asarray(self.cluster_ids, dtype=np.int64)
            if cl.shape != src.shape:
                raise ValueError("cluster_ids must have one entry per view")
            sib = self.siblings
            if not self.per_view_clusters and np.any(cl != cl[sib]):
                raise ValueError("sibling views must share a cluster id")
            object.__setattr__(self, "cluster_ids", cl)

    @classmethod
    def interleaved(cls, batch_size, cluster_ids=None):
        """Views (2b, 2b+1) come from image b; per-image cluster ids are repeated."""
        cl = None if cluster_ids is None else np.repeat(np.asarray(cluster_ids), 2)
        return cls(np.repeat(np.arange(batch_size), 2), cl)

    @property
    def num_views(self):
        return self.source_ids.size

    @property
    def batch_size(self):
        return self.source_ids.size // 2

    @property
    def siblings(self):
        src = self.source_ids
        order = np.argsort(src, kind="stable")
        sib = np.empty_like(order)
        sib[order[0::2]] = order[1::2]
        sib[order[1::2]] = order[0::2]
        return sib


@dataclass
class PairLabelMatrix:
    labels: np.ndarray
    truth: np.ndarray = None

    def count(self, label):
        arr = self.truth if isinstance(label, PairTruth) else self.labels
        return int(np.sum(arr == label))


def cosine_sim(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def pseudo_label_matrix(batch_index, use_clusters=False, class_ids=None):
    """Label every ordered view pair as SELF, POSITIVE or NEGATIVE.

    With ``class_ids`` (hidden per-view classes) a diagnostic overlay marks
    each pair TRUE_POS / TRUE_NEG / FALSE_NEG / FALSE_POS.
    """
    m = batch_index.num_views
    if use_clusters:
        if batch_index.cluster_ids is None:
            raise ValueError("cluster mode needs cluster ids")
        key = batch_index.cluster_ids
    else:
        key = batch_index.source_ids
    same = key[:, None] == key[None, :]
    labels = np.where(same, PairLabel.POSITIVE, PairLabel.NEGATIVE).astype(np.int8)
    np.fill_diagonal(labels, PairLabel.SELF)
    truth = None
    if class_ids is not None:
        cls = np.asarray(class_ids)
        if cls.shape != (m,):
            raise ValueError("class_ids must have one entry per view")
        same_cls = cls[:, None] == cls[None, :]
        pos = labels == PairLabel.POSITIVE
        neg = labels == PairLabel.NEGATIVE
        truth = np.zeros((m, m), dtype=np.int8)
        truth[pos & same_cls] = PairTruth.TRUE_POS
        truth[pos & ~same_cls] = PairTruth.FALSE_POS
        truth[neg & ~same_cls] = PairTruth.TRUE_NEG
        truth[neg & same_cls] = PairTruth.FALSE_NEG
        np.fill_diagonal(truth, PairTruth.SELF)
    return PairLabelMatrix(labels, truth)


def _normalize(z):
    n = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero embedding row")
    return z / n, n


def _contrastive(z, numer_mask, denom_mask, temperature, policy, skipped_out=None):
    """Shared core: masks are M x M booleans (row = anchor)."""
    zn, norms = _normalize(np.asarray(z, dtype=np.float64))
    s = zn @ zn.T / temperature
    active = denom_mask.any(axis=1)
    n_skip = int((~active).sum())
    if skipped_out is not None:
        skipped_out.append(n_skip)
    if n_skip and policy is EmptyNegativePolicy.ERROR:
        raise DegenerateBatchError(f"{n_skip} anchors have no negatives", n_skip)
    if not active.any():
        raise DegenerateBatchError("no anchor in the batch has a negative", n_skip)
    masked = np.where(denom_mask, s, -np.inf)
    lse = np.zeros(s.shape[0])
    lse[active] = logsumexp(masked[active], axis=1)
    npos = numer_mask.sum(axis=1)
    num = np.where(numer_mask, s, 0.0).sum(axis=1) / np.maximum(npos, 1)
    per_anchor = np.where(active, lse - num, 0.0)
    n_act = int(active.sum())
    loss = per_anchor[active].sum() / n_act

    # dL/ds: softmax over the denominator set minus numerator weights
    soft = np.zeros_like(s)
    soft[active] = np.exp(masked[active] - lse[active, None])
    g = soft - numer_mask / np.maximum(npos, 1)[:, None]
    g[~active] = 0.0
    g /= n_act * temperature
    dzn = (g + g.T) @ zn
    # back through row normalisation
    dz = (dzn - zn * np.sum(dzn * zn, axis=1, keepdims=True)) / norms
    return loss, dz


def ntxent(z, batch_index, cfg=LossConfig()):
    """Mean NT-Xent over all anchors.  Returns (loss, dL/dz)."""
    m = batch_index.num_views
    sib = batch_index.siblings
    numer = np.zeros((m, m), dtype=bool)
    numer[np.arange(m), sib] = True
    denom = ~np.eye(m, dtype=bool)
    return _contrastive(z, numer, denom, cfg.temperature, EmptyNegativePolicy.SKIP_ANCHOR)


def cluster_aware_ntxent(z, batch_index, cfg=LossConfig(), skipped_out=None):
    """Cluster-masked NT-Xent.  Returns (loss, dL/dz).

    Anchors whose cluster fills the whole batch have an empty denominator;
    under SKIP_ANCHOR they are dropped from the mean.  ``skipped_out``, if
    given, receives the number of skipped anchors.
    """
    if batch_index.cluster_ids is None:
        raise ValueError("cluster-aware loss needs cluster ids")
    m = batch_index.num_views
    c = batch_index.cluster_ids
    same = c[:, None] == c[None, :]
    eye = np.eye(m, dtype=bool)
    if cfg.positive_mode is PositiveMode.CLUSTER_EXTENDED:
        numer = same & ~eye
    else:
        numer = np.zeros((m, m), dtype=bool)
        numer[np.arange(m), batch_index.siblings] = True
    return _contrastive(z, numer, ~same, cfg.temperature, cfg.empty_negative_policy, skipped_out)
