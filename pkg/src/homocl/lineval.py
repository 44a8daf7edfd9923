"""Linear evaluation on frozen backbone features."""

import csv
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import augment, model
from .synthdata import SPLIT_CODES

FEA_MAGIC = b"HFEA"
SPLIT_MAGIC = b"HFSP"
LABEL_FRACTIONS = (0.05, 0.10, 0.25, 0.5, 1.0)
DECAY_GRID = (0.0, 1e-3, 1e-2, 3e-2, 1e-1)


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureTable:
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    sample_ids: np.ndarray = None

    def __post_init__(self):
        n = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise ValueError("labels and splits must have one entry per row")

    def __len__(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    def rows(self, split):
        if split is None or split == "all":
            return np.arange(len(self))
        return np.flatnonzero(self.splits == SPLIT_CODES[split])


@dataclass
class LinearHead:
    weight: np.ndarray
    bias: np.ndarray

    def logits(self, features):
        return np.asarray(features, dtype=np.float64) @ self.weight + self.bias

    def predict(self, features):
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(features), axis=1)


def extract_features(params, dataset, batch=256, input_size=None):
    """Backbone features of un-augmented images; the encoder is not modified."""
    if dataset.pixels.shape[3] != params["conv1.w"].shape[2]:
        raise ValueError("dataset channel count does not match the encoder")
    size = input_size or dataset.pixels.shape[1]
    feats = []
    for i in range(0, len(dataset), batch):
        x = augment.center_crop(dataset.pixels[i:i + batch], size)
        feats.append(model.backbone(params, x))
    f = np.concatenate(feats) if feats else np.zeros((0, model.FEATURE_DIM), np.float32)
    return FeatureTable(f.astype(np.float32), dataset.class_ids.copy(),
                        dataset.splits.copy(), dataset.sample_ids.copy())


def stratified_subsample(labels, fraction, rng):
    """Indices keeping round(fraction * n_c) of each class, at least one."""
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = max(1, int(round(fraction * idx.size)))
        keep.append(rng.choice(idx, size=n, replace=False) if n < idx.size else idx)
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


def train_linear(table, label_fraction=1.0, epochs=300, lr=0.05, seed=0, num_classes=None,
                 split="train", weight_decay=0.0, hidden_dim=None):
    """Fit a softmax classifier with full-batch Adam.

    Features are standardised with training statistics before fitting and
    the scaling is folded back into the returned affine head.  With
    ``hidden_dim`` the map is factored through a linear hidden layer of
    that width (still affine overall).
    """
    rng = np.random.default_rng([seed, 0x4C45])
    rows = table.rows(split)
    k = int(num_classes or (table.labels.max() + 1))
    sub = rows[stratified_subsample(table.labels[rows], label_fraction, rng)]
    missing = sorted(set(range(k)) - set(np.unique(table.labels[sub]).tolist()))
    if missing:
        warnings.warn(f"classes {missing} absent from the training subsample; they cannot be learned",
                      stacklevel=2)
    x = table.features[sub].astype(np.float64)
    y = table.labels[sub]
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-8] = 1.0
    xs = (x - mu) / sd
    n, f = xs.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    if hidden_dim:
        shapes = {"w1": (f, hidden_dim), "b1": (hidden_dim,), "w2": (hidden_dim, k), "b2": (k,)}
    else:
        shapes = {"w": (f, k), "b": (k,)}
    p = {}
    for name, s in shapes.items():
        p[name] = np.zeros(s) if len(s) == 1 else rng.normal(0, 0.01, size=s)
    m = {kk: np.zeros_like(v) for kk, v in p.items()}
    v = {kk: np.zeros_like(vv) for kk, vv in p.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, epochs + 1):
        if hidden_dim:
            hid = xs @ p["w1"] + p["b1"]
            logits = hid @ p["w2"] + p["b2"]
        else:
            logits = xs @ p["w"] + p["b"]
        prob = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        dl = (prob - onehot) / n
        if hidden_dim:
            g = {"w2": hid.T @ dl, "b2": dl.sum(0)}
            dh = dl @ p["w2"].T
            g["w1"] = xs.T @ dh
            g["b1"] = dh.sum(0)
        else:
            g = {"w": xs.T @ dl, "b": dl.sum(0)}
        for kk in p:
            gk = g[kk] + weight_decay * p[kk]
            m[kk] = b1 * m[kk] + (1 - b1) * gk
            v[kk] = b2 * v[kk] + (1 - b2) * gk * gk
            p[kk] -= lr * (m[kk] / (1 - b1 ** t)) / (np.sqrt(v[kk] / (1 - b2 ** t)) + eps)
    if hidden_dim:
        w = p["w1"] @ p["w2"]
        b = p["b1"] @ p["w2"] + p["b2"]
    else:
        w, b = p["w"], p["b"]
    w_raw = w / sd[:, None]
    b_raw = b - mu @ w_raw
    return LinearHead(w_raw, b_raw)


def evaluate(head, table, split="test"):
    """Top-1 accuracy in percent on one split."""
    rows = table.rows(split)
    if rows.size == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = head.predict(table.features[rows])
    return 100.0 * float(np.mean(pred == table.labels[rows]))


def fit_linear(table, label_fraction=1.0, seed=0, num_classes=None, decay_grid=DECAY_GRID, **kw):
    """Train one head per weight decay in ``decay_grid`` and keep the best on "val".

    The earliest grid entry wins ties.  An explicit ``weight_decay`` or an
    empty validation split skips the search and uses that value (or the
    first grid entry).
    """
    if "weight_decay" in kw or table.rows("val").size == 0:
        kw.setdefault("weight_decay", decay_grid[0])
        return train_linear(table, label_fraction, seed=seed, num_classes=num_classes, **kw)
    best, best_acc = None, -1.0
    for wd in decay_grid:
        head = train_linear(table, label_fraction, seed=seed, num_classes=num_classes,
                            weight_decay=wd, **kw)
        acc = evaluate(head, table, "val")
        if acc > best_acc:
            best, best_acc = head, acc
    return best


def label_fraction_sweep(table, fractions=LABEL_FRACTIONS, seed=0, **kw):
    """Test accuracy per label fraction, with weight decay picked on "val"."""
    out = []
    k = int(table.labels.max()) + 1
    for f in fractions:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            head = fit_linear(table, f, seed=seed, num_classes=k, **kw)
        out.append((f, evaluate(head, table, "test")))
    return out


def export_projection_2d(table, path=None):
    """Project features onto their top-2 principal components.

    Component signs are fixed so the largest-magnitude loading is positive.
    A rank-1 input yields a zero second coordinate.  Optionally writes a
    CSV of ``imageId,x,y,classId``.
    """
    x = np.asarray(table.features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two rows to project")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    tol = s[0] * max(x.shape) * np.finfo(float).eps if s.size else 0.0
    for i in range(min(2, vt.shape[0])):
        if s[i] > tol:
            v = vt[i]
            comps[i] = v * np.sign(v[np.argmax(np.abs(v))])
    coords = xc @ comps.T
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["imageId", "x", "y", "classId"])
            for i, (a, b), c in zip(table.sample_ids, coords, table.labels):
                w.writerow([int(i), repr(float(a)), repr(float(b)), int(c)])
    return coords


def save_features(table, path):
    """HFEA layout: magic, u32 N, u32 F, f32 rows, u32 labels; then an
    HFSP block with N u8 split tags."""
    n, f = table.features.shape
    with open(path, "wb") as fh:
        fh.write(FEA_MAGIC)
        fh.write(struct.pack("<II", n, f))
        fh.write(np.ascontiguousarray(table.features, dtype="<f4").tobytes())
        fh.write(np.asarray(table.labels, dtype="<u4").tobytes())
        fh.write(SPLIT_MAGIC)
        fh.write(np.asarray(table.splits, dtype="u1").tobytes())


def load_features(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FEA_MAGIC:
        raise FeatureFormatError("bad feature-table magic")
    if len(raw) < 12:
        raise FeatureFormatError("truncated feature-table header")
    n, f = struct.unpack_from("<II", raw, 4)
    off = 12
    need = off + 4 * n * f + 4 * n
    if len(raw) < need:
        raise FeatureFormatError("truncated feature table")
    feats = np.frombuffer(raw, dtype="<f4", count=n * f, offset=off).reshape(n, f).astype(np.float32)
    off += 4 * n * f
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    splits = np.zeros(n, dtype=np.uint8)
    if len(raw) > off:
        if raw[off:off + 4] != SPLIT_MAGIC or len(raw) != off + 4 + n:
            raise FeatureFormatError("malformed split block")
        splits = np.frombuffer(raw, dtype="u1", count=n, offset=off + 4).copy()
    return FeatureTable(feats, labels, splits)
