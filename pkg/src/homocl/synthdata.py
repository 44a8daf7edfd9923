"""Synthetic class-imbalanced image datasets with controllable homogeneity.

Each class owns a smooth random prototype image; a sample is its class
prototype shifted by a few pixels plus Gaussian pixel noise.  Datasets
can be mixed across domains and persisted in a small binary format.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}

MAGIC = b"HCL1"
EXT_MAGIC = b"HCLX"
_HEADER = struct.Struct("<4s6I")
_RECORD = np.dtype([("class_id", "<u4"), ("split", "u1")])

# Published anchor frequencies for the two Mars benchmarks.
MSL_CLASSES, MSL_MAX, MSL_MIN = 19, 0.3476, 0.0034
HIRISE_CLASSES, HIRISE_MAX, HIRISE_MIN = 8, 0.8139, 0.0068
# Reported FN-pairs-per-batch for 100K Curiosity images at batch size 128.
MSL_FN_PERCENT, MSL_FN_BATCH = 15.0, 128


class DatasetFormatError(ValueError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class ClassDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size < 1:
            raise ValueError("distribution needs at least one class")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def __eq__(self, other):
        return isinstance(other, ClassDistribution) and np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())

    @property
    def num_classes(self):
        return self.weights.size

    @property
    def collision_probability(self):
        """Probability that two independent draws share a class (sum of p^2)."""
        return float(np.dot(self.weights, self.weights))


def _anchored_geometric(k, hi, lo, ratio):
    # max and min pinned; the k-2 middle weights form a geometric
    # progression with the given ratio, scaled to fill the remaining mass
    steps = np.arange(k - 2, dtype=np.float64)
    mid = ratio ** steps
    mid *= (1.0 - hi - lo) / mid.sum()
    return np.concatenate([[hi], mid, [lo]])


def _fit_ratio(k, hi, lo, collision):
    def excess(r):
        p = _anchored_geometric(k, hi, lo, r)
        return float(np.dot(p, p)) - collision
    return brentq(excess, 1e-3, 1.0, xtol=1e-15)


def _floor_ratio(k, hi, lo):
    # ratio at which the smallest middle weight meets the floor anchor
    def excess(r):
        return _anchored_geometric(k, hi, lo, r)[-2] - lo
    return brentq(excess, 1e-3, 1.0 - 1e-12, xtol=1e-15)


def msl_like():
    """19-class skewed distribution shaped after the MSL rover benchmark.

    The largest and smallest class keep their published frequencies.  The
    middle classes decay geometrically, with the ratio fitted so that the
    false-negative pair rate at batch size 128 equals the published 15.0%.
    """
    b = MSL_FN_BATCH
    collision = MSL_FN_PERCENT / 100.0 * (2 * b - 1) / (2 * (b - 1))
    r = _fit_ratio(MSL_CLASSES, MSL_MAX, MSL_MIN, collision)
    return ClassDistribution(_anchored_geometric(MSL_CLASSES, MSL_MAX, MSL_MIN, r))


def hirise_like():
    """8-class orbital distribution: published max/min, geometric middle."""
    r = _floor_ratio(HIRISE_CLASSES, HIRISE_MAX, HIRISE_MIN)
    return ClassDistribution(_anchored_geometric(HIRISE_CLASSES, HIRISE_MAX, HIRISE_MIN, r))


def uniform(k):
    if k < 1:
        raise ValueError("class count must be positive")
    return ClassDistribution(np.full(k, 1.0 / k))


def skewed(k, max_weight):
    """One dominant class of weight ``max_weight``; the rest share evenly."""
    if k < 2 or not 0 < max_weight < 1:
        raise ValueError("need k >= 2 and 0 < max_weight < 1")
    w = np.full(k, (1.0 - max_weight) / (k - 1))
    w[0] = max_weight
    return ClassDistribution(w)


def make_distribution(kind, arg=None):
    """Build a :class:`ClassDistribution`.

    ``kind`` is one of ``"uniform"`` (``arg`` = class count), ``"explicit"``
    (``arg`` = weights), ``"msl"``/``"msl_like"`` or ``"hirise"``/``"hirise_like"``.
    """
    if kind == "uniform":
        return uniform(int(arg))
    if kind == "explicit":
        return ClassDistribution(np.asarray(arg, dtype=np.float64))
    if kind in ("msl", "msl_like"):
        return msl_like()
    if kind in ("hirise", "hirise_like"):
        return hirise_like()
    raise ValueError(f"unknown distribution kind {kind!r}")


@dataclass(frozen=True)
class SynthesisSpec:
    class_count: int
    image_size: int = 32
    channels: int = 3
    samples: int = 1000
    prototype_noise_std: float = 0.1
    overlap_shift_max: int = 2
    seed: int = 0
    # Passes of the 3x3 box filter used to smooth prototypes; fewer passes
    # give busier, higher-frequency textures.
    smooth_passes: int = 1
    # When > 0 the class base pattern is a random tile of this size repeated
    # over the image (a stationary texture); 0 uses one full-size pattern.
    tile_size: int = 0
    # Weight of a per-sample random texture blended over the class pattern:
    # image-specific content that is shared by both views of an image but
    # says nothing about its class.
    instance_texture: float = 0.0
    split_fractions: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.samples < 1:
            raise ValueError("samples must be positive")
        if not 0.0 <= self.prototype_noise_std <= 1.0:
            raise ValueError("prototype_noise_std must lie in [0, 1]")
        if self.overlap_shift_max < 0:
            raise ValueError("overlap_shift_max must be non-negative")
        if not 0.0 <= self.instance_texture <= 1.0:
            raise ValueError("instance_texture must lie in [0, 1]")


@dataclass
class Dataset:
    """A set of images with hidden class labels.

    ``pixels`` is (N, H, W, C) float32 in [0, 1].  ``domain_ids`` is
    per-sample so that mixed datasets keep provenance.
    """

    pixels: np.ndarray
    class_ids: np.ndarray
    distribution: ClassDistribution
    domain_id: int = 0
    splits: np.ndarray = None
    sample_ids: np.ndarray = None
    domain_ids: np.ndarray = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.pixels.shape[0]
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.splits is None:
            self.splits = np.zeros(n, dtype=np.uint8)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.domain_ids is None:
            self.domain_ids = np.full(n, self.domain_id, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        if not (self.class_ids.shape == self.splits.shape == self.sample_ids.shape == (n,)):
            raise ValueError("per-sample arrays must all have length N")

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def num_classes(self):
        return len(self.distribution)

    @property
    def image_shape(self):
        return self.pixels.shape[1:]

    def split_mask(self, split):
        return self.splits == SPLIT_CODES[split]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            pixels=self.pixels[idx],
            class_ids=self.class_ids[idx],
            distribution=self.distribution,
            domain_id=self.domain_id,
            splits=self.splits[idx],
            sample_ids=self.sample_ids[idx],
            domain_ids=self.domain_ids[idx],
        )

    def split(self, name):
        return self.subset(np.flatnonzero(self.split_mask(name)))

    def validate(self):
        if self.pixels.ndim != 4:
            raise ValueError("pixels must be N x H x W x C")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise ValueError("pixel values outside [0, 1]")
        if np.any(self.class_ids < 0) or np.any(self.class_ids >= self.num_classes):
            raise ValueError("class id out of range")
        if np.unique(self.sample_ids).size != len(self):
            raise ValueError("duplicate sample ids")

    def equals(self, other):
        return (
            self.domain_id == other.domain_id
            and self.distribution == other.distribution
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.class_ids, other.class_ids)
            and np.array_equal(self.splits, other.splits)
            and np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.domain_ids, other.domain_ids)
        )


def box_blur3(img):
    """3x3 box filter with edge replication, per channel."""
    h, w = img.shape[:2]
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + h, dx:dx + w]
    return out / 9.0


def _box_blur3_wrap(img):
    out = np.zeros_like(img)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out += np.roll(img, (dy, dx), axis=(0, 1))
    return out / 9.0


def make_prototypes(spec, domain_id=0):
    """Per-class base images: smoothed uniform noise, contrast-stretched to [0, 1]."""
    rng = np.random.default_rng([spec.seed, domain_id, 0x5052])
    s, c = spec.image_size, spec.channels
    t = spec.tile_size
    protos = np.empty((spec.class_count, s, s, c))
    for k in range(spec.class_count):
        if t:
            tile = rng.random((t, t, c))
            for _ in range(spec.smooth_passes):
                tile = _box_blur3_wrap(tile)
            reps = -(-s // t)
            img = np.tile(tile, (reps, reps, 1))[:s, :s]
        else:
            img = rng.random((s, s, c))
            for _ in range(spec.smooth_passes):
                img = box_blur3(img)
        lo, hi = img.min(), img.max()
        protos[k] = (img - lo) / (hi - lo) if hi > lo else 0.5
    return protos


def _shift(img, dy, dx):
    # translate with edge replication so content stays in frame
    h, w = img.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[ys][:, xs]


def _assign_splits(n, fractions, rng):
    f = np.asarray(fractions, dtype=np.float64)
    f = f / f.sum()
    counts = np.floor(f * n).astype(int)
    counts[0] += n - counts.sum()
    tags = np.repeat(np.arange(3, dtype=np.uint8), counts)
    return tags[rng.permutation(n)]


def generate_dataset(spec, dist, domain_id=0):
    """Draw ``spec.samples`` images with class ids i.i.d. from ``dist``.

    Each sample uses its own counter-based RNG stream keyed by
    (seed, domain, index), so the output does not depend on generation order.
    """
    if len(dist) != spec.class_count:
        raise ValueError(f"distribution has {len(dist)} classes, spec has {spec.class_count}")
    n, s, c = spec.samples, spec.image_size, spec.channels
    root = np.random.default_rng([spec.seed, domain_id, 0x4C42])
    class_ids = root.choice(spec.class_count, size=n, p=dist.weights)
    splits = _assign_splits(n, spec.split_fractions, root)
    protos = make_prototypes(spec, domain_id)
    pixels = np.empty((n, s, s, c), dtype=np.float32)
    m = spec.overlap_shift_max
    for i in range(n):
        r = np.random.default_rng([spec.seed, domain_id, 0x5350, i])
        dy, dx = r.integers(-m, m + 1, size=2) if m > 0 else (0, 0)
        img = _shift(protos[class_ids[i]], dy, dx)
        if spec.instance_texture > 0:
            own = r.random((s, s, c))
            for _ in range(spec.smooth_passes):
                own = box_blur3(own)
            own = (own - own.min()) / max(own.max() - own.min(), 1e-12)
            img = (1.0 - spec.instance_texture) * img + spec.instance_texture * own
        if spec.prototype_noise_std > 0:
            img = img + r.normal(0.0, spec.prototype_noise_std, size=img.shape)
        pixels[i] = np.clip(img, 0.0, 1.0)
    return Dataset(
        pixels=pixels,
        class_ids=class_ids,
        distribution=dist,
        domain_id=domain_id,
        splits=splits,
        meta={"spec": spec},
    )


def mixed_distribution(a, b, fraction_a):
    """Class distribution of a fraction_a : 1-fraction_a mix with disjoint class ids."""
    return ClassDistribution(np.concatenate([fraction_a * a.weights, (1.0 - fraction_a) * b.weights]))


def mix_datasets(a, b, fraction_a, total, seed=0):
    """Concatenate and shuffle samples from two domains.

    ``round(fraction_a * total)`` samples come from ``a`` (without
    replacement), the rest from ``b``.  Class ids of ``b`` are offset by
    ``a.num_classes`` so the two label spaces stay disjoint.  Samples are
    renumbered 0..N-1; the originating (domain, sample id) pairs are kept
    in ``meta["origin"]``.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both datasets must be non-empty")
    if not 0.0 <= fraction_a <= 1.0:
        raise ValueError("fraction_a must lie in [0, 1]")
    na = int(round(fraction_a * total))
    nb = total - na
    if na > len(a) or nb > len(b):
        raise ValueError(f"requested {na}+{nb} samples from datasets of size {len(a)}+{len(b)}")
    rng = np.random.default_rng([seed, 0x4D49])
    ia = rng.choice(len(a), size=na, replace=False)
    ib = rng.choice(len(b), size=nb, replace=False)
    pixels = np.concatenate([a.pixels[ia], b.pixels[ib]])
    class_ids = np.concatenate([a.class_ids[ia], b.class_ids[ib] + a.num_classes])
    splits = np.concatenate([a.splits[ia], b.splits[ib]])
    domains = np.concatenate([a.domain_ids[ia], b.domain_ids[ib]])
    origin = np.concatenate([a.sample_ids[ia], b.sample_ids[ib]])
    perm = rng.permutation(total)
    frac = na / total if total else fraction_a
    return Dataset(
        pixels=pixels[perm],
        class_ids=class_ids[perm],
        distribution=mixed_distribution(a.distribution, b.distribution, frac),
        domain_id=a.domain_id,
        splits=splits[perm],
        domain_ids=domains[perm],
        meta={"origin": origin[perm]},
    )


def save_dataset(d, path):
    """Write ``d`` in the HCL1 format plus an HCLX extension block.

    The core layout is the header, N (class id, split) records and the
    f32 pixels.  The extension block stores the class weights (f64) and
    per-sample domain ids so a round trip is exact.
    """
    n, h, w, c = d.pixels.shape
    k = d.num_classes
    rec = np.empty(n, dtype=_RECORD)
    rec["class_id"] = d.class_ids
    rec["split"] = d.splits
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, h, w, c, k, d.domain_id))
        fh.write(rec.tobytes())
        fh.write(np.ascontiguousarray(d.pixels, dtype="<f4").tobytes())
        fh.write(EXT_MAGIC)
        fh.write(np.asarray(d.distribution.weights, dtype="<f8").tobytes())
        fh.write(np.asarray(d.domain_ids, dtype="<u4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw)]:
            raise DatasetFormatError("bad magic")
        raise TruncatedFileError("file shorter than header")
    magic, n, h, w, c, k, domain = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if k < 1 or h < 1 or w < 1 or c < 1:
        raise DatasetFormatError("malformed header")
    off = _HEADER.size
    rec_bytes = n * _RECORD.itemsize
    pix_bytes = n * h * w * c * 4
    if len(raw) < off + rec_bytes + pix_bytes:
        raise TruncatedFileError(
            f"expected at least {off + rec_bytes + pix_bytes} bytes, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=_RECORD, count=n, offset=off)
    off += rec_bytes
    pixels = np.frombuffer(raw, dtype="<f4", count=n * h * w * c, offset=off)
    pixels = pixels.reshape(n, h, w, c).astype(np.float32)
    off += pix_bytes
    class_ids = rec["class_id"].astype(np.int64)
    if np.any(class_ids >= k):
        raise DatasetFormatError("class id exceeds class count")
    if np.any(rec["split"] > 2):
        raise DatasetFormatError("invalid split tag")
    domain_ids = None
    rest = raw[off:]
    if rest:
        need = 4 + 8 * k + 4 * n
        if rest[:4] != EXT_MAGIC:
            raise DatasetFormatError("unrecognised trailing data")
        if len(rest) != need:
            raise TruncatedFileError("extension block has the wrong size")
        weights = np.frombuffer(rest, dtype="<f8", count=k, offset=4).astype(np.float64)
        domain_ids = np.frombuffer(rest, dtype="<u4", count=n, offset=4 + 8 * k).astype(np.int64)
        dist = ClassDistribution(weights)
    else:
        counts = np.bincount(class_ids, minlength=k).astype(np.float64)
        dist = ClassDistribution(counts / counts.sum()) if n else uniform(k)
    return Dataset(
        pixels=pixels,
        class_ids=class_ids,
        distribution=dist,
        domain_id=domain,
        splits=rec["split"].copy(),
        domain_ids=domain_ids,
    )


def read_ppm(path):
    """Read a binary PPM (P6) image into an H x W x 3 float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise DatasetFormatError("only binary P6 PPM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else ">u2"
    count = w * h * 3
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float32) / maxval


def write_ppm(path, img):
    img = np.clip(np.asarray(img), 0, 1)
    h, w = img.shape[:2]
    if img.ndim == 2 or img.shape[2] == 1:
        img = np.repeat(img.reshape(h, w, 1), 3, axis=2)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.round(img * 255).astype(np.uint8).tobytes())
