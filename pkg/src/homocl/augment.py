"""Two-view augmentation: random resized crop, flip, colour jitter, grayscale."""

from dataclasses import dataclass

import numpy as np

from . import kernels

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    jitter_strength: float = 0.4
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    output_size: int = 32
    aspect_min: float = 3.0 / 4.0
    aspect_max: float = 4.0 / 3.0

    def __post_init__(self):
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ValueError("need 0 < crop_scale_min <= crop_scale_max <= 1")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be non-negative")
        if self.output_size < 1:
            raise ValueError("output_size must be positive")

    @classmethod
    def identity(cls, output_size=32):
        return cls(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, output_size, 1.0, 1.0)


@dataclass
class View:
    pixels: np.ndarray
    source_index: int


def sample_crop_box(h, w, scale_range, rng, aspect_range=(1.0, 1.0)):
    """Draw a (top, left, height, width) rectangle covering a random area fraction."""
    lo, hi = scale_range
    area = h * w * rng.uniform(lo, hi)
    log_r = rng.uniform(np.log(aspect_range[0]), np.log(aspect_range[1]))
    ratio = np.exp(log_r)
    ch = min(float(h), max(1.0, np.sqrt(area / ratio)))
    cw = min(float(w), max(1.0, np.sqrt(area * ratio)))
    top = rng.uniform(0.0, h - ch)
    left = rng.uniform(0.0, w - cw)
    return np.array([top, left, ch, cw])


def random_crop_resize(img, scale_range, rng, output_size=None, aspect_range=(1.0, 1.0)):
    h, w = img.shape[:2]
    size = output_size or h
    box = sample_crop_box(h, w, scale_range, rng, aspect_range)
    out = kernels.crop_resize(img[None], box[None], size)[0]
    return np.clip(out, 0.0, 1.0)


def center_crop(images, output_size):
    """Full-frame resize used for un-augmented feature extraction."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    if h == w == output_size:
        return images
    boxes = np.tile([0.0, 0.0, float(h), float(w)], (n, 1))
    return kernels.crop_resize(images, boxes, output_size)


def hflip(pixels):
    return pixels[..., :, ::-1, :]


def to_grayscale(pixels):
    gray = pixels @ LUMA.astype(pixels.dtype)
    return np.repeat(gray[..., None], pixels.shape[-1], axis=-1)


def _luma(pixels):
    if pixels.shape[-1] == 3:
        return pixels @ LUMA.astype(pixels.dtype)
    return pixels.mean(axis=-1)


def apply_jitter(pixels, brightness, contrast, saturation):
    """Apply fixed brightness/contrast/saturation factors, then clamp."""
    out = pixels * brightness
    mean = _luma(out).mean()
    out = (out - mean) * contrast + mean
    gray = _luma(out)[..., None]
    out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0)


def color_jitter(pixels, strength, rng):
    if strength < 0:
        raise ValueError("strength must be non-negative")
    b, c, s = rng.uniform(1.0 - strength, 1.0 + strength, size=3)
    return apply_jitter(pixels, b, c, s).astype(pixels.dtype, copy=False)


def _augment_one(img, cfg, rng):
    out = random_crop_resize(
        img, (cfg.crop_scale_min, cfg.crop_scale_max), rng, cfg.output_size,
        (cfg.aspect_min, cfg.aspect_max))
    if rng.random() < cfg.flip_prob:
        out = hflip(out)
    if rng.random() < cfg.jitter_prob:
        out = color_jitter(out, cfg.jitter_strength, rng)
    if rng.random() < cfg.grayscale_prob:
        out = to_grayscale(out)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def make_views(img, cfg, rng, source_index=0):
    """Two independent augmentations of one image."""
    return (View(_augment_one(img, cfg, rng), source_index),
            View(_augment_one(img, cfg, rng), source_index))


def make_view_batch(images, cfg, rng):
    """Augment B images into 2B views laid out as sibling pairs (2b, 2b+1).

    Random draws are made per view in a fixed order, so the result is a
    pure function of the generator state.  Returns (views, source_index).
    """
    images = np.asarray(images)
    b, h, w, c = images.shape
    m = 2 * b
    src = np.repeat(np.arange(b), 2)
    boxes = np.empty((m, 4))
    u = np.empty((m, 3))
    jit = np.empty((m, 3))
    for v in range(m):
        boxes[v] = sample_crop_box(h, w, (cfg.crop_scale_min, cfg.crop_scale_max), rng,
                                   (cfg.aspect_min, cfg.aspect_max))
        u[v] = rng.random(3)
        jit[v] = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength, size=3)
    views = kernels.crop_resize(images[src], boxes, cfg.output_size)
    flip = u[:, 0] < cfg.flip_prob
    views[flip] = views[flip][:, :, ::-1, :]
    do_jit = u[:, 1] < cfg.jitter_prob
    if np.any(do_jit):
        x = views[do_jit].astype(np.float64)
        bri, con, sat = (jit[do_jit, i][:, None, None, None] for i in range(3))
        x = x * bri
        mean = _luma(x).mean(axis=(1, 2))[:, None, None, None]
        x = (x - mean) * con + mean
        gray = _luma(x)[..., None]
        x = gray + (x - gray) * sat
        views[do_jit] = np.clip(x, 0.0, 1.0)
    gs = u[:, 2] < cfg.grayscale_prob
    if np.any(gs):
        views[gs] = to_grayscale(views[gs])
    np.clip(views, 0.0, 1.0, out=views)
    return views, src
