"""Small convolutional encoder with a 3-layer projection head.

Architecture (NHWC input, H and W divisible by 4)::

    conv3x3(C->8) relu avgpool2 -> conv3x3(8->16) relu avgpool2
    -> global average pool (16) -> affine(16->64) relu          = h  (backbone)
    -> affine(64->128) relu -> affine(128->128) relu -> affine(128->128)
    -> u / (|u| + eps)                                           = z  (projection)

Gradients are derived by hand (reverse mode over the fixed layer graph).
Parameters are kept in a dict whose key order is the canonical layout
used by checkpoints.  Computation runs in the dtype of the parameters.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

NORM_EPS = 1e-12
CONV_WIDTHS = (8, 16)
FEATURE_DIM = 64
PROJ_DIMS = (128, 128, 128)

PARAM_ORDER = (
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b",
    "proj1.w", "proj1.b", "proj2.w", "proj2.b", "proj3.w", "proj3.b",
)
BACKBONE_KEYS = PARAM_ORDER[:6]

CKPT_MAGIC = b"HCKP"
CKPT_VERSION = 1


class StaleRecordError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def param_shapes(in_channels):
    c1, c2 = CONV_WIDTHS
    p1, p2, p3 = PROJ_DIMS
    return {
        "conv1.w": (3, 3, in_channels, c1), "conv1.b": (c1,),
        "conv2.w": (3, 3, c1, c2), "conv2.b": (c2,),
        "fc.w": (c2, FEATURE_DIM), "fc.b": (FEATURE_DIM,),
        "proj1.w": (FEATURE_DIM, p1), "proj1.b": (p1,),
        "proj2.w": (p1, p2), "proj2.b": (p2,),
        "proj3.w": (p2, p3), "proj3.b": (p3,),
    }


def param_count(in_channels):
    return sum(int(np.prod(s)) for s in param_shapes(in_channels).values())


def init_params(in_channels=3, seed=0, dtype=np.float32):
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng([seed, 0x494E4954])
    params = {}
    for name, shape in param_shapes(in_channels).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def zero_params(in_channels=3, dtype=np.float32):
    return {k: np.zeros(s, dtype=dtype) for k, s in param_shapes(in_channels).items()}


def cast_params(params, dtype):
    return {k: v.astype(dtype) for k, v in params.items()}


def flatten_params(params):
    return np.concatenate([params[k].ravel() for k in PARAM_ORDER])


def unflatten_params(flat, in_channels, dtype=None):
    out, off = {}, 0
    for name, shape in param_shapes(in_channels).items():
        size = int(np.prod(shape))
        out[name] = flat[off:off + size].reshape(shape).astype(dtype or flat.dtype)
        off += size
    if off != flat.size:
        raise CheckpointError(f"expected {off} parameters, got {flat.size}")
    return out


def _version(params):
    # content fingerprint used to detect records from other parameters
    return tuple(hash(params[k].tobytes()) for k in PARAM_ORDER)


@dataclass
class ForwardRecord:
    h: np.ndarray
    z: np.ndarray
    cache: dict = field(repr=False)
    version: tuple = field(repr=False, default=None)


def _conv(x, w, b):
    n, hh, ww, _ = x.shape
    cols = kernels.im2col3x3(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(n, hh, ww, w.shape[-1]), cols


def _pool(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _unpool(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * g.dtype.type(0.25)


def backbone(params, x):
    """Backbone features only (no cache)."""
    return forward(params, x, keep_cache=False).h


def forward(params, x, keep_cache=True):
    x = np.asarray(x)
    dtype = params["conv1.w"].dtype
    if x.ndim != 4 or x.shape[0] < 1:
        raise ValueError("input must be a non-empty N x H x W x C batch")
    if x.shape[3] != params["conv1.w"].shape[2]:
        raise ValueError(f"input has {x.shape[3]} channels, encoder expects {params['conv1.w'].shape[2]}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError("image height and width must be divisible by 4")
    x = np.ascontiguousarray(x, dtype=dtype)
    a1, cols1 = _conv(x, params["conv1.w"], params["conv1.b"])
    r1 = np.maximum(a1, 0)
    p1 = _pool(r1)
    a2, cols2 = _conv(p1, params["conv2.w"], params["conv2.b"])
    r2 = np.maximum(a2, 0)
    p2 = _pool(r2)
    g = p2.mean(axis=(1, 2))
    hpre = g @ params["fc.w"] + params["fc.b"]
    h = np.maximum(hpre, 0)
    q1 = h @ params["proj1.w"] + params["proj1.b"]
    s1 = np.maximum(q1, 0)
    q2 = s1 @ params["proj2.w"] + params["proj2.b"]
    s2 = np.maximum(q2, 0)
    u = s2 @ params["proj3.w"] + params["proj3.b"]
    norm = np.sqrt(np.sum(u * u, axis=1, keepdims=True))
    z = u / (norm + NORM_EPS)
    cache = {}
    if keep_cache:
        cache = dict(x_shape=x.shape, cols1=cols1, a1=a1, p1_shape=p1.shape, cols2=cols2,
                     a2=a2, p2_shape=p2.shape, g=g, hpre=hpre, h=h, q1=q1, s1=s1,
                     q2=q2, s2=s2, u=u, norm=norm)
    return ForwardRecord(h=h, z=z, cache=cache, version=_version(params))


def normalize_backward(u, dz, eps=NORM_EPS):
    """Vector-Jacobian product of z = u / (|u| + eps)."""
    n = np.sqrt(np.sum(u * u, axis=1, keepdims=True))
    d = n + eps
    dot = np.sum(u * dz, axis=1, keepdims=True)
    safe = np.where(n > 0, n, 1)
    return dz / d - u * dot / (safe * d * d) * (n > 0)


def backward(record, params, dz, dh=None):
    """Gradients of a scalar loss w.r.t. all parameters.

    ``dz`` is dL/dz (M x 128); ``dh`` optionally adds a direct gradient on
    the backbone features.  Returns a dict keyed like ``params``.
    """
    if not record.cache:
        raise StaleRecordError("forward record has no cached intermediates")
    if record.version != _version(params):
        raise StaleRecordError("forward record was produced with different parameters")
    c = record.cache
    dtype = params["conv1.w"].dtype
    dz = np.asarray(dz, dtype=dtype)
    grads = {}
    du = normalize_backward(c["u"], dz)
    grads["proj3.w"] = c["s2"].T @ du
    grads["proj3.b"] = du.sum(axis=0)
    ds2 = du @ params["proj3.w"].T
    dq2 = ds2 * (c["q2"] > 0)
    grads["proj2.w"] = c["s1"].T @ dq2
    grads["proj2.b"] = dq2.sum(axis=0)
    ds1 = dq2 @ params["proj2.w"].T
    dq1 = ds1 * (c["q1"] > 0)
    grads["proj1.w"] = c["h"].T @ dq1
    grads["proj1.b"] = dq1.sum(axis=0)
    dhh = dq1 @ params["proj1.w"].T
    if dh is not None:
        dhh = dhh + np.asarray(dh, dtype=dtype)
    dhpre = dhh * (c["hpre"] > 0)
    grads["fc.w"] = c["g"].T @ dhpre
    grads["fc.b"] = dhpre.sum(axis=0)
    dg = dhpre @ params["fc.w"].T
    n, ph, pw, ch = c["p2_shape"]
    dp2 = np.broadcast_to(dg[:, None, None, :] / dtype.type(ph * pw), c["p2_shape"])
    da2 = _unpool(dp2) * (c["a2"] > 0)
    da2f = da2.reshape(-1, da2.shape[-1])
    grads["conv2.w"] = (c["cols2"].T @ da2f).reshape(params["conv2.w"].shape)
    grads["conv2.b"] = da2f.sum(axis=0)
    dcols2 = da2f @ params["conv2.w"].reshape(-1, da2.shape[-1]).T
    dp1 = kernels.col2im3x3(dcols2, c["p1_shape"])
    da1 = _unpool(dp1) * (c["a1"] > 0)
    da1f = da1.reshape(-1, da1.shape[-1])
    grads["conv1.w"] = (c["cols1"].T @ da1f).reshape(params["conv1.w"].shape)
    grads["conv1.b"] = da1f.sum(axis=0)
    return {k: grads[k].astype(dtype, copy=False) for k in PARAM_ORDER}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 3e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params, grads, state):
    """One Adam update in place; weight decay enters as an L2 gradient term.

    Raises :class:`DivergenceError` if any gradient is non-finite.
    """
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(grads[k])):
            raise DivergenceError(f"non-finite gradient in {k}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, p in params.items():
        dt = p.dtype.type
        g = grads[k] + dt(state.weight_decay) * p if state.weight_decay else grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        p -= dt(state.lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(state.eps))
    return params, state


def save_checkpoint(path, params, state=None):
    """HCKP layout: magic, u32 version, u64 parameter count, f32 parameters
    in canonical order, u64 Adam step, f64 lr/decay/beta1/beta2/eps, then
    the f32 first and second moment arrays in the same order."""
    flat = flatten_params(params).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, flat.size))
        fh.write(flat.tobytes())
        if state is None:
            state = AdamState.for_params(params)
        fh.write(struct.pack("<Q5d", state.step, state.lr, state.weight_decay,
                             state.beta1, state.beta2, state.eps))
        fh.write(flatten_params(state.m).astype("<f4").tobytes())
        fh.write(flatten_params(state.v).astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (params, AdamState) as float32 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(raw) < 16:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    base = param_count(0)
    per_channel = param_count(1) - base
    if (count - base) % per_channel or count <= base:
        raise CheckpointError(f"parameter count {count} matches no input width")
    channels = (count - base) // per_channel
    tail = struct.calcsize("<Q5d")
    need = 16 + 4 * count + tail + 8 * count
    if len(raw) != need:
        raise CheckpointError(f"checkpoint size {len(raw)} != expected {need}")
    off = 16
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32)
    off += 4 * count
    step, lr, wd, b1, b2, eps = struct.unpack_from("<Q5d", raw, off)
    off += tail
    m = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32)
    off += 4 * count
    v = np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32)
    params = unflatten_params(flat, channels)
    state = AdamState(m=unflatten_params(m, channels), v=unflatten_params(v, channels),
                      step=step, lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps)
    return params, state
