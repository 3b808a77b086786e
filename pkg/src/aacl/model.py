"""Small encoder-decoder segmentation net with explicit backward pass.

Layout is NHWC throughout. The network is::

    conv3x3(3->w1) relu  conv3x3/2(w1->w2) relu  conv3x3(w2->w3) relu
    bilinear x2 upsample  conv1x1(w3->C)

With the default widths ``(16, 32, 32)`` that is about 15k parameters, small
enough for full finite-difference checks and CPU training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_WIDTHS = (16, 32, 32)
PARAM_ORDER = (
    "conv1_w", "conv1_b",
    "conv2_w", "conv2_b",
    "conv3_w", "conv3_b",
    "head_w", "head_b",
)

CKPT_MAGIC = b"AACL"
CKPT_VERSION = 1


def param_shapes(num_classes, widths=DEFAULT_WIDTHS):
    w1, w2, w3 = widths
    return {
        "conv1_w": (3, 3, 3, w1), "conv1_b": (w1,),
        "conv2_w": (3, 3, w1, w2), "conv2_b": (w2,),
        "conv3_w": (3, 3, w2, w3), "conv3_b": (w3,),
        "head_w": (w3, num_classes), "head_b": (num_classes,),
    }


def widths_of(params):
    return (
        params["conv1_w"].shape[3],
        params["conv2_w"].shape[3],
        params["conv3_w"].shape[3],
    )


def num_classes_of(params):
    return params["head_b"].shape[0]


def init_params(seed, num_classes, widths=DEFAULT_WIDTHS, dtype=np.float32):
    """He-uniform weights, zero biases, fully determined by ``seed``."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(num_classes, widths).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


# --- layers ---------------------------------------------------------------

def _im2col(x, stride):
    n, h, w, c = x.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, ho, wo, 3, 3, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[
                :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :
            ]
    return cols


def _col2im(dcols, x_shape, stride):
    n, h, w, c = x_shape
    _, ho, wo = dcols.shape[:3]
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[
                :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :
            ] += dcols[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def conv3x3(x, w, b, stride=1):
    """Zero-padded 3x3 convolution; returns output and the im2col buffer."""
    cols = _im2col(x, stride)
    n, ho, wo = cols.shape[:3]
    cin, cout = w.shape[2], w.shape[3]
    out = cols.reshape(-1, 9 * cin) @ w.reshape(9 * cin, cout) + b
    return out.reshape(n, ho, wo, cout), cols


def conv3x3_backward(dout, cols, w, x_shape, stride=1, need_dx=True):
    cin, cout = w.shape[2], w.shape[3]
    d2 = dout.reshape(-1, cout)
    c2 = cols.reshape(-1, 9 * cin)
    dw = (c2.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(9 * cin, cout).T).reshape(cols.shape)
    return _col2im(dcols, x_shape, stride), dw, db


def _shift(x, axis, direction):
    """Neighbour along ``axis`` with edge clamping (direction -1 or +1)."""
    n = x.shape[axis]
    idx = np.arange(n) + direction
    np.clip(idx, 0, n - 1, out=idx)
    return np.take(x, idx, axis=axis)


def _interleave(even, odd, axis):
    stacked = np.stack([even, odd], axis=axis + 1)
    shape = list(even.shape)
    shape[axis] *= 2
    return stacked.reshape(shape)


def upsample2(x, axes=(1, 2)):
    """Bilinear x2 upsampling with half-pixel centres and edge clamping."""
    for axis in axes:
        even = 0.75 * x + 0.25 * _shift(x, axis, -1)
        odd = 0.75 * x + 0.25 * _shift(x, axis, +1)
        x = _interleave(even, odd, axis)
    return x


def upsample2_backward(g, axes=(1, 2)):
    for axis in reversed(axes):
        sl_even = [slice(None)] * g.ndim
        sl_odd = [slice(None)] * g.ndim
        sl_even[axis] = slice(0, None, 2)
        sl_odd[axis] = slice(1, None, 2)
        ge = g[tuple(sl_even)]
        go = g[tuple(sl_odd)]
        n = ge.shape[axis]
        dx = 0.75 * (ge + go)

        def put(arr, idx):
            s = [slice(None)] * arr.ndim
            s[axis] = idx
            return tuple(s)

        # even[k] read x[k-1] (x[0] at the border), odd[k] read x[k+1] (x[n-1])
        dx[put(dx, slice(0, n - 1))] += 0.25 * ge[put(ge, slice(1, n))]
        dx[put(dx, 0)] += 0.25 * ge[put(ge, 0)]
        dx[put(dx, slice(1, n))] += 0.25 * go[put(go, slice(0, n - 1))]
        dx[put(dx, n - 1)] += 0.25 * go[put(go, n - 1)]
        g = dx
    return g


# --- network --------------------------------------------------------------

def _as_batch(images, dtype):
    x = np.asarray(images, dtype=dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {x.shape}")
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValueError(f"image height and width must be even, got {x.shape[1:3]}")
    return x, single


def forward(params, images, return_cache=False):
    """Logits of shape ``(N, H, W, C)`` (or ``(H, W, C)`` for one image)."""
    x, single = _as_batch(images, params["conv1_w"].dtype)
    z1, cols1 = conv3x3(x, params["conv1_w"], params["conv1_b"], 1)
    a1 = np.maximum(z1, 0)
    z2, cols2 = conv3x3(a1, params["conv2_w"], params["conv2_b"], 2)
    a2 = np.maximum(z2, 0)
    z3, cols3 = conv3x3(a2, params["conv3_w"], params["conv3_b"], 1)
    a3 = np.maximum(z3, 0)
    u = upsample2(a3)
    logits = u @ params["head_w"] + params["head_b"]
    out = logits[0] if single else logits
    if not return_cache:
        return out
    cache = dict(x=x, cols1=cols1, z1=z1, a1=a1, cols2=cols2, z2=z2, a2=a2,
                 cols3=cols3, z3=z3, u=u, single=single)
    return out, cache


def backward(params, images, upstream, cache=None):
    """Gradients of ``sum(upstream * logits)`` with respect to every parameter."""
    if cache is None:
        _, cache = forward(params, images, return_cache=True)
    g = np.asarray(upstream, dtype=params["conv1_w"].dtype)
    if cache["single"]:
        g = g[None]
    grads = {}
    u = cache["u"]
    cw = params["head_w"].shape
    grads["head_w"] = u.reshape(-1, cw[0]).T @ g.reshape(-1, cw[1])
    grads["head_b"] = g.reshape(-1, cw[1]).sum(axis=0)
    du = g @ params["head_w"].T
    da3 = upsample2_backward(du)
    dz3 = da3 * (cache["z3"] > 0)
    da2, grads["conv3_w"], grads["conv3_b"] = conv3x3_backward(
        dz3, cache["cols3"], params["conv3_w"], cache["a2"].shape, 1)
    dz2 = da2 * (cache["z2"] > 0)
    da1, grads["conv2_w"], grads["conv2_b"] = conv3x3_backward(
        dz2, cache["cols2"], params["conv2_w"], cache["a1"].shape, 2)
    dz1 = da1 * (cache["z1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = conv3x3_backward(
        dz1, cache["cols1"], params["conv1_w"], cache["x"].shape, 1, need_dx=False)
    return {name: grads[name] for name in PARAM_ORDER}


def predict(params, images, batch_size=16):
    """Argmax class map for a stack of images."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(params, images[i : i + batch_size]).argmax(axis=-1))
    pred = np.concatenate(out).astype(np.uint8)
    return pred[0] if single else pred


# --- optimizer ------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def sgd_step(params, grads, state):
    """SGD with momentum and L2 weight decay, updating params and state in place.

    ``v <- momentum * v + (grad + weight_decay * param)``, ``param <- param - lr * v``.
    """
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        if v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} != param shape {p.shape} for {name}")
        v *= state.momentum
        v += grads[name] + state.weight_decay * p
        p -= state.lr * v
    return params, state


# --- checkpoints ----------------------------------------------------------
# Layout (little endian): b"AACL", u32 version, u32 C, u32 w1, u32 w2, u32 w3,
# u32 epoch, u32 has_velocity, then f32 tensors in PARAM_ORDER, then the
# velocity tensors in the same order when present.

_HEADER = struct.Struct("<4s7I")


def save_checkpoint(path, params, state=None, epoch=0):
    num_classes = num_classes_of(params)
    widths = widths_of(params)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, num_classes, *widths,
                             epoch, int(state is not None)))
        for name in PARAM_ORDER:
            f.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
        if state is not None:
            for name in PARAM_ORDER:
                f.write(np.ascontiguousarray(state.velocity[name], dtype="<f4").tobytes())


def load_checkpoint(path, num_classes=None):
    """Return ``(params, velocity or None, epoch)``.

    Rejects wrong magic, unknown versions, a class count other than
    ``num_classes`` (when given) and payloads that do not match the declared
    shapes.
    """
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise ValueError("checkpoint truncated")
    magic, version, c, w1, w2, w3, epoch, has_vel = _HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if num_classes is not None and c != num_classes:
        raise ValueError(f"checkpoint has {c} classes, expected {num_classes}")
    shapes = param_shapes(c, (w1, w2, w3))
    sizes = [int(np.prod(shapes[n])) for n in PARAM_ORDER]
    expected = _HEADER.size + 4 * sum(sizes) * (2 if has_vel else 1)
    if len(buf) != expected:
        raise ValueError(f"checkpoint payload is {len(buf)} bytes, expected {expected}")
    offset = _HEADER.size

    def read_block():
        nonlocal offset
        out = {}
        for name, size in zip(PARAM_ORDER, sizes):
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=offset)
            out[name] = arr.reshape(shapes[name]).astype(np.float32)
            offset += 4 * size
        return out

    params = read_block()
    velocity = read_block() if has_vel else None
    return params, velocity, epoch
