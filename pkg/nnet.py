"""
A small reverse-mode differentiation engine on numpy, with exactly the layers the
Siamese pose regressor needs: convolution, max-pooling, ReLU, affine layers,
concatenation, spatial pyramid pooling and the Euclidean loss, plus Adam/SGD
steps, a finite-difference gradient checker and the binary weight container.

Images are (batch, channels, height, width) float64 arrays. Every differentiable
operation comes as a pair of plain numpy kernels (`*_forward`, `*_backward`) and a
Tensor-level wrapper that records the backward closure in the graph.

Weight container (little endian):

    b"RPW1" | u32 count | count x (u16 name length | utf-8 name | u8 rank |
                                   u32 extents[rank] | f64 data, row-major)
"""

import logging
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import util
from util import RelPoseError

logger = logging.getLogger(__name__)

DTYPE = np.float64
LOSS_EPS = 1e-12
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_TOL = 1e-4
GRAD_CHECK_FLOOR = 1e-4  # absolute floor of the relative-error denominator

CONTAINER_MAGIC = b"RPW1"


class NnetError(RelPoseError):
    module = "nnet"


class ShapeMismatchError(NnetError):
    pass


class InputTooSmallError(NnetError):
    pass


class NonFiniteGradientError(NnetError):
    pass


class ContainerCorruptError(NnetError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    """convB[N, w, s, p]: N filters of size w x w, stride s, padding p, followed by ReLU."""

    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.filters < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise NnetError(f"invalid convolution spec {self}")


@dataclass(frozen=True)
class PoolSpec:
    """pool[k, s]: k x k max-pooling with stride s."""

    kernel: int
    stride: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise NnetError(f"invalid pooling spec {self}")


@dataclass(frozen=True)
class SppSpec:
    """Pyramid levels, coarse to fine: each level n pools an n x n grid of bins."""

    levels: tuple

    def __post_init__(self):
        levels = tuple(int(n) for n in self.levels)
        if not levels or levels[0] < 1 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise NnetError(f"SPP levels must be strictly increasing and >= 1, got {self.levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def bins(self):
        return sum(n * n for n in self.levels)


def conv_output_size(size, kernel, stride, padding=0):
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size, kernel, stride):
    return (size - kernel) // stride + 1


def spp_window(a, n):
    """
    Window and stride of an n-bin pyramid level over an extent a:
    w = ceil(a / n), stride = floor(a / n); bin k starts at k * stride.
    """
    if a < n:
        raise InputTooSmallError(f"feature map extent {a} is smaller than pyramid level {n}")
    w = -(-a // n)
    stride = a // n
    assert (n - 1) * stride + w <= a
    return w, stride


class Tensor:
    """
    A dense float64 array taking part in a reverse-mode differentiation graph.
    """

    def __init__(self, data, requires_grad=False, parents=(), op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """
        Back-propagates from this tensor (scalar unless grad is given) to every
        leaf with requires_grad. Gradients accumulate into .grad.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatchError(f"backward() without a gradient needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for parent in node._parents:
                visit(parent)
            topo.append(node)

        visit(self)
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # intermediate gradients are released once propagated
            if node._parents and node is not self:
                node.grad = None

    # element-wise arithmetic used by the losses

    def __add__(self, other):
        other = _as_tensor(other)
        out = _result(self.data + other.data, (self, other), "add")
        if out.requires_grad:

            def backward(g):
                self._accumulate(_unbroadcast(g, self.shape))
                other._accumulate(_unbroadcast(g, other.shape))

            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:

            def backward(g):
                self._accumulate(_unbroadcast(g * other.data, self.shape))
                other._accumulate(_unbroadcast(g * self.data, other.shape))

            out._backward = backward
        return out

    __rmul__ = __mul__

    def sum(self):
        out = _result(self.data.sum(), (self,), "sum")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.broadcast_to(g, self.shape))
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, *shape):
        out = _result(self.data.reshape(*shape), (self,), "reshape")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return out

    def columns(self, start, stop):
        """Slice of the last axis, [start, stop)."""
        out = _result(self.data[..., start:stop], (self,), "columns")
        if out.requires_grad:

            def backward(g):
                full = np.zeros_like(self.data)
                full[..., start:stop] = g
                self._accumulate(full)

            out._backward = backward
        return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op):
    requires_grad = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad, parents if requires_grad else (), op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# convolution


def conv2d_forward(x, w, b, spec):
    """
    :param x: input (B, C, H, W)
    :param w: filters (N, C, k, k)
    :param b: bias (N,)
    :param spec: ConvSpec
    :return: output (B, N, Ho, Wo) and the cache for conv2d_backward
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects 4-d input and filters, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    N, Cw, kh, kw = w.shape
    if Cw != C or kh != spec.kernel or kw != spec.kernel or N != spec.filters or b.shape != (N,):
        raise ShapeMismatchError(
            f"conv2d {spec} cannot take input {x.shape} with filters {w.shape} and bias {b.shape}"
        )
    p, s, k = spec.padding, spec.stride, spec.kernel
    Ho, Wo = conv_output_size(H, k, s, p), conv_output_size(W, k, s, p)
    if Ho < 1 or Wo < 1:
        raise ShapeMismatchError(f"input {H}x{W} is smaller than the {k}x{k} kernel after padding {p}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out + b[None, :, None, None])
    return out, (x.shape, xp.shape, windows, w, spec)


def conv2d_backward(dout, cache):
    """
    :return: gradients (dx, dw, db)
    """
    x_shape, xp_shape, windows, w, spec = cache
    p, s, k = spec.padding, spec.stride, spec.kernel
    _, _, Ho, Wo = dout.shape
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += contrib
    H, W = x_shape[2], x_shape[3]
    return dxp[:, :, p : p + H, p : p + W], dw, db


def conv2d(x, w, b, spec):
    out_data, cache = conv2d_forward(x.data, w.data, b.data, spec)
    out = _result(out_data, (x, w, b), "conv2d")
    if out.requires_grad:

        def backward(g):
            dx, dw, db = conv2d_backward(g, cache)
            x._accumulate(dx)
            w._accumulate(dw)
            b._accumulate(db)

        out._backward = backward
    return out


# max pooling


def _pool_forward(x, kh, kw, sh, sw, nh=None, nw=None):
    B, C, H, W = x.shape
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    if nh is not None:
        windows = windows[:, :, :nh, :nw]
    Ho, Wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(B, C, Ho, Wo, kh * kw)
    # argmax returns the first maximum in row-major window order
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, kh, kw, sh, sw)


def _pool_backward(dout, cache):
    x_shape, arg, kh, kw, sh, sw = cache
    Ho, Wo = arg.shape[2], arg.shape[3]
    dx = np.zeros(x_shape, dtype=DTYPE)
    for idx in range(kh * kw):
        i, j = divmod(idx, kw)
        dx[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += np.where(arg == idx, dout, 0.0)
    return dx


def maxpool2d_forward(x, spec):
    """
    :return: output (B, C, floor((H - k) / s) + 1, floor((W - k) / s) + 1) and the backward cache
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"maxpool2d expects a 4-d input, got {x.shape}")
    if x.shape[2] < spec.kernel or x.shape[3] < spec.kernel:
        raise ShapeMismatchError(f"input {x.shape[2]}x{x.shape[3]} is smaller than pool {spec.kernel}")
    return _pool_forward(x, spec.kernel, spec.kernel, spec.stride, spec.stride)


def maxpool2d_backward(dout, cache):
    return _pool_backward(dout, cache)


def maxpool2d(x, spec):
    out_data, cache = maxpool2d_forward(x.data, spec)
    out = _result(out_data, (x,), "maxpool2d")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(maxpool2d_backward(g, cache))
    return out


# spatial pyramid pooling


def spp_forward(x, spec):
    """
    Pools every level n over an n x n grid (window ceil(a/n), stride floor(a/n),
    per axis for non-square maps) and concatenates the levels coarse to fine.

    :return: output (B, C * sum(n^2)) and the backward cache
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"spp expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if min(H, W) < spec.levels[-1]:
        raise InputTooSmallError(
            f"feature map {H}x{W} is smaller than the finest pyramid level {spec.levels[-1]}"
        )
    outs, caches = [], []
    for n in spec.levels:
        wh, sh = spp_window(H, n)
        ww, sw = spp_window(W, n)
        out, cache = _pool_forward(x, wh, ww, sh, sw, n, n)
        outs.append(out.reshape(B, C * n * n))
        caches.append(cache)
    return np.concatenate(outs, axis=1), (caches, spec, (B, C))


def spp_backward(dout, cache):
    caches, spec, (B, C) = cache
    dx = None
    offset = 0
    for n, level_cache in zip(spec.levels, caches):
        width = C * n * n
        g = dout[:, offset : offset + width].reshape(B, C, n, n)
        level_dx = _pool_backward(g, level_cache)
        dx = level_dx if dx is None else dx + level_dx
        offset += width
    return dx


def spp(x, spec):
    out_data, cache = spp_forward(x.data, spec)
    out = _result(out_data, (x,), "spp")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(spp_backward(g, cache))
    return out


# element-wise and dense layers


def relu(x):
    mask = x.data > 0
    out = _result(np.where(mask, x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * mask)
    return out


def flatten(x):
    return x.reshape(x.shape[0], -1)


def linear(x, w, b):
    """Affine layer y = x W^T + b with W of shape (out, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatchError(
            f"linear cannot take input {x.shape} with weights {w.shape} and bias {b.shape}"
        )
    out = _result(x.data @ w.data.T + b.data, (x, w, b), "linear")
    if out.requires_grad:

        def backward(g):
            x._accumulate(g @ w.data)
            w._accumulate(g.T @ x.data)
            b._accumulate(g.sum(axis=0))

        out._backward = backward
    return out


def concat(tensors, axis=1):
    """Joins tensors along the channel / feature axis."""
    datas = [t.data for t in tensors]
    ref = datas[0].shape
    for d in datas[1:]:
        if d.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(d.shape, ref)) if i != axis):
            raise ShapeMismatchError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}")
    out = _result(np.concatenate(datas, axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

        def backward(g):
            for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                t._accumulate(g[tuple(index)])

        out._backward = backward
    return out


def euclidean_loss(pred, target, axis=None):
    """
    Non-squared Euclidean distance ||pred - target||_2. With axis=None the norm
    runs over all elements and the result is a scalar; with axis=-1 one norm per
    row. The gradient is (pred - target) / norm and 0 where the norm is below 1e-12.
    No gradient flows to target.
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"euclidean loss needs equal shapes, got {pred.shape} and {target.shape}")
    diff = pred.data - target
    norm = np.sqrt(np.sum(diff * diff, axis=axis))
    out = _result(norm, (pred,), "euclidean")
    if out.requires_grad:

        def backward(g):
            n = norm if axis is None else np.expand_dims(norm, axis)
            gg = g if axis is None else np.expand_dims(g, axis)
            safe = np.where(n < LOSS_EPS, 1.0, n)
            pred._accumulate(np.where(n < LOSS_EPS, 0.0, gg * diff / safe))

        out._backward = backward
    return out


# optimizers


class AdamState(NamedTuple):
    step: int
    m: list
    v: list

    @classmethod
    def zeros(cls, params):
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


class SgdState(NamedTuple):
    velocity: list

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p) for p in params])


def _check_grads(params, grads):
    if len(params) != len(grads):
        raise ShapeMismatchError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"parameter {p.shape} and gradient {g.shape} disagree")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for a parameter of shape {p.shape}")


def adam_step(params, grads, state, lr=1e-4, wd=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One Adam step with bias correction and decoupled weight decay
    (p -= lr * wd * p, applied with the pre-step value).

    :param params: list of arrays
    :param grads: list of arrays, same shapes
    :param state: AdamState
    :return: (new params, new AdamState); inputs are not modified
    """
    _check_grads(params, grads)
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * p)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v)


def sgd_step(params, grads, state, lr=1e-4, wd=1e-5, momentum=0.9):
    """
    One SGD step with heavy-ball momentum and decoupled weight decay.
    """
    _check_grads(params, grads)
    new_params, new_velocity = [], []
    for p, g, vel in zip(params, grads, state.velocity):
        vel = momentum * vel + g
        new_params.append(p - lr * vel - lr * wd * p)
        new_velocity.append(vel)
    return new_params, SgdState(new_velocity)


# gradient checking


class GradCheckReport(NamedTuple):
    errors: dict  # name -> max relative error
    tolerance: float

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)


def grad_check(fn, tensors, tolerance=GRAD_CHECK_TOL, step=GRAD_CHECK_STEP, max_checks=None, seed=0):
    """
    Compares analytic gradients against central differences.

    :param fn: callable without arguments building the graph and returning a scalar Tensor
    :param tensors: dictionary name -> leaf Tensor (requires_grad) used by fn
    :param tolerance: maximum accepted relative error
    :param step: finite-difference step h
    :param max_checks: if given, number of randomly chosen entries checked per tensor
    :param seed: seed for choosing the entries
    :return: GradCheckReport with the max relative error per tensor
    """
    for t in tensors.values():
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()
    fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}

    rng = util.make_rng(seed, "grad-check")
    errors = {}
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            f_plus = float(fn().data)
            flat[idx] = original - step
            f_minus = float(fn().data)
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, err)
        errors[name] = worst
        logger.debug(f"grad check {name}: max relative error {worst:.3e} over {len(indices)} entries")
    for t in tensors.values():
        t.zero_grad()
    return GradCheckReport(errors, tolerance)


# weight container


def save_tensors(path, tensors):
    """
    Writes an ordered dictionary name -> array into the RPW1 container.
    """
    chunks = [CONTAINER_MAGIC, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes(order="C"))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_tensors(path):
    """
    Reads an RPW1 container.

    :return: dictionary name -> float64 array, in file order
    :raises ContainerCorruptError: on a bad magic, truncation or trailing bytes
    """
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerCorruptError(f"{path}: truncated at byte {pos} (needed {n} more bytes)")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CONTAINER_MAGIC:
        raise ContainerCorruptError(f"{path}: not an RPW1 weight container")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ContainerCorruptError(f"{path}: tensor name is not utf-8") from e
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(math.prod(shape))
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(DTYPE).reshape(shape)
        tensors[name] = data
    if pos != len(blob):
        raise ContainerCorruptError(f"{path}: {len(blob) - pos} trailing bytes after {count} tensors")
    return tensors
