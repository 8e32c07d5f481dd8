"""Neural building blocks on top of :mod:`attvad.autodiff`.

Parameters are small dataclasses whose array fields may hold either numpy
arrays (inference) or tape leaves (training); see :func:`bind`.  Batch
normalization running statistics are buffers: they are never bound to a tape
and are updated in place during train-mode forward passes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LstmParams:
    """One LSTM layer; gate blocks stacked as input, forget, cell candidate, output."""

    w_ih: np.ndarray  # (4D, I)
    w_hh: np.ndarray  # (4D, D)
    b: np.ndarray  # (4D,)

    @property
    def hidden(self) -> int:
        return value_shape(self.w_hh)[1]


@dataclass
class ConvParams:
    """Conv weights ``(C_out, C_in, K)`` or ``(C_out, C_in, K, K)``; ``b`` may be None."""

    w: np.ndarray
    b: np.ndarray | None = None

    @property
    def kernel(self) -> int:
        return value_shape(self.w)[-1]


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics.

    ``running_mean``/``running_var`` have shape ``(sites, C)``: one row per
    place the layer is applied, so a module shared across several inputs
    keeps separate inference statistics for each of them.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    _buffers = ("running_mean", "running_var")
    _static = ("eps", "momentum")


@dataclass
class DenseParams:
    w: np.ndarray  # (D, 1)
    b: np.ndarray  # (1,)


class PooledTriple(NamedTuple):
    max: object
    avg: object
    std: object


def value_shape(x) -> tuple:
    return ad.value_of(x).shape


# ---------------------------------------------------------------------------
# parameter trees


def _is_array(x) -> bool:
    return isinstance(x, (np.ndarray, ad.Var))


def named_params(tree, prefix: str = "") -> Iterator[tuple[str, object]]:
    """Yield ``(dotted_name, array)`` for every learnable array in ``tree``."""
    yield from _walk(tree, prefix, buffers=False)


def named_buffers(tree, prefix: str = "") -> Iterator[tuple[str, object]]:
    yield from _walk(tree, prefix, buffers=True)


def _walk(tree, prefix, buffers):
    if tree is None:
        return
    if dataclasses.is_dataclass(tree):
        skip = getattr(tree, "_static", ())
        bufs = getattr(tree, "_buffers", ())
        for f in dataclasses.fields(tree):
            if f.name in skip:
                continue
            val = getattr(tree, f.name)
            name = f"{prefix}{f.name}"
            if _is_array(val):
                if (f.name in bufs) == buffers:
                    yield name, val
            else:
                yield from _walk(val, name + ".", buffers)
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            yield from _walk(item, f"{prefix}{i}.", buffers)


def map_params(fn: Callable, tree):
    """Copy of ``tree`` with ``fn`` applied to each learnable array (buffers shared)."""
    if tree is None:
        return None
    if dataclasses.is_dataclass(tree):
        skip = set(getattr(tree, "_static", ())) | set(getattr(tree, "_buffers", ()))
        changes = {}
        for f in dataclasses.fields(tree):
            if not f.init:
                continue
            val = getattr(tree, f.name)
            if f.name in skip:
                changes[f.name] = val
            elif _is_array(val):
                changes[f.name] = fn(val)
            else:
                changes[f.name] = map_params(fn, val)
        return dataclasses.replace(tree, **changes)
    if isinstance(tree, list):
        return [map_params(fn, item) for item in tree]
    if isinstance(tree, tuple):
        return tuple(map_params(fn, item) for item in tree)
    return tree


def bind(tree, tape: ad.Tape):
    """Register every learnable array of ``tree`` as a leaf on ``tape``.

    Returns the bound tree and the list of leaves in :func:`named_params` order.
    """
    leaves: list[ad.Var] = []

    def to_leaf(arr):
        var = tape.param(arr)
        leaves.append(var)
        return var

    return map_params(to_leaf, tree), leaves


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int, forget_bias: float = 1.0) -> LstmParams:
    fan_in = n_in + hidden
    w_ih = _uniform(rng, (4 * hidden, n_in), fan_in)
    w_hh = _uniform(rng, (4 * hidden, hidden), fan_in)
    b = _uniform(rng, (4 * hidden,), fan_in)
    b[hidden:2 * hidden] = forget_bias
    return LstmParams(w_ih, w_hh, b)


def init_conv1d(rng, c_in: int, c_out: int, kernel: int, bias: bool = True) -> ConvParams:
    if kernel % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel}")
    fan_in = c_in * kernel
    w = _uniform(rng, (c_out, c_in, kernel), fan_in)
    b = _uniform(rng, (c_out,), fan_in) if bias else None
    return ConvParams(w, b)


def init_conv2d(rng, c_in: int, c_out: int, kernel: int, bias: bool = True) -> ConvParams:
    if kernel % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel}")
    fan_in = c_in * kernel * kernel
    w = _uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
    b = _uniform(rng, (c_out,), fan_in) if bias else None
    return ConvParams(w, b)


def init_batchnorm(channels: int, sites: int = 1) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(channels),
        beta=np.zeros(channels),
        running_mean=np.zeros((sites, channels)),
        running_var=np.ones((sites, channels)),
    )


def init_dense(rng, n_in: int) -> DenseParams:
    return DenseParams(_uniform(rng, (n_in, 1), n_in), _uniform(rng, (1,), n_in))


# ---------------------------------------------------------------------------
# layers


def _add_channel_vector(x, v, axis: int):
    """``x + v`` with the 1-D vector ``v`` laid along ``axis`` of ``x``."""
    shape = [1] * len(value_shape(x))
    shape[axis] = value_shape(v)[0]
    return ad.add(x, ad.expand(ad.reshape(v, shape), value_shape(x)))


def _mul_channel_vector(x, v, axis: int):
    shape = [1] * len(value_shape(x))
    shape[axis] = value_shape(v)[0]
    return ad.mul(x, ad.expand(ad.reshape(v, shape), value_shape(x)))


def lstm_forward(params: LstmParams, x, h0=None, c0=None):
    """Run one LSTM layer over ``x`` (``T x I`` or ``B x T x I``).

    Returns the hidden map (same leading layout as ``x``, last axis ``D``)
    and the untraced final ``(h, c)``.
    """
    squeeze = len(value_shape(x)) == 2
    if squeeze:
        x = ad.reshape(x, (1,) + value_shape(x))
    hmap, state = ad.lstm(x, params.w_ih, params.w_hh, params.b, h0, c0)
    if squeeze:
        hmap = ad.reshape(hmap, value_shape(hmap)[1:])
        state = (state[0][0], state[1][0])
    return hmap, state


def conv1d_same(params: ConvParams, x):
    """Zero same-padded 1-D conv of ``C_in x L`` (or ``B x C_in x L``) input."""
    squeeze = len(value_shape(x)) == 2
    if squeeze:
        x = ad.reshape(x, (1,) + value_shape(x))
    out = ad.conv1d(x, params.w, params.b)
    return ad.reshape(out, value_shape(out)[1:]) if squeeze else out


def conv2d_same(params: ConvParams, x):
    """Zero same-padded 2-D conv of ``C_in x T x D`` (or batched) input."""
    squeeze = len(value_shape(x)) == 3
    if squeeze:
        x = ad.reshape(x, (1,) + value_shape(x))
    out = ad.conv2d(x, params.w, params.b)
    return ad.reshape(out, value_shape(out)[1:]) if squeeze else out


def batchnorm(params: BatchNormParams, x, mode: str = "train", site: int = 0,
              track_stats: bool = True):
    """Batch normalization of ``(B, C, ...)`` input over every non-channel axis.

    In ``train`` mode the batch statistics are used and, when ``track_stats``
    is set, folded into the running statistics of ``site`` with the layer's
    momentum.  ``eval`` mode normalizes with the running statistics.
    """
    shape = value_shape(x)
    if len(shape) < 2:
        raise ShapeError("batchnorm", shape, detail="expected (B, C, ...)")
    channels = value_shape(params.gamma)[0]
    if shape[1] != channels:
        raise ShapeError("batchnorm", shape, (channels,), detail="channel count")
    axes = (0,) + tuple(range(2, len(shape)))
    n = int(np.prod([shape[a] for a in axes]))
    if n == 0:
        raise ValueError("batchnorm: zero-size batch")

    if mode == "train":
        mu = ad.mean(x, axis=axes, keepdims=True)
        centred = ad.sub(x, ad.expand(mu, shape))
        var = ad.mean(ad.mul(centred, centred), axis=axes, keepdims=True)
        inv_std = ad.power(ad.add(var, params.eps), -0.5)
        normed = ad.mul(centred, ad.expand(inv_std, shape))
        if track_stats:
            m = params.momentum
            rm, rv = params.running_mean, params.running_var
            rm[site] = (1.0 - m) * rm[site] + m * ad.value_of(mu).reshape(-1)
            rv[site] = (1.0 - m) * rv[site] + m * ad.value_of(var).reshape(-1)
    elif mode == "eval":
        bshape = [1] * len(shape)
        bshape[1] = channels
        mu = params.running_mean[site].reshape(bshape)
        inv_std = 1.0 / np.sqrt(params.running_var[site].reshape(bshape) + params.eps)
        normed = ad.mul(ad.sub(x, np.broadcast_to(mu, shape)), np.broadcast_to(inv_std, shape))
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = _mul_channel_vector(normed, params.gamma, 1)
    return _add_channel_vector(out, params.beta, 1)


def pool_stats(hmap, axis: str) -> PooledTriple:
    """Max, mean and population standard deviation of a hidden map.

    ``hmap`` is ``T x D`` or ``B x T x D``.  ``axis="frequency"`` reduces over
    hidden units (each result ``T x 1``); ``axis="time"`` reduces over time
    steps (each result ``1 x D``).
    """
    if axis == "frequency":
        ax = -1
    elif axis == "time":
        ax = -2
    else:
        raise ValueError(f"axis must be 'time' or 'frequency', got {axis!r}")
    shape = value_shape(hmap)
    mx = ad.max_(hmap, axis=ax, keepdims=True)
    avg = ad.mean(hmap, axis=ax, keepdims=True)
    centred = ad.sub(hmap, ad.expand(avg, shape))
    var = ad.mean(ad.mul(centred, centred), axis=ax, keepdims=True)
    std = ad.power(var, 0.5)
    return PooledTriple(mx, avg, std)


def dense(params: DenseParams, x):
    """Per-step affine map ``(..., T, D) -> (..., T, 1)``."""
    out = ad.matmul(x, params.w)
    return _add_channel_vector(out, params.b, -1)
