"""Hidden-state refinement modules for LSTM feature maps.

Every module maps a hidden map ``H`` (``T x D`` or batched ``B x T x D``) to
``H' = H + sigmoid(gate)`` where the gate has the same shape as ``H``:

* temporal (TA): pool over hidden units, 1-D convs along time, gate copied
  across hidden units;
* frequential (FA): pool over time, 1-D convs along hidden units, gate copied
  across time steps;
* dual-1 (DA-1): 2-D convs directly on ``H``;
* dual-2 (DA-2): TA and FA gates summed before a single sigmoid.

Conv layers other than the last are followed by batch norm and ReLU.  Convs
feeding a batch norm carry no bias (it would be cancelled by the mean
subtraction).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import (
    BatchNormParams,
    ConvParams,
    batchnorm,
    conv1d_same,
    conv2d_same,
    init_batchnorm,
    init_conv1d,
    init_conv2d,
    pool_stats,
    value_shape,
)

TA_KERNEL = 11
FA_KERNEL = 21
DA1_KERNEL = 7
POOLED_CHANNELS = 3
CONV1D_FILTERS = (3, 5, 5, 1)
CONV2D_FILTERS = (1, 3, 1)


class AttentionKind(str, enum.Enum):
    NONE = "none"
    TA = "ta"
    FA = "fa"
    DA1 = "da1"
    DA2 = "da2"

    @classmethod
    def parse(cls, text) -> "AttentionKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("-", "")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown attention kind {text!r}; expected one of "
                             + ", ".join(k.value for k in cls)) from None


@dataclass
class TaParams:
    convs: list[ConvParams]
    bns: list[BatchNormParams]


@dataclass
class FaParams(TaParams):
    pass


@dataclass
class Da1Params:
    convs: list[ConvParams]
    bns: list[BatchNormParams]


@dataclass
class Da2Params:
    ta: TaParams
    fa: FaParams


def _init_conv1d_stack(rng, kernel, sites):
    convs, bns = [], []
    c_in = POOLED_CHANNELS
    last = len(CONV1D_FILTERS) - 1
    for i, c_out in enumerate(CONV1D_FILTERS):
        convs.append(init_conv1d(rng, c_in, c_out, kernel, bias=(i == last)))
        if i != last:
            bns.append(init_batchnorm(c_out, sites))
        c_in = c_out
    return convs, bns


def init_ta(rng: np.random.Generator, sites: int = 1) -> TaParams:
    return TaParams(*_init_conv1d_stack(rng, TA_KERNEL, sites))


def init_fa(rng: np.random.Generator, sites: int = 1) -> FaParams:
    return FaParams(*_init_conv1d_stack(rng, FA_KERNEL, sites))


def init_da1(rng: np.random.Generator, sites: int = 1) -> Da1Params:
    convs, bns = [], []
    c_in = 1
    last = len(CONV2D_FILTERS) - 1
    for i, c_out in enumerate(CONV2D_FILTERS):
        convs.append(init_conv2d(rng, c_in, c_out, DA1_KERNEL, bias=(i == last)))
        if i != last:
            bns.append(init_batchnorm(c_out, sites))
        c_in = c_out
    return Da1Params(convs, bns)


def init_da2(rng: np.random.Generator, sites: int = 1) -> Da2Params:
    return Da2Params(init_ta(rng, sites), init_fa(rng, sites))


def init_attention(kind, rng, sites: int = 1):
    kind = AttentionKind.parse(kind)
    return {
        AttentionKind.NONE: lambda: None,
        AttentionKind.TA: lambda: init_ta(rng, sites),
        AttentionKind.FA: lambda: init_fa(rng, sites),
        AttentionKind.DA1: lambda: init_da1(rng, sites),
        AttentionKind.DA2: lambda: init_da2(rng, sites),
    }[kind]()


# ---------------------------------------------------------------------------


@dataclass
class _Ctx:
    mode: str = "train"
    site: int = 0
    track_stats: bool = True


def _as_batch(hmap):
    if len(value_shape(hmap)) == 2:
        return ad.reshape(hmap, (1,) + value_shape(hmap)), True
    return hmap, False


def _conv_stack(convs, bns, x, conv, ctx: _Ctx):
    for i, cp in enumerate(convs):
        x = conv(cp, x)
        if i < len(bns):
            x = batchnorm(bns[i], x, ctx.mode, ctx.site, ctx.track_stats)
            x = ad.relu(x)
    return x


def _ta_gate(hmap, p: TaParams, ctx: _Ctx):
    """Pre-sigmoid temporal gate, expanded to the shape of ``hmap`` (B x T x D)."""
    shape = value_shape(hmap)
    pooled = pool_stats(hmap, "frequency")  # each B x T x 1
    stacked = ad.transpose(ad.concat(list(pooled), axis=-1), (0, 2, 1))  # B x 3 x T
    h_temp = _conv_stack(p.convs, p.bns, stacked, conv1d_same, ctx)  # B x 1 x T
    return ad.expand(ad.transpose(h_temp, (0, 2, 1)), shape)


def _fa_gate(hmap, p: FaParams, ctx: _Ctx):
    shape = value_shape(hmap)
    pooled = pool_stats(hmap, "time")  # each B x 1 x D
    stacked = ad.concat(list(pooled), axis=-2)  # B x 3 x D
    h_freq = _conv_stack(p.convs, p.bns, stacked, conv1d_same, ctx)  # B x 1 x D
    return ad.expand(h_freq, shape)


def _fa_gate_chunked(hmap, p: FaParams, t_train: int, ctx: _Ctx):
    if t_train < 1:
        raise ValueError("t_train must be >= 1")
    steps = value_shape(hmap)[1]
    if steps <= t_train:
        return _fa_gate(hmap, p, ctx)
    parts = [
        _fa_gate(ad.slice_(hmap, (slice(None), slice(s, min(s + t_train, steps)))), p, ctx)
        for s in range(0, steps, t_train)
    ]
    return ad.concat(parts, axis=1)


def _da1_gate(hmap, p: Da1Params, ctx: _Ctx):
    shape = value_shape(hmap)
    image = ad.reshape(hmap, (shape[0], 1) + shape[1:])
    out = _conv_stack(p.convs, p.bns, image, conv2d_same, ctx)
    return ad.reshape(out, shape)


def _merge(hmap, gate, squeeze):
    out = ad.add(hmap, ad.sigmoid(gate))
    return ad.reshape(out, value_shape(out)[1:]) if squeeze else out


def ta_apply(hmap, p: TaParams, mode: str = "train", site: int = 0, track_stats: bool = True):
    hmap, squeeze = _as_batch(hmap)
    return _merge(hmap, _ta_gate(hmap, p, _Ctx(mode, site, track_stats)), squeeze)


def fa_apply(hmap, p: FaParams, mode: str = "train", site: int = 0, track_stats: bool = True):
    hmap, squeeze = _as_batch(hmap)
    return _merge(hmap, _fa_gate(hmap, p, _Ctx(mode, site, track_stats)), squeeze)


def fa_apply_chunked(hmap, p: FaParams, t_train: int, mode: str = "eval", site: int = 0,
                     track_stats: bool = False):
    """FA applied independently to consecutive ``t_train``-step segments.

    The last segment may be shorter and is pooled on its own.
    """
    hmap, squeeze = _as_batch(hmap)
    gate = _fa_gate_chunked(hmap, p, t_train, _Ctx(mode, site, track_stats))
    return _merge(hmap, gate, squeeze)


def da1_apply(hmap, p: Da1Params, mode: str = "train", site: int = 0, track_stats: bool = True):
    hmap, squeeze = _as_batch(hmap)
    return _merge(hmap, _da1_gate(hmap, p, _Ctx(mode, site, track_stats)), squeeze)


def da2_apply(hmap, pt: TaParams, pf: FaParams, mode: str = "train", site: int = 0,
              track_stats: bool = True, t_train: int | None = None):
    """``H + sigmoid(H_temp + H_freq)``; with ``t_train`` the FA branch is chunked."""
    hmap, squeeze = _as_batch(hmap)
    ctx = _Ctx(mode, site, track_stats)
    g_temp = _ta_gate(hmap, pt, ctx)
    if t_train is None:
        g_freq = _fa_gate(hmap, pf, ctx)
    else:
        g_freq = _fa_gate_chunked(hmap, pf, t_train, ctx)
    return _merge(hmap, ad.add(g_temp, g_freq), squeeze)


def refine(kind, hmap, params, mode: str = "train", site: int = 0, t_train: int | None = None,
           track_stats: bool = True):
    """Apply the attention module of ``kind``; FA branches are chunked when ``t_train`` is given."""
    kind = AttentionKind.parse(kind)
    if kind is AttentionKind.NONE:
        return hmap
    if kind is AttentionKind.TA:
        return ta_apply(hmap, params, mode, site, track_stats)
    if kind is AttentionKind.FA:
        if t_train is None:
            return fa_apply(hmap, params, mode, site, track_stats)
        return fa_apply_chunked(hmap, params, t_train, mode, site, track_stats)
    if kind is AttentionKind.DA1:
        return da1_apply(hmap, params, mode, site, track_stats)
    return da2_apply(hmap, params.ta, params.fa, mode, site, track_stats, t_train)
