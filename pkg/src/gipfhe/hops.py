"""Homomorphic CNN operators on GIP-packed tensors.

Convolution, deconvolution, average pooling and multiplexed upsampling are
all linear maps between two layouts.  They are compiled into a
:class:`LinearSchedule`: for every output ciphertext, a sum of
``rotate(input_ct, r) * mask`` terms where each mask carries kernel weights at
the output slots it feeds and zeros everywhere else (boundary zero padding is
folded into the mask, so the operator costs a single level).  Rotations of an
input ciphertext by the same offset are shared across output ciphertexts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import slotvm
from .packing import (
    DOWNSAMPLE,
    PRESERVE,
    UPSAMPLE,
    GipLayout,
    LayoutError,
    PackedTensor,
    channel_vector,
    is_pow2,
    layout_index_arrays,
    propagate_factor,
    relayout_boundary_check,
)
from .slotvm import CostCounters, LevelExhaustedError

__all__ = [
    "ConvSpec",
    "DeconvSpec",
    "AffineSpec",
    "LinearSchedule",
    "conv_schedule",
    "deconv_schedule",
    "avgpool_schedule",
    "upsample_schedule",
    "conv2d",
    "deconv2d",
    "avgpool",
    "upsample_nearest",
    "batchnorm_affine",
    "polyact_eval",
    "residual_add",
    "polyact_cost",
    "affine_cost",
    "POLYACT_DEPTH",
]

POLYACT_DEPTH = 3


@dataclass
class ConvSpec:
    weight: np.ndarray  # (C_out, C_in, k, k)
    stride: int = 1
    padding: int | None = None
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be (C_out, C_in, k, k), got {self.weight.shape}")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if not is_pow2(self.stride):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if self.padding is None:
            self.padding = (self.kernel - 1) // 2
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.out_channels:
                raise ValueError("bias length must equal output channels")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class DeconvSpec:
    """Transposed convolution; weight layout (C_in, C_out, k, k).

    Supported geometries are ``k == stride`` (block scatter, no padding) and
    ``k == 2*stride - 1`` with padding ``stride - 1`` and output padding
    ``stride - 1``.  Both exactly multiply the side length by ``stride``.
    """

    weight: np.ndarray
    stride: int = 2
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"deconv weight must be (C_in, C_out, k, k), got {self.weight.shape}")
        if not is_pow2(self.stride) or self.stride < 2:
            raise ValueError(f"deconv stride must be a power of two >= 2, got {self.stride}")
        if self.kernel not in (self.stride, 2 * self.stride - 1):
            raise ValueError(
                f"unsupported deconv geometry k={self.kernel}, stride={self.stride}; "
                "use k == stride or k == 2*stride - 1"
            )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.out_channels:
                raise ValueError("bias length must equal output channels")

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def padding(self) -> int:
        return 0 if self.kernel == self.stride else self.stride - 1

    @property
    def output_padding(self) -> int:
        return 0 if self.kernel == self.stride else self.stride - 1


@dataclass
class AffineSpec:
    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self) -> None:
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(-1)
        if self.scale.shape != self.shift.shape:
            raise ValueError("scale and shift must have equal length")


# ---------------------------------------------------------------------------
# linear schedules


@dataclass
class LinearSchedule:
    """Masked-rotation realisation of a linear map between two layouts.

    Each output ciphertext is ``sum_d rotate(sum_k rotate(in[i_k], a_k) * m_k, d)``.
    For interleaved outputs there is a single group with ``d = 0``; for
    multiplexed outputs ``d`` runs over the channel-class shifts, so tap
    rotations are shared by all channels packed in a ciphertext.  Masks are
    applied before the outer rotation, which keeps the cost at one level.

    ``terms[o]`` is a list of ``(d, [(in_ct, a, mask_row), ...])``.
    ``masks`` is ``None`` for a structure-only schedule (planning).
    """

    in_layout: GipLayout
    out_layout: GipLayout
    terms: list[list[tuple[int, list[tuple[int, int, int]]]]]
    masks: np.ndarray | None = None
    bias: np.ndarray | None = None
    has_bias: bool = False

    def rotations_per_output(self) -> list[int]:
        return [len({(i, a) for _, grp in row for i, a, _ in grp if a}) + sum(1 for d, _ in row if d)
                for row in self.terms]

    def cost(self) -> CostCounters:
        inner = {(i, a) for row in self.terms for _, grp in row for i, a, _ in grp if a}
        outer = sum(1 for row in self.terms for d, _ in row if d)
        n_terms = sum(len(grp) for row in self.terms for _, grp in row)
        adds = sum(len(grp) - 1 for row in self.terms for _, grp in row)
        adds += sum(len(row) - 1 for row in self.terms if row)
        if self.has_bias:
            adds += self.out_layout.num_cts
        return CostCounters(rotations=len(inner) + outer, pt_ct_mults=n_terms, adds=adds)

    def apply(self, x: PackedTensor) -> PackedTensor:
        if self.masks is None:
            raise RuntimeError("structure-only schedule cannot be executed")
        if x.layout != self.in_layout:
            raise LayoutError(f"schedule expects {self.in_layout}, got {x.layout}")
        ctx = x.ctx
        level = x.level
        if level < 1:
            raise LevelExhaustedError("linear operator needs one level; bootstrap first")
        rotated: dict[tuple[int, int], slotvm.SlotVector] = {}
        out = []
        for o, row in enumerate(self.terms):
            acc = None
            for d, grp in row:
                part = None
                for i, a, k in grp:
                    if (i, a) not in rotated:
                        rotated[i, a] = slotvm.rotate(x.cts[i], a)
                    prod = slotvm.mul_plain(rotated[i, a], slotvm.PlainVector(ctx, self.masks[k]))
                    part = prod if part is None else slotvm.add_ct(part, prod)
                part = slotvm.rotate(part, d)
                acc = part if acc is None else slotvm.add_ct(acc, part)
            if acc is None:
                acc = ctx.zeros(level - 1)
            if self.has_bias:
                acc = slotvm.add_plain(acc, slotvm.PlainVector(ctx, self.bias[o]))
            out.append(acc)
        return PackedTensor(self.out_layout, tuple(out))


def _mid_slots(in_layout, out_layout, oy, ox, ic, o_slot):
    """Slot at which a contribution is accumulated before the class shift.

    For multiplexed outputs this is the output pixel's position as if it had
    the input channel's class, so the remaining offset is the tap alone.
    """
    if out_layout.interleaved:
        return o_slot
    t = out_layout.gap
    if in_layout.interleaved:
        my = mx = 0
    else:
        ti = in_layout.gap
        m = ic % (ti * ti)
        my, mx = m // ti, m % ti
    return (oy * t + my) * out_layout.base_size + (ox * t + mx)


def _compile(in_layout, out_layout, contribs, with_masks=True, bias=None, has_bias=False):
    """Group (out pixel <- w * in pixel) contributions into a schedule."""
    oc, oy, ox, ic, iy, ix, w = (np.concatenate(a) for a in zip(*contribs))
    S = out_layout.slot_count
    o_ct, o_slot = layout_index_arrays(out_layout, oc, oy, ox)
    i_ct, i_slot = layout_index_arrays(in_layout, ic, iy, ix)
    mid = _mid_slots(in_layout, out_layout, oy, ox, ic, o_slot)
    a = (i_slot - mid) % S
    d = (mid - o_slot) % S
    keys = np.stack([o_ct, d, i_ct, a], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    terms: list[list] = [[] for _ in range(out_layout.num_cts)]
    for k, (o, dd, i, aa) in enumerate(uniq.tolist()):
        row = terms[o]
        if not row or row[-1][0] != dd:
            row.append((dd, []))
        row[-1][1].append((i, aa, k))
    masks = None
    if with_masks:
        masks = np.zeros((len(uniq), S))
        np.add.at(masks, (inv, mid % S), np.asarray(w, dtype=np.float64))
    bias_vec = channel_vector(out_layout, bias) if bias is not None else None
    return LinearSchedule(in_layout, out_layout, terms, masks, bias_vec, has_bias)


def _next_layout(layout: GipLayout, channels: int, kind: str, stride: int) -> GipLayout:
    g_out = propagate_factor(layout.factor, kind, stride)
    if not relayout_boundary_check(layout.factor, g_out):
        raise LayoutError(
            f"factor change {layout.factor} -> {g_out} crosses packing families without passing g=1; "
            "split it into power-of-two steps"
        )
    height = g_out * layout.base_size
    if height.denominator != 1 or height < 1:
        raise LayoutError(f"stride {stride} does not divide side length {layout.height}")
    return layout.with_geometry(channels, int(height))


def _tap_grid(n_out, stride, offset, n_in):
    """Output coordinates whose input coordinate ``o*stride + offset`` is in range."""
    o = np.arange(n_out)
    i = o * stride + offset
    ok = (i >= 0) & (i < n_in)
    return o[ok], i[ok]


def conv_schedule(layout: GipLayout, spec: ConvSpec, with_masks: bool = True) -> LinearSchedule:
    if spec.in_channels != layout.channels:
        raise ValueError(f"conv expects {spec.in_channels} input channels, layout has {layout.channels}")
    s, k, p = spec.stride, spec.kernel, spec.padding
    H = layout.height
    if s > H:
        raise LayoutError(f"stride {s} exceeds side length {H}")
    out_layout = _next_layout(layout, spec.out_channels, DOWNSAMPLE if s > 1 else PRESERVE, s)
    Ho = out_layout.height
    if (H + 2 * p - k) // s + 1 != Ho:
        raise LayoutError(f"kernel {k}, padding {p}, stride {s} do not map {H} to {Ho}")
    Co, Ci = spec.out_channels, spec.in_channels
    o_idx, i_idx = np.meshgrid(np.arange(Co), np.arange(Ci), indexing="ij")
    o_idx, i_idx = o_idx.ravel(), i_idx.ravel()
    contribs = []
    for ky in range(k):
        oy, iy = _tap_grid(Ho, s, ky - p, H)
        for kx in range(k):
            ox, ix = _tap_grid(Ho, s, kx - p, H)
            if not len(oy) or not len(ox):
                continue
            YY, XX = np.meshgrid(oy, ox, indexing="ij")
            IY, IX = np.meshgrid(iy, ix, indexing="ij")
            n = YY.size
            oc = np.repeat(o_idx, n)
            ic = np.repeat(i_idx, n)
            w = np.repeat(spec.weight[o_idx, i_idx, ky, kx], n)
            contribs.append((oc, np.tile(YY.ravel(), len(o_idx)), np.tile(XX.ravel(), len(o_idx)),
                             ic, np.tile(IY.ravel(), len(o_idx)), np.tile(IX.ravel(), len(o_idx)), w))
    return _compile(layout, out_layout, contribs, with_masks, spec.bias, spec.bias is not None)


def deconv_schedule(layout: GipLayout, spec: DeconvSpec, with_masks: bool = True) -> LinearSchedule:
    if spec.in_channels != layout.channels:
        raise ValueError(f"deconv expects {spec.in_channels} input channels, layout has {layout.channels}")
    s, k, p = spec.stride, spec.kernel, spec.padding
    H = layout.height
    out_layout = _next_layout(layout, spec.out_channels, UPSAMPLE, s)
    Ho = out_layout.height
    assert (H - 1) * s + k - 2 * p + spec.output_padding == Ho
    Ci, Co = spec.in_channels, spec.out_channels
    i_idx, o_idx = np.meshgrid(np.arange(Ci), np.arange(Co), indexing="ij")
    i_idx, o_idx = i_idx.ravel(), o_idx.ravel()
    contribs = []
    iy_all = np.arange(H)
    for ky in range(k):
        oy = iy_all * s - p + ky
        oky = (oy >= 0) & (oy < Ho)
        for kx in range(k):
            ox = iy_all * s - p + kx
            okx = (ox >= 0) & (ox < Ho)
            if not oky.any() or not okx.any():
                continue
            YY, XX = np.meshgrid(oy[oky], ox[okx], indexing="ij")
            IY, IX = np.meshgrid(iy_all[oky], iy_all[okx], indexing="ij")
            n = YY.size
            m = len(o_idx)
            w = np.repeat(spec.weight[i_idx, o_idx, ky, kx], n)
            contribs.append((np.repeat(o_idx, n), np.tile(YY.ravel(), m), np.tile(XX.ravel(), m),
                             np.repeat(i_idx, n), np.tile(IY.ravel(), m), np.tile(IX.ravel(), m), w))
    return _compile(layout, out_layout, contribs, with_masks, spec.bias, spec.bias is not None)


def avgpool_schedule(layout: GipLayout, window: int, stride: int | None = None,
                     with_masks: bool = True) -> LinearSchedule:
    stride = window if stride is None else stride
    if window != stride:
        raise ValueError(f"only non-overlapping pooling is supported (window {window} != stride {stride})")
    if not is_pow2(stride) or stride > layout.height:
        raise LayoutError(f"invalid pooling stride {stride} for side {layout.height}")
    out_layout = _next_layout(layout, layout.channels, DOWNSAMPLE if stride > 1 else PRESERVE, stride)
    Ho = out_layout.height
    C = layout.channels
    c = np.arange(C)
    contribs = []
    for ky in range(window):
        for kx in range(window):
            YY, XX = np.meshgrid(np.arange(Ho), np.arange(Ho), indexing="ij")
            n = YY.size
            cc = np.repeat(c, n)
            yy, xx = np.tile(YY.ravel(), C), np.tile(XX.ravel(), C)
            contribs.append((cc, yy, xx, cc, yy * stride + ky, xx * stride + kx,
                             np.full(cc.size, 1.0 / window**2)))
    return _compile(layout, out_layout, contribs, with_masks)


def upsample_schedule(layout: GipLayout, scale: int, with_masks: bool = True) -> LinearSchedule:
    """Masked schedule for nearest upsampling; only needed for multiplexed input."""
    out_layout = _next_layout(layout, layout.channels, UPSAMPLE, scale)
    C, Ho = layout.channels, out_layout.height
    c, y, x = (a.ravel() for a in np.meshgrid(np.arange(C), np.arange(Ho), np.arange(Ho), indexing="ij"))
    contribs = [(c, y, x, c, y // scale, x // scale, np.ones(c.size))]
    return _compile(layout, out_layout, contribs, with_masks)


# ---------------------------------------------------------------------------
# operators


def conv2d(x: PackedTensor, spec: ConvSpec) -> PackedTensor:
    return conv_schedule(x.layout, spec).apply(x)


def deconv2d(x: PackedTensor, spec: DeconvSpec) -> PackedTensor:
    return deconv_schedule(x.layout, spec).apply(x)


def avgpool(x: PackedTensor, window: int, stride: int | None = None) -> PackedTensor:
    return avgpool_schedule(x.layout, window, stride).apply(x)


def upsample_nearest(x: PackedTensor, scale: int) -> PackedTensor:
    """Nearest-neighbour upsampling by ``scale``.

    For interleaved input every output sub-channel class ``(ry, rx)`` is the
    input class ``(ry // scale, rx // scale)`` verbatim, so the result is
    pure ciphertext reuse.  Multiplexed input has channels sharing a
    ciphertext and falls back to a masked schedule (one level).
    """
    if not is_pow2(scale):
        raise ValueError(f"upsample scale must be a power of two, got {scale}")
    if scale == 1:
        return x
    layout = x.layout
    if not layout.interleaved:
        return upsample_schedule(layout, scale).apply(x)
    out_layout = _next_layout(layout, layout.channels, UPSAMPLE, scale)
    g, go = layout.stride, out_layout.stride
    cts = []
    for c in range(layout.channels):
        for ry in range(go):
            for rx in range(go):
                cts.append(x.cts[c * g * g + (ry // scale) * g + rx // scale])
    return PackedTensor(out_layout, tuple(cts))


def upsample_cost(layout: GipLayout, scale: int) -> tuple[CostCounters, int]:
    """(counters, depth) for :func:`upsample_nearest`."""
    if scale == 1 or layout.interleaved:
        return CostCounters(), 0
    return upsample_schedule(layout, scale, with_masks=False).cost(), 1


def batchnorm_affine(x: PackedTensor, spec: AffineSpec) -> PackedTensor:
    layout = x.layout
    if spec.scale.shape[0] != layout.channels:
        raise ValueError(f"affine spec has {spec.scale.shape[0]} channels, layout has {layout.channels}")
    ctx = x.ctx
    scale = channel_vector(layout, spec.scale)
    shift = channel_vector(layout, spec.shift)
    out = []
    for ct, sc, sh in zip(x.cts, scale, shift):
        y = slotvm.mul_plain(ct, slotvm.PlainVector(ctx, sc))
        out.append(slotvm.add_plain(y, slotvm.PlainVector(ctx, sh)))
    return PackedTensor(layout, tuple(out))


def affine_cost(layout: GipLayout) -> CostCounters:
    n = layout.num_cts
    return CostCounters(pt_ct_mults=n, adds=n)


def polyact_eval(x: PackedTensor, coeffs) -> PackedTensor:
    """Evaluate a per-channel quartic ``a0 + a1 v + ... + a4 v^4`` slot-wise.

    Schedule (depth 3, two ciphertext products)::

        v2  = v * v
        hi  = v2 * (a4 v2 + a3 v + a2)
        out = hi + a1 v + a0
    """
    layout = x.layout
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 1:
        coeffs = np.broadcast_to(coeffs, (layout.channels, 5))
    if coeffs.shape != (layout.channels, 5):
        raise ValueError(f"expected ({layout.channels}, 5) coefficients, got {coeffs.shape}")
    if x.level < POLYACT_DEPTH:
        raise LevelExhaustedError(f"polynomial activation needs {POLYACT_DEPTH} levels, have {x.level}")
    ctx = x.ctx
    a = channel_vector(layout, coeffs)  # (num_cts, S, 5), zero on inactive slots
    out = []
    for j, v in enumerate(x.cts):
        pv = [slotvm.PlainVector(ctx, a[j, :, d]) for d in range(5)]
        v2 = slotvm.mul_ct(v, v)
        inner = slotvm.add_ct(slotvm.mul_plain(v2, pv[4]), slotvm.mul_plain(v, pv[3]))
        inner = slotvm.add_plain(inner, pv[2])
        hi = slotvm.mul_ct(v2, inner)
        y = slotvm.add_ct(hi, slotvm.mul_plain(v, pv[1]))
        out.append(slotvm.add_plain(y, pv[0]))
    return PackedTensor(layout, tuple(out))


def polyact_cost(layout: GipLayout) -> CostCounters:
    n = layout.num_cts
    return CostCounters(ct_ct_mults=2 * n, pt_ct_mults=3 * n, adds=4 * n)


def residual_add(x: PackedTensor, y: PackedTensor) -> PackedTensor:
    if x.layout != y.layout:
        raise LayoutError(f"residual add needs equal layouts, got {x.layout} and {y.layout}")
    return PackedTensor(x.layout, tuple(slotvm.add_ct(a, b) for a, b in zip(x.cts, y.cts)))
