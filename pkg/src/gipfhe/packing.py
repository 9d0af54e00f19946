"""Generalized interleaved packing of square feature maps into slot vectors.

A feature map of side ``H`` is packed against a base size ``Hb`` (with
``Hb**2 <= S``) and the packing factor is ``g = H / Hb``:

* ``g >= 1``: each channel is split into ``g**2`` interleaved sub-channels by
  pixel residue ``(y % g, x % g)``; each sub-channel fills one ciphertext as a
  row-major ``Hb x Hb`` grid.
* ``g < 1``: with ``t = 1/g``, ``t**2`` channels are multiplexed into one
  ciphertext; same-channel pixels sit ``t`` slots apart.

Both families coincide at ``g = 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .slotvm import HEContext, SlotVector

__all__ = [
    "GipLayout",
    "PackedTensor",
    "LayoutError",
    "TensorFormatError",
    "index_map",
    "layout_index_arrays",
    "pack",
    "unpack",
    "propagate_factor",
    "relayout_boundary_check",
    "channel_vector",
    "read_tensor",
    "write_tensor",
]

DOWNSAMPLE = "downsample"
UPSAMPLE = "upsample"
PRESERVE = "preserve"


class LayoutError(ValueError):
    """Invalid geometry for a GIP layout."""


class TensorFormatError(ValueError):
    """A tensor file does not follow the header + float32 payload format."""


def is_pow2(n) -> bool:
    n = Fraction(n)
    if n <= 0:
        return False
    if n.denominator == 1:
        v = n.numerator
        return v & (v - 1) == 0
    return n.numerator == 1 and n.denominator & (n.denominator - 1) == 0


@dataclass(frozen=True)
class GipLayout:
    channels: int
    height: int
    base_size: int
    slot_count: int

    def __post_init__(self) -> None:
        for name in ("channels", "height", "base_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not is_pow2(v):
                raise LayoutError(f"{name} must be a power of two, got {v!r}")
        if self.base_size**2 > self.slot_count:
            raise LayoutError(
                f"base size {self.base_size} needs {self.base_size**2} slots, only {self.slot_count} available"
            )

    @property
    def width(self) -> int:
        return self.height

    @property
    def factor(self) -> Fraction:
        return Fraction(self.height, self.base_size)

    @property
    def interleaved(self) -> bool:
        return self.factor >= 1

    @property
    def gap(self) -> int:
        """t = 1/g for multiplexed layouts, 1 otherwise."""
        return max(1, self.base_size // self.height)

    @property
    def stride(self) -> int:
        """g for interleaved layouts, 1 otherwise."""
        return max(1, self.height // self.base_size)

    @property
    def num_cts(self) -> int:
        if self.interleaved:
            return self.channels * self.stride**2
        return math.ceil(self.channels / self.gap**2)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.height)

    def with_geometry(self, channels: int, height: int) -> "GipLayout":
        return GipLayout(channels, height, self.base_size, self.slot_count)


def layout_index_arrays(layout: GipLayout, c, y, x) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`index_map` over broadcastable integer arrays."""
    c, y, x = (np.asarray(v, dtype=np.int64) for v in (c, y, x))
    hb = layout.base_size
    if layout.interleaved:
        g = layout.stride
        ct = c * g * g + (y % g) * g + (x % g)
        slot = (y // g) * hb + (x // g)
    else:
        t = layout.gap
        ct = c // (t * t)
        m = c % (t * t)
        slot = (y * t + m // t) * hb + (x * t + m % t)
    return ct, slot


def index_map(layout: GipLayout, c: int, y: int, x: int) -> tuple[int, int]:
    C, H, W = layout.shape
    if not (0 <= c < C and 0 <= y < H and 0 <= x < W):
        raise IndexError(f"pixel ({c}, {y}, {x}) outside {C}x{H}x{W}")
    ct, slot = layout_index_arrays(layout, c, y, x)
    return int(ct), int(slot)


def _full_index(layout: GipLayout) -> tuple[np.ndarray, np.ndarray]:
    C, H, W = layout.shape
    c, y, x = np.meshgrid(np.arange(C), np.arange(H), np.arange(W), indexing="ij")
    return layout_index_arrays(layout, c, y, x)


@dataclass(frozen=True)
class PackedTensor:
    layout: GipLayout
    cts: tuple[SlotVector, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "cts", tuple(self.cts))
        if len(self.cts) != self.layout.num_cts:
            raise LayoutError(f"layout expects {self.layout.num_cts} ciphertexts, got {len(self.cts)}")
        if self.cts:
            ctx = self.cts[0].ctx
            if ctx.slot_count != self.layout.slot_count:
                raise LayoutError("layout slot count differs from context")
            if any(ct.ctx is not ctx for ct in self.cts):
                raise LayoutError("ciphertexts span multiple contexts")

    @property
    def ctx(self) -> HEContext:
        return self.cts[0].ctx

    @property
    def level(self) -> int:
        return min(ct.level for ct in self.cts)

    @property
    def factor(self) -> Fraction:
        return self.layout.factor


def pack(x, base_size: int, ctx: HEContext) -> PackedTensor:
    """Pack a ``C x H x W`` array into ciphertexts at the top level."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise LayoutError(f"expected a C x H x W tensor, got shape {x.shape}")
    C, H, W = x.shape
    if H != W:
        raise LayoutError(f"feature maps must be square, got {H}x{W}")
    layout = GipLayout(C, H, base_size, ctx.slot_count)
    buf = np.zeros((layout.num_cts, ctx.slot_count))
    ct, slot = _full_index(layout)
    buf[ct, slot] = x
    return PackedTensor(layout, tuple(ctx.encrypt(row) for row in buf))


def unpack(p: PackedTensor) -> np.ndarray:
    layout = p.layout
    if len(p.cts) != layout.num_cts:
        raise LayoutError("ciphertext count does not match layout")
    buf = np.stack([ct.slots for ct in p.cts])
    ct, slot = _full_index(layout)
    return buf[ct, slot].copy()


def active_mask(layout: GipLayout) -> np.ndarray:
    """Boolean (num_cts, S) array marking slots that hold a pixel."""
    mask = np.zeros((layout.num_cts, layout.slot_count), dtype=bool)
    ct, slot = _full_index(layout)
    mask[ct, slot] = True
    return mask


def channel_vector(layout: GipLayout, per_channel) -> np.ndarray:
    """Spread per-channel values over slots: (num_cts, S), zero on inactive slots."""
    per_channel = np.asarray(per_channel, dtype=np.float64)
    if per_channel.shape[0] != layout.channels:
        raise LayoutError(f"expected {layout.channels} channel values, got {per_channel.shape[0]}")
    buf = np.zeros((layout.num_cts, layout.slot_count) + per_channel.shape[1:])
    C, H, W = layout.shape
    c = np.arange(C)[:, None, None]
    ct, slot = _full_index(layout)
    buf[ct, slot] = np.broadcast_to(per_channel[c], (C, H, W) + per_channel.shape[1:])
    return buf


def propagate_factor(g, op_kind: str, stride: int = 1) -> Fraction:
    g = Fraction(g)
    if not is_pow2(g) or not is_pow2(stride):
        raise LayoutError(f"packing factor and stride must be powers of two, got g={g}, s={stride}")
    if op_kind == DOWNSAMPLE:
        return g / stride
    if op_kind == UPSAMPLE:
        return g * stride
    if op_kind == PRESERVE:
        return g
    raise ValueError(f"unknown op kind {op_kind!r}")


def relayout_boundary_check(g_in, g_out) -> bool:
    """True iff moving from ``g_in`` to ``g_out`` stays within one packing family.

    Crossing between interleaved and multiplexed layouts is only seamless
    when it passes through ``g = 1``.
    """
    g_in, g_out = Fraction(g_in), Fraction(g_out)
    return (g_in >= 1 and g_out >= 1) or (g_in <= 1 and g_out <= 1)


# Tensor files: JSON header, one newline, raw little-endian float32 payload.

def write_tensor(path, data) -> None:
    data = np.asarray(data, dtype="<f4")
    header = json.dumps({"dims": list(data.shape), "dtype": "f32"})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(data).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"}")
    if end < 0 or raw[end + 1 : end + 2] != b"\n":
        raise TensorFormatError(f"{path}: malformed tensor header")
    header = json.loads(raw[: end + 1])
    if header.get("dtype") != "f32":
        raise TensorFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dims = [int(d) for d in header["dims"]]
    payload = raw[end + 2 :]
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(payload) != expected:
        raise TensorFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
