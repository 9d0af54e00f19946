"""Cleartext simulator of CKKS slot arithmetic.

Ciphertexts are modelled as fixed-width real vectors with a level counter.
Every operation goes through an :class:`HEContext`, which owns the slot
count, the level budget and the operation counters.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, fields

import numpy as np

__all__ = [
    "CostCounters",
    "HEContext",
    "LevelExhaustedError",
    "ContextMismatchError",
    "SlotVector",
    "PlainVector",
    "add_ct",
    "add_plain",
    "mul_plain",
    "mul_ct",
    "rotate",
    "bootstrap",
]


class LevelExhaustedError(ValueError):
    """A multiplication was requested on a ciphertext at level 0."""


class ContextMismatchError(ValueError):
    """Operands belong to different contexts or have the wrong width."""


@dataclass
class CostCounters:
    rotations: int = 0
    ct_ct_mults: int = 0
    pt_ct_mults: int = 0
    adds: int = 0
    bootstraps: int = 0
    max_depth: int = 0

    def __add__(self, other: "CostCounters") -> "CostCounters":
        # max_depth is a high-water mark, everything else sums
        return CostCounters(
            rotations=self.rotations + other.rotations,
            ct_ct_mults=self.ct_ct_mults + other.ct_ct_mults,
            pt_ct_mults=self.pt_ct_mults + other.pt_ct_mults,
            adds=self.adds + other.adds,
            bootstraps=self.bootstraps + other.bootstraps,
            max_depth=max(self.max_depth, other.max_depth),
        )

    def __sub__(self, other: "CostCounters") -> "CostCounters":
        """Counter delta between two snapshots (max_depth kept from self)."""
        return CostCounters(
            rotations=self.rotations - other.rotations,
            ct_ct_mults=self.ct_ct_mults - other.ct_ct_mults,
            pt_ct_mults=self.pt_ct_mults - other.pt_ct_mults,
            adds=self.adds - other.adds,
            bootstraps=self.bootstraps - other.bootstraps,
            max_depth=self.max_depth,
        )

    def copy(self) -> "CostCounters":
        return CostCounters(**self.as_dict())

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def op_counts(self) -> tuple[int, int, int, int, int]:
        return (self.rotations, self.ct_ct_mults, self.pt_ct_mults, self.adds, self.bootstraps)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(eq=False)
class HEContext:
    """Simulation parameters plus the running cost counters.

    ``slot_count`` is N/2 of the modelled ring; the default 2**15 matches a
    ring degree of 2**16.
    """

    slot_count: int = 2**15
    max_level: int = 20
    bootstrap_refresh_level: int | None = None
    counters: CostCounters = field(default_factory=CostCounters)

    def __post_init__(self) -> None:
        if not _is_pow2(self.slot_count) or self.slot_count < 4:
            raise ValueError(f"slot_count must be a power of two >= 4, got {self.slot_count}")
        if self.max_level < 1:
            raise ValueError(f"max_level must be positive, got {self.max_level}")
        if self.bootstrap_refresh_level is None:
            self.bootstrap_refresh_level = self.max_level
        if not 0 < self.bootstrap_refresh_level <= self.max_level:
            raise ValueError("bootstrap_refresh_level must lie in (0, max_level]")
        self._lock = threading.Lock()

    def _count(self, name: str, level: int | None = None) -> None:
        with self._lock:
            c = self.counters
            setattr(c, name, getattr(c, name) + 1)
            if level is not None:
                c.max_depth = max(c.max_depth, self.max_level - level)

    def snapshot(self) -> CostCounters:
        with self._lock:
            return self.counters.copy()

    def reset_counters(self) -> None:
        with self._lock:
            self.counters = CostCounters()

    def encrypt(self, values, level: int | None = None) -> "SlotVector":
        """Wrap a slot vector (zero padded up to S) as a simulated ciphertext."""
        return SlotVector(self, _widen(values, self.slot_count), self.max_level if level is None else level)

    def zeros(self, level: int | None = None) -> "SlotVector":
        return SlotVector(self, np.zeros(self.slot_count), self.max_level if level is None else level)

    def plain(self, values) -> "PlainVector":
        return PlainVector(self, _widen(values, self.slot_count))


def _widen(values, width: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size > width:
        raise ContextMismatchError(f"{arr.size} values do not fit in {width} slots")
    if arr.size < width:
        arr = np.concatenate([arr, np.zeros(width - arr.size)])
    return arr


class SlotVector:
    """Immutable simulated ciphertext."""

    __slots__ = ("ctx", "slots", "level")

    def __init__(self, ctx: HEContext, slots: np.ndarray, level: int):
        slots = np.asarray(slots, dtype=np.float64)
        if slots.shape != (ctx.slot_count,):
            raise ContextMismatchError(f"expected {ctx.slot_count} slots, got shape {slots.shape}")
        if level < 0:
            raise LevelExhaustedError(f"level must be non-negative, got {level}")
        if slots.flags.writeable:
            slots = slots.copy()
            slots.flags.writeable = False
        self.ctx = ctx
        self.slots = slots
        self.level = int(level)

    def __repr__(self) -> str:
        return f"SlotVector(level={self.level}, S={self.ctx.slot_count})"


class PlainVector:
    __slots__ = ("ctx", "slots")

    def __init__(self, ctx: HEContext, slots: np.ndarray):
        slots = np.asarray(slots, dtype=np.float64)
        if slots.shape != (ctx.slot_count,):
            raise ContextMismatchError(f"expected {ctx.slot_count} slots, got shape {slots.shape}")
        self.ctx = ctx
        self.slots = slots


def _same_ctx(a, b) -> HEContext:
    if a.ctx is not b.ctx:
        raise ContextMismatchError("operands come from different contexts")
    return a.ctx


def add_ct(a: SlotVector, b: SlotVector) -> SlotVector:
    ctx = _same_ctx(a, b)
    level = min(a.level, b.level)
    ctx._count("adds", level)
    return SlotVector(ctx, a.slots + b.slots, level)


def add_plain(a: SlotVector, p: PlainVector) -> SlotVector:
    """Ciphertext-plaintext addition; counted as an add, costs no level."""
    ctx = _same_ctx(a, p)
    ctx._count("adds", a.level)
    return SlotVector(ctx, a.slots + p.slots, a.level)


def mul_plain(a: SlotVector, p: PlainVector) -> SlotVector:
    ctx = _same_ctx(a, p)
    if a.level < 1:
        raise LevelExhaustedError("ciphertext at level 0; bootstrap before multiplying")
    ctx._count("pt_ct_mults", a.level - 1)
    return SlotVector(ctx, a.slots * p.slots, a.level - 1)


def mul_ct(a: SlotVector, b: SlotVector) -> SlotVector:
    ctx = _same_ctx(a, b)
    level = min(a.level, b.level)
    if level < 1:
        raise LevelExhaustedError("ciphertext at level 0; bootstrap before multiplying")
    ctx._count("ct_ct_mults", level - 1)
    return SlotVector(ctx, a.slots * b.slots, level - 1)


def rotate(a: SlotVector, r: int) -> SlotVector:
    """Cyclic left shift by ``r`` slots (right shift for negative ``r``)."""
    ctx = a.ctx
    r %= ctx.slot_count
    if r == 0:
        return a
    ctx._count("rotations", a.level)
    return SlotVector(ctx, np.roll(a.slots, -r), a.level)


def bootstrap(a: SlotVector) -> SlotVector:
    ctx = a.ctx
    ctx._count("bootstraps")
    return SlotVector(ctx, a.slots, ctx.bootstrap_refresh_level)
