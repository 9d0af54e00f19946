"""Generalized interleaved packing and homomorphic CNN operators on a CKKS slot simulator."""

from .slotvm import HEContext, SlotVector, PlainVector, CostCounters
from .packing import GipLayout, PackedTensor, pack, unpack, index_map, propagate_factor
from .polyact import RELU, SILU, HermiteCoeffs, PolyActState
from .graphrt import ModelGraph, Node, convert_model, execute, plan, oracle_forward

__version__ = "0.1.0"
