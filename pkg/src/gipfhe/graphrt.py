"""Model graphs, structural conversion, level planning and packed execution."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import hops, oracle, slotvm
from .packing import GipLayout, LayoutError, PackedTensor, read_tensor, write_tensor
from .polyact import PRESETS, HermiteCoeffs, fuse_inference
from .slotvm import CostCounters, HEContext

__all__ = [
    "ModelSchemaError",
    "PlanDivergenceError",
    "Node",
    "ModelGraph",
    "PlanEntry",
    "CostReport",
    "load_model",
    "save_model",
    "convert_model",
    "plan",
    "execute",
    "oracle_forward",
    "report",
    "random_model",
]

FORMAT = "gipfhe-model/1"

KINDS = {"conv", "deconv", "avgpool", "maxpool", "upsample", "batchnorm", "activation", "polyact_rn", "add"}
ACTIVATIONS = {"relu", "silu"}
REQUIRED_WEIGHTS = {
    "conv": ("weight",),
    "deconv": ("weight",),
    "batchnorm": ("scale", "shift"),
    "polyact_rn": ("running_max",),
}


class ModelSchemaError(ValueError):
    """The model document or its weights are structurally invalid."""


class PlanDivergenceError(RuntimeError):
    """Execution observed something other than what the planner predicted."""


@dataclass
class Node:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ModelGraph:
    input_shape: tuple[int, int, int]
    nodes: list[Node]
    resize: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.shapes = self.validate()

    def validate(self) -> dict[str, tuple[int, int, int]]:
        """Check structure and return the (C, H, W) output shape of every node."""
        C, H, W = self.input_shape
        if H != W:
            raise ModelSchemaError(f"input must be square, got {H}x{W}")
        shapes = {"input": (C, H, W)}
        cur = (C, H, W)
        for node in self.nodes:
            if node.id in shapes:
                raise ModelSchemaError(f"duplicate node id {node.id!r}")
            if node.kind not in KINDS:
                raise ModelSchemaError(f"node {node.id!r}: unknown kind {node.kind!r}")
            for name in REQUIRED_WEIGHTS.get(node.kind, ()):
                if name not in node.weights:
                    raise ModelSchemaError(f"node {node.id!r}: missing weight {name!r}")
            cur = self._node_shape(node, cur, shapes)
            shapes[node.id] = cur
        return shapes

    @staticmethod
    def _node_shape(node: Node, cur, shapes):
        C, H, _ = cur
        p, w = node.params, node.weights
        kind = node.kind
        try:
            if kind == "conv":
                wt = w["weight"]
                if wt.ndim != 4 or wt.shape[1] != C:
                    raise ModelSchemaError(f"node {node.id!r}: weight {wt.shape} vs {C} input channels")
                k, s = wt.shape[2], int(p.get("stride", 1))
                pad = int(p.get("padding", (k - 1) // 2))
                Ho = (H + 2 * pad - k) // s + 1
                return (wt.shape[0], Ho, Ho)
            if kind == "deconv":
                spec = hops.DeconvSpec(w["weight"], int(p.get("stride", 2)), w.get("bias"))
                if spec.in_channels != C:
                    raise ModelSchemaError(f"node {node.id!r}: weight {spec.weight.shape} vs {C} input channels")
                return (spec.out_channels, H * spec.stride, H * spec.stride)
            if kind in ("avgpool", "maxpool"):
                win = int(p["window"])
                s = int(p.get("stride", win))
                Ho = (H - win) // s + 1
                return (C, Ho, Ho)
            if kind == "upsample":
                s = int(p["scale"])
                return (C, H * s, H * s)
            if kind == "batchnorm":
                if w["scale"].shape != (C,) or w["shift"].shape != (C,):
                    raise ModelSchemaError(f"node {node.id!r}: affine parameters must have shape ({C},)")
                return cur
            if kind == "activation":
                if p.get("fn") not in ACTIVATIONS:
                    raise ModelSchemaError(f"node {node.id!r}: unknown activation {p.get('fn')!r}")
                return cur
            if kind == "polyact_rn":
                if p.get("preset", "relu") not in PRESETS and "hermite" not in p:
                    raise ModelSchemaError(f"node {node.id!r}: unknown preset {p.get('preset')!r}")
                if w["running_max"].shape != (C,):
                    raise ModelSchemaError(f"node {node.id!r}: running_max must have shape ({C},)")
                return cur
            if kind == "add":
                skip = p.get("skip")
                if skip not in shapes:
                    raise ModelSchemaError(f"node {node.id!r}: skip source {skip!r} is not an earlier node (cycle or dangling)")
                if shapes[skip] != cur:
                    raise ModelSchemaError(f"node {node.id!r}: residual shapes differ {shapes[skip]} vs {cur}")
                return cur
        except KeyError as exc:
            raise ModelSchemaError(f"node {node.id!r}: missing parameter {exc}") from None
        except ValueError as exc:
            if isinstance(exc, ModelSchemaError):
                raise
            raise ModelSchemaError(f"node {node.id!r}: {exc}") from None
        raise AssertionError(kind)

    @property
    def output_shape(self):
        return self.shapes[self.nodes[-1].id] if self.nodes else self.input_shape

    def input_of(self, i: int) -> str:
        return "input" if i == 0 else self.nodes[i - 1].id


# ---------------------------------------------------------------------------
# files


def load_model(path) -> ModelGraph:
    """Read a JSON model document; weight references resolve relative to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelSchemaError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != FORMAT:
        raise ModelSchemaError(f"{path}: expected format {FORMAT!r}")
    try:
        inp = doc["input"]
        input_shape = (inp["channels"], inp["height"], inp["width"])
        nodes = []
        for raw in doc["nodes"]:
            weights = {}
            for name, ref in raw.get("weights", {}).items():
                wpath = path.parent / ref
                if not wpath.is_file():
                    raise ModelSchemaError(f"node {raw['id']!r}: dangling weight reference {ref!r}")
                weights[name] = read_tensor(wpath)
            nodes.append(Node(raw["id"], raw["kind"], dict(raw.get("params", {})), weights))
    except (KeyError, TypeError) as exc:
        raise ModelSchemaError(f"{path}: schema violation ({exc!r})") from None
    resize = doc.get("resize")
    return ModelGraph(input_shape, nodes, tuple(resize) if resize else None)


def save_model(model: ModelGraph, path) -> None:
    path = Path(path)
    nodes = []
    for node in model.nodes:
        refs = {}
        for name, arr in node.weights.items():
            ref = f"{path.stem}.{node.id}.{name}.tensor"
            write_tensor(path.parent / ref, arr)
            refs[name] = ref
        nodes.append({"id": node.id, "kind": node.kind, "params": node.params, "weights": refs})
    C, H, W = model.input_shape
    doc = {
        "format": FORMAT,
        "input": {"channels": C, "height": H, "width": W},
        "resize": list(model.resize) if model.resize else None,
        "nodes": nodes,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# conversion


def convert_model(model: ModelGraph, preset: str = "relu", resize: int | None = None,
                  gamma: float = 3.0, eps: float = 1e-5) -> tuple[ModelGraph, list[str]]:
    """Swap activations for range-normalised polynomials and max pools for average pools.

    Returns the converted graph and one summary line per replaced node.
    Running maxima start at 1; calibrating them is a training concern.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    nodes, summary = [], []
    for node in model.nodes:
        node = copy.deepcopy(node)
        if node.kind == "activation":
            fn = node.params.get("fn")
            if fn not in ACTIVATIONS:
                raise ModelSchemaError(f"node {node.id!r}: unknown activation {fn!r}")
            C = model.shapes[node.id][0]
            summary.append(f"{node.id}: activation({fn}) -> polyact_rn({preset})")
            node = Node(node.id, "polyact_rn", {"preset": preset, "gamma": gamma, "eps": eps},
                        {"running_max": np.ones(C)})
        elif node.kind == "maxpool":
            summary.append(f"{node.id}: maxpool -> avgpool")
            node = Node(node.id, "avgpool", dict(node.params), {})
        nodes.append(node)
    new_resize = model.resize
    C, H, W = model.input_shape
    if resize is not None:
        new_resize = (resize, resize)
        summary.append(f"input: resize {H}x{W} -> {resize}x{resize}")
        H = W = resize
    return ModelGraph((C, H, W), nodes, new_resize), summary


def _polyact_coeffs(node: Node) -> np.ndarray:
    hermite = _hermite(node)
    q = node.weights["running_max"] / float(node.params.get("gamma", 3.0)) + float(node.params.get("eps", 1e-5))
    return fuse_inference(hermite, q)


def _hermite(node: Node) -> HermiteCoeffs:
    if "hermite" in node.params:
        return HermiteCoeffs.from_array(node.params["hermite"])
    return PRESETS[node.params.get("preset", "relu")]


# ---------------------------------------------------------------------------
# planning


@dataclass
class PlanEntry:
    node_id: str
    kind: str
    in_layout: GipLayout
    out_layout: GipLayout
    predicted: CostCounters
    depth: int
    level_before: int
    level_after: int
    bootstrap_before: bool = False

    @property
    def factor_in(self) -> Fraction:
        return self.in_layout.factor

    @property
    def factor_out(self) -> Fraction:
        return self.out_layout.factor


def _conv_spec(node: Node) -> hops.ConvSpec:
    return hops.ConvSpec(node.weights["weight"], int(node.params.get("stride", 1)),
                         node.params.get("padding"), node.weights.get("bias"))


def _deconv_spec(node: Node) -> hops.DeconvSpec:
    return hops.DeconvSpec(node.weights["weight"], int(node.params.get("stride", 2)), node.weights.get("bias"))


def _node_cost(node: Node, layout: GipLayout) -> tuple[GipLayout, CostCounters, int]:
    """(output layout, predicted counters, depth) for one node."""
    kind = node.kind
    if kind == "conv":
        sched = hops.conv_schedule(layout, _conv_spec(node), with_masks=False)
        return sched.out_layout, sched.cost(), 1
    if kind == "deconv":
        sched = hops.deconv_schedule(layout, _deconv_spec(node), with_masks=False)
        return sched.out_layout, sched.cost(), 1
    if kind == "avgpool":
        win = int(node.params["window"])
        sched = hops.avgpool_schedule(layout, win, int(node.params.get("stride", win)), with_masks=False)
        return sched.out_layout, sched.cost(), 1
    if kind == "upsample":
        s = int(node.params["scale"])
        cost, depth = hops.upsample_cost(layout, s)
        out = layout.with_geometry(layout.channels, layout.height * s)
        return out, cost, depth
    if kind == "batchnorm":
        return layout, hops.affine_cost(layout), 1
    if kind == "polyact_rn":
        return layout, hops.polyact_cost(layout), hops.POLYACT_DEPTH
    if kind == "add":
        return layout, CostCounters(adds=layout.num_cts), 0
    raise ModelSchemaError(f"node {node.id!r}: kind {kind!r} cannot run on packed data; convert the model first")


def plan(model: ModelGraph, ctx: HEContext, base_size: int) -> list[PlanEntry]:
    """Propagate layouts and levels, inserting bootstraps lazily.

    A bootstrap goes in front of a node exactly when the level of its input
    is below the node's multiplicative depth.
    """
    C, H, _ = model.input_shape
    layout = GipLayout(C, H, base_size, ctx.slot_count)
    layouts = {"input": layout}
    levels = {"input": ctx.max_level}
    entries = []
    for i, node in enumerate(model.nodes):
        src = model.input_of(i)
        layout, level = layouts[src], levels[src]
        out_layout, cost, depth = _node_cost(node, layout)
        if depth > ctx.bootstrap_refresh_level:
            raise LayoutError(f"node {node.id!r} needs {depth} levels, bootstrap only restores {ctx.bootstrap_refresh_level}")
        boot = level < depth
        if boot:
            cost = cost + CostCounters(bootstraps=layout.num_cts)
            level = ctx.bootstrap_refresh_level
        before = level
        if node.kind == "add":
            skip = node.params["skip"]
            if layouts[skip] != layout:
                raise LayoutError(f"node {node.id!r}: residual layouts differ")
            level = min(level, levels[skip])
        after = level - depth
        cost.max_depth = ctx.max_level - after
        entries.append(PlanEntry(node.id, node.kind, layout, out_layout, cost, depth, before, after, boot))
        layouts[node.id], levels[node.id] = out_layout, after
    return entries


# ---------------------------------------------------------------------------
# execution


@dataclass
class CostReport:
    layers: list[tuple[str, str, CostCounters]] = field(default_factory=list)

    @property
    def totals(self) -> CostCounters:
        total = CostCounters()
        for _, _, c in self.layers:
            total = total + c
        return total

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.layers + other.layers)


def _apply(node: Node, x: PackedTensor, outputs) -> PackedTensor:
    kind = node.kind
    if kind == "conv":
        return hops.conv2d(x, _conv_spec(node))
    if kind == "deconv":
        return hops.deconv2d(x, _deconv_spec(node))
    if kind == "avgpool":
        win = int(node.params["window"])
        return hops.avgpool(x, win, int(node.params.get("stride", win)))
    if kind == "upsample":
        return hops.upsample_nearest(x, int(node.params["scale"]))
    if kind == "batchnorm":
        return hops.batchnorm_affine(x, hops.AffineSpec(node.weights["scale"], node.weights["shift"]))
    if kind == "polyact_rn":
        return hops.polyact_eval(x, _polyact_coeffs(node))
    if kind == "add":
        return hops.residual_add(x, outputs[node.params["skip"]])
    raise ModelSchemaError(f"node {node.id!r}: kind {kind!r} cannot run on packed data")


def execute(model: ModelGraph, x: PackedTensor, entries: list[PlanEntry] | None = None
            ) -> tuple[PackedTensor, CostReport]:
    """Run the graph on packed data, checking every node against the plan."""
    ctx = x.ctx
    if entries is None:
        entries = plan(model, ctx, x.layout.base_size)
    if entries and entries[0].in_layout != x.layout:
        raise PlanDivergenceError(f"input layout {x.layout} differs from planned {entries[0].in_layout}")
    outputs = {"input": x}
    rep = CostReport()
    for i, (node, entry) in enumerate(zip(model.nodes, entries)):
        src = outputs[model.input_of(i)]
        before = ctx.snapshot()
        if entry.bootstrap_before:
            src = PackedTensor(src.layout, tuple(slotvm.bootstrap(ct) for ct in src.cts))
        out = _apply(node, src, outputs)
        measured = ctx.snapshot() - before
        measured.max_depth = ctx.max_level - out.level
        if measured != entry.predicted or out.layout != entry.out_layout or out.level != entry.level_after:
            raise PlanDivergenceError(
                f"node {node.id!r}: planned {entry.predicted} -> {entry.out_layout} at level {entry.level_after}, "
                f"measured {measured} -> {out.layout} at level {out.level}"
            )
        rep.layers.append((node.id, node.kind, measured))
        outputs[node.id] = out
    return outputs[model.nodes[-1].id] if model.nodes else x, rep


def oracle_forward(model: ModelGraph, x) -> np.ndarray:
    """Plaintext reference pipeline for the same graph."""
    outputs = {"input": np.asarray(x, dtype=np.float64)}
    for i, node in enumerate(model.nodes):
        v = outputs[model.input_of(i)]
        p, w = node.params, node.weights
        kind = node.kind
        if kind == "conv":
            k = w["weight"].shape[2]
            y = oracle.conv2d_ref(v, w["weight"], int(p.get("stride", 1)), p.get("padding", (k - 1) // 2), w.get("bias"))
        elif kind == "deconv":
            spec = _deconv_spec(node)
            y = oracle.deconv2d_ref(v, spec.weight, spec.stride, spec.padding, spec.output_padding, spec.bias)
        elif kind == "avgpool":
            y = oracle.avgpool_ref(v, int(p["window"]), int(p.get("stride", p["window"])))
        elif kind == "maxpool":
            y = oracle.maxpool_ref(v, int(p["window"]), int(p.get("stride", p["window"])))
        elif kind == "upsample":
            y = oracle.upsample_ref(v, int(p["scale"]))
        elif kind == "batchnorm":
            y = oracle.affine_ref(v, w["scale"], w["shift"])
        elif kind == "activation":
            y = oracle.relu_ref(v) if p["fn"] == "relu" else oracle.silu_ref(v)
        elif kind == "polyact_rn":
            y = oracle.polyact_rn_ref(v, _hermite(node).as_array(), w["running_max"],
                                      float(p.get("gamma", 3.0)), float(p.get("eps", 1e-5)))
        elif kind == "add":
            y = oracle.add_ref(v, outputs[p["skip"]])
        else:
            raise AssertionError(kind)
        outputs[node.id] = y
    return outputs[model.nodes[-1].id] if model.nodes else outputs["input"]


# ---------------------------------------------------------------------------
# reporting

COLUMNS = ("rotations", "ct_ct_mults", "pt_ct_mults", "adds", "bootstraps", "max_depth")


def report(cr: CostReport, fmt: str = "text") -> str:
    totals = cr.totals
    if fmt == "json":
        doc = {
            "columns": list(COLUMNS),
            "layers": [{"id": nid, "kind": kind, **c.as_dict()} for nid, kind, c in cr.layers],
            "totals": totals.as_dict(),
        }
        return json.dumps(doc, indent=2)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    rows = [("layer", "kind") + COLUMNS]
    for nid, kind, c in cr.layers:
        rows.append((nid, kind) + tuple(str(getattr(c, k)) for k in COLUMNS))
    rows.append(("TOTAL", "") + tuple(str(getattr(totals, k)) for k in COLUMNS))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(v.ljust(wd) for v, wd in zip(r, widths)).rstrip() for r in rows)


def plan_table(entries: list[PlanEntry]) -> str:
    head = ("node", "kind", "g_in", "g_out", "cts_out", "lvl_in", "lvl_out", "bootstrap") + COLUMNS[:-1]
    rows = [head]
    for e in entries:
        rows.append((e.node_id, e.kind, str(e.factor_in), str(e.factor_out), str(e.out_layout.num_cts),
                     str(e.level_before), str(e.level_after), "yes" if e.bootstrap_before else "")
                    + tuple(str(getattr(e.predicted, k)) for k in COLUMNS[:-1]))
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(v.ljust(wd) for v, wd in zip(r, widths)).rstrip() for r in rows)


# ---------------------------------------------------------------------------
# random graphs for differential testing


def random_model(rng: np.random.Generator, channels: int = 2, height: int = 8, base_size: int = 4,
                 n_nodes: int = 6, max_height: int = 16) -> ModelGraph:
    """Random converted graph over the packed node kinds with valid geometry."""
    C, H = channels, height
    shapes = {"input": (C, H)}
    nodes: list[Node] = []
    for n in range(n_nodes):
        nid = f"n{n}"
        kinds = ["conv", "batchnorm", "polyact_rn"]
        if H >= 2:
            kinds += ["avgpool", "conv_s2"]
        if H * 2 <= max_height:
            kinds += ["deconv", "upsample"]
        prev = nodes[-1].id if nodes else "input"
        skips = sorted(k for k, s in shapes.items() if s == (C, H) and k != prev)
        if skips:
            kinds.append("add")
        kind = kinds[rng.integers(len(kinds))]
        if kind in ("conv", "conv_s2"):
            k = int(rng.choice([1, 3, 5]))
            s = 2 if kind == "conv_s2" else 1
            Co = int(rng.choice([1, 2, 4]))
            w = rng.uniform(-1, 1, (Co, C, k, k)) / np.sqrt(C * k * k)
            weights = {"weight": w}
            if rng.random() < 0.5:
                weights["bias"] = rng.uniform(-0.5, 0.5, Co)
            nodes.append(Node(nid, "conv", {"stride": s}, weights))
            C, H = Co, H // s
        elif kind == "deconv":
            k = int(rng.choice([2, 3]))
            Co = int(rng.choice([1, 2]))
            w = rng.uniform(-1, 1, (C, Co, k, k)) / np.sqrt(C)
            nodes.append(Node(nid, "deconv", {"stride": 2}, {"weight": w}))
            C, H = Co, H * 2
        elif kind == "avgpool":
            nodes.append(Node(nid, "avgpool", {"window": 2, "stride": 2}))
            H //= 2
        elif kind == "upsample":
            nodes.append(Node(nid, "upsample", {"scale": 2}))
            H *= 2
        elif kind == "batchnorm":
            nodes.append(Node(nid, "batchnorm", {}, {"scale": rng.uniform(0.5, 1.5, C), "shift": rng.uniform(-0.5, 0.5, C)}))
        elif kind == "polyact_rn":
            preset = "relu" if rng.random() < 0.5 else "silu"
            nodes.append(Node(nid, "polyact_rn", {"preset": preset, "gamma": 3.0, "eps": 1e-5},
                              {"running_max": rng.uniform(1.0, 3.0, C)}))
        else:
            nodes.append(Node(nid, "add", {"skip": skips[rng.integers(len(skips))]}))
        shapes[nid] = (C, H)
    return ModelGraph((channels, height, height), nodes)
