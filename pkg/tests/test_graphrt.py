import json
from fractions import Fraction

import numpy as np
import pytest

from gipfhe import graphrt
from gipfhe.graphrt import ModelGraph, ModelSchemaError, Node
from gipfhe.packing import LayoutError, pack, unpack
from gipfhe.polyact import SILU
from gipfhe.slotvm import HEContext


def _conv(nid, cin, cout, k=3, stride=1, rng=None):
    rng = rng or np.random.default_rng(0)
    return Node(nid, "conv", {"stride": stride}, {"weight": rng.uniform(-1, 1, (cout, cin, k, k)) / (cin * k)})


def _unconverted():
    return ModelGraph((1, 8, 8), [
        _conv("c1", 1, 2),
        Node("a1", "activation", {"fn": "relu"}),
        Node("p1", "maxpool", {"window": 2, "stride": 2}),
    ])


def test_model_validation_errors():
    with pytest.raises(ModelSchemaError, match="earlier node"):
        ModelGraph((1, 4, 4), [Node("a", "add", {"skip": "a"})])
    with pytest.raises(ModelSchemaError, match="earlier node"):
        ModelGraph((1, 4, 4), [Node("a", "add", {"skip": "b"}), Node("b", "batchnorm", {}, {"scale": np.ones(1), "shift": np.zeros(1)})])
    with pytest.raises(ModelSchemaError, match="residual shapes"):
        ModelGraph((1, 4, 4), [_conv("c", 1, 2), Node("a", "add", {"skip": "input"})])
    with pytest.raises(ModelSchemaError, match="unknown kind"):
        ModelGraph((1, 4, 4), [Node("x", "softmax")])
    with pytest.raises(ModelSchemaError, match="missing weight"):
        ModelGraph((1, 4, 4), [Node("c", "conv")])
    with pytest.raises(ModelSchemaError, match="duplicate"):
        ModelGraph((1, 4, 4), [_conv("c", 1, 1), _conv("c", 1, 1)])


def test_convert_model():
    conv, summary = graphrt.convert_model(_unconverted(), "relu")
    assert [n.kind for n in conv.nodes] == ["conv", "polyact_rn", "avgpool"]
    assert conv.nodes[1].params["preset"] == "relu"
    np.testing.assert_array_equal(conv.nodes[1].weights["running_max"], np.ones(2))
    assert conv.nodes[2].params == {"window": 2, "stride": 2}
    assert len(summary) == 2
    again, summary2 = graphrt.convert_model(conv, "relu")
    assert summary2 == [] and [n.kind for n in again.nodes] == [n.kind for n in conv.nodes]

    silu, _ = graphrt.convert_model(_unconverted(), "silu")
    assert graphrt._hermite(silu.nodes[1]) == SILU

    plain = ModelGraph((1, 4, 4), [_conv("c", 1, 1)])
    assert graphrt.convert_model(plain)[1] == []
    resized, lines = graphrt.convert_model(plain, resize=8)
    assert resized.input_shape == (1, 8, 8) and resized.resize == (8, 8) and lines

    with pytest.raises(ValueError):
        graphrt.convert_model(plain, "gelu")


def test_save_load_round_trip(tmp_path):
    model, _ = graphrt.convert_model(_unconverted())
    path = tmp_path / "m.json"
    graphrt.save_model(model, path)
    doc = json.loads(path.read_text())
    assert doc["format"] == graphrt.FORMAT
    loaded = graphrt.load_model(path)
    assert [n.id for n in loaded.nodes] == ["c1", "a1", "p1"]
    np.testing.assert_allclose(loaded.nodes[0].weights["weight"], model.nodes[0].weights["weight"], atol=1e-7)


def test_load_errors(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"format": graphrt.FORMAT, "input": {"channels": 1, "height": 4, "width": 4},
                                "nodes": [{"id": "c", "kind": "conv", "weights": {"weight": "missing.tensor"}}]}))
    with pytest.raises(ModelSchemaError, match="dangling"):
        graphrt.load_model(path)
    path.write_text("{not json")
    with pytest.raises(ModelSchemaError):
        graphrt.load_model(path)
    path.write_text(json.dumps({"format": graphrt.FORMAT, "nodes": []}))
    with pytest.raises(ModelSchemaError):
        graphrt.load_model(path)


def test_plan_factor_chain_by_hand():
    rng = np.random.default_rng(1)
    model = ModelGraph((1, 16, 16), [
        _conv("c1", 1, 2, rng=rng),
        _conv("c2", 2, 2, stride=2, rng=rng),
        Node("p", "avgpool", {"window": 2}),
        Node("u", "upsample", {"scale": 2}),
    ])
    entries = graphrt.plan(model, HEContext(slot_count=64), 8)
    assert [e.factor_in for e in entries] == [2, 2, 1, Fraction(1, 2)]
    assert [e.factor_out for e in entries] == [2, 1, Fraction(1, 2), 1]


def test_plan_inserts_bootstrap_between_polyacts():
    model = ModelGraph((1, 4, 4), [
        Node("a", "polyact_rn", {"preset": "relu"}, {"running_max": np.ones(1)}),
        Node("b", "polyact_rn", {"preset": "relu"}, {"running_max": np.ones(1)}),
    ])
    entries = graphrt.plan(model, HEContext(slot_count=16, max_level=3), 4)
    assert [e.bootstrap_before for e in entries] == [False, True]


def test_plan_rejects_unconverted_and_infeasible():
    with pytest.raises(ModelSchemaError):
        graphrt.plan(_unconverted(), HEContext(slot_count=64), 4)
    poly = ModelGraph((1, 4, 4), [Node("a", "polyact_rn", {}, {"running_max": np.ones(1)})])
    with pytest.raises(LayoutError):
        graphrt.plan(poly, HEContext(slot_count=16, max_level=2), 4)


def test_identity_graph():
    w = np.ones((1, 1, 1, 1))
    model = ModelGraph((1, 8, 8), [Node("c", "conv", {}, {"weight": w})])
    ctx = HEContext(slot_count=64)
    x = np.random.default_rng(2).normal(size=(1, 8, 8))
    out, rep = graphrt.execute(model, pack(x, 4, ctx))
    np.testing.assert_array_equal(unpack(out), x)
    assert rep.totals.pt_ct_mults == 4


def test_residual_block_adds_without_rotations():
    rng = np.random.default_rng(3)
    model = ModelGraph((2, 8, 8), [
        _conv("c1", 2, 2, rng=rng),
        Node("bn", "batchnorm", {}, {"scale": np.array([0.5, 2.0]), "shift": np.array([0.1, -0.1])}),
        Node("r", "add", {"skip": "input"}),
    ])
    ctx = HEContext(slot_count=64)
    x = rng.uniform(-1, 1, (2, 8, 8))
    out, rep = graphrt.execute(model, pack(x, 4, ctx))
    nid, kind, cost = rep.layers[-1]
    assert kind == "add" and cost.rotations == 0 and cost.adds == 8
    np.testing.assert_allclose(unpack(out), graphrt.oracle_forward(model, x), atol=1e-9)


def test_toy_cnn_matches_oracle_pipeline():
    rng = np.random.default_rng(4)
    model = ModelGraph((1, 16, 16), [
        _conv("c1", 1, 2, rng=rng),
        Node("bn", "batchnorm", {}, {"scale": rng.uniform(0.5, 1.5, 2), "shift": rng.uniform(-0.2, 0.2, 2)}),
        Node("act", "polyact_rn", {"preset": "relu"}, {"running_max": np.array([2.0, 3.0])}),
        Node("pool", "avgpool", {"window": 2}),
        _conv("c2", 2, 2, rng=rng),
    ])
    x = rng.uniform(-1, 1, (1, 16, 16))
    out, rep = graphrt.execute(model, pack(x, 8, HEContext(slot_count=256)))
    np.testing.assert_allclose(unpack(out), graphrt.oracle_forward(model, x), atol=1e-9)


def test_plan_execute_agreement_random_graphs():
    rng = np.random.default_rng(5)
    for _ in range(10):
        model = graphrt.random_model(rng, channels=2, height=4, base_size=4)
        ctx = HEContext(slot_count=64, max_level=int(rng.integers(3, 7)))
        x = rng.uniform(-1, 1, model.input_shape)
        entries = graphrt.plan(model, ctx, 4)
        out, rep = graphrt.execute(model, pack(x, 4, ctx), entries)
        assert rep.totals == ctx.counters
        planned = sum((e.predicted for e in entries), graphrt.CostCounters())
        assert planned == rep.totals
        np.testing.assert_allclose(unpack(out), graphrt.oracle_forward(model, x), atol=1e-6)


def test_execute_detects_divergence():
    model = ModelGraph((1, 4, 4), [_conv("c", 1, 1)])
    ctx = HEContext(slot_count=16)
    entries = graphrt.plan(model, ctx, 4)
    entries[0].predicted.rotations += 1
    with pytest.raises(graphrt.PlanDivergenceError):
        graphrt.execute(model, pack(np.zeros((1, 4, 4)), 4, ctx), entries)


def test_report():
    empty = graphrt.report(graphrt.CostReport())
    assert empty.splitlines()[-1].split() == ["TOTAL", "0", "0", "0", "0", "0", "0"]
    a = graphrt.CostReport([("x", "conv", graphrt.CostCounters(1, 0, 2, 3, 0, 1))])
    b = graphrt.CostReport([("y", "batchnorm", graphrt.CostCounters(0, 0, 1, 1, 1, 2))])
    merged = a + b
    assert merged.totals == graphrt.CostCounters(1, 0, 3, 4, 1, 2)
    doc = json.loads(graphrt.report(merged, "json"))
    assert doc["totals"]["pt_ct_mults"] == sum(l["pt_ct_mults"] for l in doc["layers"])
    assert graphrt.report(merged) == graphrt.report(merged)
