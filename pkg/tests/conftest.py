import pytest
import torch

from slim_distill.graph import build_graph
from slim_distill.zoo import conv_chain


def conv(nid, cin, cout, kernel=3, stride=1):
    return {"id": nid, "kind": "conv", "params": {"in_channels": cin, "out_channels": cout, "kernel": kernel, "stride": stride}}


def node(nid, kind, **params):
    return {"id": nid, "kind": kind, "params": params}


def edges(*pairs):
    return [{"from": a, "to": b} for a, b in pairs]


def six_layer_spec():
    """Six conv+BN+SiLU blocks with one residual Add and one Concat."""
    nodes, links = [], []
    for i, (cin, cout) in enumerate([(3, 8), (8, 8), (8, 8), (8, 8), (16, 8), (8, 8)], start=1):
        nodes += [conv(f"c{i}", cin, cout), node(f"bn{i}", "bn"), node(f"act{i}", "act", fn="silu")]
        links += [(f"c{i}", f"bn{i}"), (f"bn{i}", f"act{i}")]
    nodes += [node("add1", "add"), node("cat", "concat")]
    links += [
        ("act1", "c2"),
        ("act1", "add1"),
        ("act2", "add1"),
        ("add1", "c3"),
        ("act3", "c4"),
        ("act3", "cat"),
        ("act4", "cat"),
        ("cat", "c5"),
        ("act5", "c6"),
    ]
    return {"input_channels": 3, "nodes": nodes, "edges": edges(*links), "outputs": ["act6"]}


def residual_spec(channels=8):
    return {
        "input_channels": 3,
        "nodes": [
            conv("stem", 3, channels),
            node("stem_bn", "bn"),
            node("stem_act", "act"),
            conv("a", channels, channels),
            node("a_bn", "bn"),
            conv("b", channels, channels),
            node("b_bn", "bn"),
            node("add", "add"),
        ],
        "edges": edges(
            ("stem", "stem_bn"),
            ("stem_bn", "stem_act"),
            ("stem_act", "a"),
            ("stem_act", "b"),
            ("a", "a_bn"),
            ("b", "b_bn"),
            ("a_bn", "add"),
            ("b_bn", "add"),
        ),
    }


def concat_spec(consumer_in=16):
    return {
        "input_channels": 3,
        "nodes": [
            conv("a", 3, 8),
            node("a_bn", "bn"),
            conv("b", 3, 8),
            node("b_bn", "bn"),
            node("cat", "concat"),
            conv("out", consumer_in, 4),
        ],
        "edges": edges(("a", "a_bn"), ("b", "b_bn"), ("a_bn", "cat"), ("b_bn", "cat"), ("cat", "out")),
    }


def randomize_bn(graph, generator):
    """Non-trivial gammas and running statistics on every BN."""
    with torch.no_grad():
        for nid in graph.bn_ids():
            bn = graph.layers[nid]
            c = bn.num_features
            bn.weight.copy_(0.5 + torch.rand(c, generator=generator, dtype=bn.weight.dtype))
            bn.bias.copy_(torch.randn(c, generator=generator, dtype=bn.bias.dtype) * 0.1)
            bn.running_mean.copy_(torch.randn(c, generator=generator, dtype=bn.running_mean.dtype) * 0.1)
            bn.running_var.copy_(0.5 + torch.rand(c, generator=generator, dtype=bn.running_var.dtype))
    return graph


@pytest.fixture
def chain_graph():
    return build_graph(conv_chain([16, 16, 16, 16, 16]), seed=0)


@pytest.fixture
def residual_graph():
    return build_graph(residual_spec(), seed=0)


@pytest.fixture
def concat_graph():
    return build_graph(concat_spec(), seed=0)


@pytest.fixture
def six_layer_graph():
    return build_graph(six_layer_spec(), seed=0)
