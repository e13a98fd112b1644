import numpy as np
import pytest

from nestseg.data import DataSplit
from nestseg.graph import ArchitectureSpec, NodeId, build, forward, param_count
from nestseg.pruning import prune, pruned_node_set, pruning_report, write_report_csv
from nestseg.tensor import Tensor
from nestseg.trainer import Checkpoint


@pytest.fixture(scope="module")
def graph():
    return build(ArchitectureSpec.preset("unetpp", base_width=2, input_size=(16, 16)), seed=3)


@pytest.fixture
def x(rng):
    return Tensor(rng.random((2, 1, 16, 16)).astype(np.float32))


def test_level1_nodes(graph):
    assert prune(graph, 1).nodes == {NodeId(0, 0), NodeId(1, 0), NodeId(0, 1)}


def test_full_level_is_whole_graph(graph):
    assert prune(graph, 4).nodes == set(graph.nodes)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_node_count_and_closed_form(graph, d):
    nodes = prune(graph, d).nodes
    assert len(nodes) == (d + 1) * (d + 2) // 2
    assert nodes == pruned_node_set(5, d)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_output_identical_to_fast_mode(graph, x, d):
    full = forward(graph, x, f"fast:{d}").data
    assert np.abs(prune(graph, d).forward(x).data - full).max() == 0.0


def test_parameters_shared_and_untouched(graph):
    before = Checkpoint.capture(graph).to_bytes()
    sub = prune(graph, 2)
    for name, p in sub.graph.parameters.items():
        assert p is graph.parameters[name]
    assert Checkpoint.capture(graph).to_bytes() == before


def test_params_strictly_increase(graph):
    counts = [param_count(prune(graph, d).graph) for d in range(1, 5)]
    assert counts == sorted(set(counts))


@pytest.mark.parametrize("level", [0, 5, -1])
def test_level_out_of_range(graph, level):
    with pytest.raises(ValueError, match="level"):
        prune(graph, level)


def test_needs_deep_supervision():
    g = build(ArchitectureSpec.preset("unetpp", base_width=1, deep_supervision=False, input_size=(16, 16)))
    with pytest.raises(ValueError, match="deep-supervised"):
        prune(g, 2)
    with pytest.raises(ValueError, match="deep-supervised"):
        prune(build(ArchitectureSpec.preset("unet", base_width=1, input_size=(16, 16))), 2)


def test_report(graph, rng, tmp_path):
    y = (rng.random((3, 1, 16, 16)) > 0.5).astype(np.float32)
    split = DataSplit("test", ["a", "b", "c"], rng.random((3, 1, 16, 16)).astype(np.float32), y)
    rows = pruning_report(graph, split, n_images=2, warmup=1)
    assert [r.level for r in rows] == [1, 2, 3, 4]
    assert all(a.params < b.params and a.flops < b.flops for a, b in zip(rows, rows[1:]))
    for r in rows:
        assert r.params == param_count(prune(graph, r.level).graph)
        assert 0 <= r.iou <= r.dice <= 1 and r.seconds_per_image > 0
    write_report_csv(tmp_path / "r.csv", rows)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "level,params,flops,seconds_per_image,iou,dice" and len(lines) == 5
