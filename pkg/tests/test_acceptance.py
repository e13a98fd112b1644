"""Acceptance criteria A1-A9, one test each.

Every test records a ``PASS``/``FAIL`` line (shown in the terminal summary)
before asserting. A6 trains two networks end to end and takes several
minutes; deselect it with ``-m "not slow"``.
"""
import csv
import time

import numpy as np
import pytest

from nestseg.cli import main
from nestseg.gradcheck import CASES, run_battery
from nestseg.graph import ArchitectureSpec, NodeId, build, dependency_cone, forward, forward_heads, param_count
from nestseg.losses import bce_dice_loss
from nestseg.pruning import prune, pruned_node_set, pruning_report, write_report_csv
from nestseg.tensor import Tensor
from nestseg.data import DataSplit

# A6 contract, frozen from the one-time calibration run (seed 0, 200 samples
# 96x96, base width 8, batch 8, lr 3e-4, <= 20 epochs): UNet++ w/ DS reached
# test IoU 0.9745, U-Net 0.9631. T keeps a margin below the calibrated value
# for BLAS rounding differences across machines.
CALIBRATED_UNETPP_IOU = 0.9745
CALIBRATED_UNET_IOU = 0.9631
T = 0.95
A6_BASE_WIDTH = 8

PUBLISHED_PARAMS = {"unet": 7.76e6, "wide_unet": 9.13e6, "unetpp": 9.04e6}


def test_a1_topology(criterion):
    t0 = time.perf_counter()
    ok = True
    for depth in range(2, 7):
        spec = ArchitectureSpec.preset("unetpp", depth=depth, base_width=1, input_size=(2 ** depth,) * 2)
        g = build(spec)
        ok &= len(g.nodes) == depth * (depth + 1) // 2
        ok &= all(g.in_degree(n) == n.j + 1 for n in g.nodes if n.j > 0)
    g5 = build(ArchitectureSpec.preset("unetpp", base_width=1))
    ok &= len(g5.nodes) == 15
    secs = time.perf_counter() - t0
    criterion("A1", ok and secs < 1, f"15 nodes at L=5, j+1 inputs for L=2..6 ({secs:.2f}s)")
    assert ok and secs < 1


def test_a2_parameter_counts(criterion):
    # convs_per_node=2 is the calibrated convention; see test_graph for the
    # brute-force enumeration and the cpn=1 counts that miss by ~50%
    counts = {
        "unet": param_count(build(ArchitectureSpec.preset("unet"))),
        "wide_unet": param_count(build(ArchitectureSpec.preset("wide_unet"))),
        "unetpp": param_count(build(ArchitectureSpec.preset("unetpp", deep_supervision=False))),
    }
    ds = param_count(build(ArchitectureSpec.preset("unetpp")))
    rel = {k: counts[k] / PUBLISHED_PARAMS[k] - 1 for k in counts}
    ok = all(abs(r) <= 0.03 for r in rel.values()) and ds - counts["unetpp"] == 3 * (32 + 1)
    detail = ", ".join(f"{k} {counts[k] / 1e6:.3f}M ({rel[k]:+.1%})" for k in counts)
    criterion("A2", ok, detail + f", DS adds {ds - counts['unetpp']}")
    assert ok


def test_a2_single_conv_convention_rejected():
    """The calibration: one conv per node misses the published counts by far more than 3%."""
    one = param_count(build(ArchitectureSpec.preset("unet", convs_per_node=1)))
    two = param_count(build(ArchitectureSpec.preset("unet", convs_per_node=2)))
    assert abs(one / 7.76e6 - 1) > 0.3 and abs(two / 7.76e6 - 1) <= 0.03


def test_a3_gradients(criterion):
    t0 = time.perf_counter()
    reports = run_battery(None, instances=10, seed=0, tol=1e-4)
    secs = time.perf_counter() - t0
    worst = max(reports.values(), key=lambda r: r.max_rel_error)
    ok = set(reports) == set(CASES) and all(r.passed for r in reports.values()) and secs < 120
    criterion("A3", ok, f"{len(reports)} cases x 10 instances, worst rel err {worst.max_rel_error:.2e} ({secs:.0f}s)")
    assert ok, "\n".join(f"{k}: {r}" for k, r in reports.items() if not r.passed)


def test_a4_prune_equivalence(criterion, rng):
    g = build(ArchitectureSpec.preset("unetpp", input_size=(16, 16)), seed=0)
    x = Tensor(rng.random((20, 1, 16, 16)).astype(np.float32))
    max_diff, nodes_ok = 0.0, True
    for d in range(1, 5):
        sub = prune(g, d)
        nodes_ok &= sub.nodes == pruned_node_set(5, d) == set(dependency_cone(g.spec, [NodeId(0, d)]))
        for k in range(20):
            xi = Tensor(x.data[k:k + 1])
            diff = np.abs(sub.forward(xi).data - forward(g, xi, f"fast:{d}").data).max()
            max_diff = max(max_diff, float(diff))
    ok = nodes_ok and max_diff == 0.0
    criterion("A4", ok, f"levels 1-4 x 20 inputs, max abs diff {max_diff}")
    assert ok


def test_a5_cost_monotone(criterion, tmp_path, rng):
    g = build(ArchitectureSpec.preset("unetpp", input_size=(32, 32)), seed=0)
    y = (rng.random((4, 1, 32, 32)) > 0.7).astype(np.float32)
    split = DataSplit("test", list("abcd"), rng.random((4, 1, 32, 32)).astype(np.float32), y)
    rows = pruning_report(g, split, warmup=2)
    write_report_csv(tmp_path / "prune_report.csv", rows)
    with open(tmp_path / "prune_report.csv") as fh:
        recorded = list(csv.DictReader(fh))
    params = [r.params for r in rows]
    flops = [r.flops for r in rows]
    ok = all(a < b for a, b in zip(params, params[1:])) and all(a < b for a, b in zip(flops, flops[1:]))
    ok &= len(recorded) == 4 and all(float(r["seconds_per_image"]) > 0 for r in recorded)
    times = " ".join(f"L{r.level}={r.seconds_per_image * 1e3:.1f}ms" for r in rows)
    criterion("A5", ok, f"params {params}, flops strictly increasing; wall time (reported only) {times}")
    assert ok


def _train_and_test(variant, data, out):
    rc = main(["train", "--arch", variant, "--base-width", str(A6_BASE_WIDTH), "--data", str(data),
               "--out", str(out), "--epochs", "20", "--seed", "0"])
    assert rc == 0
    args = ["eval", "--arch", str(out / "arch.txt"), "--checkpoint", str(out / "checkpoint.unpp"),
            "--data", str(data), "--split", "test", "--out", str(out)]
    assert main(args) == 0
    with open(out / "eval_accurate.csv") as fh:
        return float(next(csv.DictReader(fh))["iou"])


@pytest.mark.slow
def test_a6_end_to_end(criterion, tmp_path):
    t0 = time.perf_counter()
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--seed", "0"]) == 0
    data = tmp_path / "data" / "manifest.tsv"
    pp = _train_and_test("unetpp", data, tmp_path / "unetpp")
    un = _train_and_test("unet", data, tmp_path / "unet")
    minutes = (time.perf_counter() - t0) / 60
    ok = pp >= T and un >= T - 0.1 and minutes < 30
    criterion("A6", ok, f"unetpp test IoU {pp:.4f} (T={T}), unet {un:.4f} (>= {T - 0.1:.2f}), "
                        f"base width {A6_BASE_WIDTH}, {minutes:.1f} min")
    assert ok


def test_a7_loss_values(criterion):
    ones = np.ones((1, 1, 8, 8))
    perfect = bce_dice_loss(Tensor(ones), ones).item()
    half = bce_dice_loss(Tensor(np.full_like(ones, 0.5)), ones).item()
    ok = abs(perfect + 1) <= 1e-3 and abs(half + 0.320) <= 1e-3
    criterion("A7", ok, f"perfect {perfect:.6f}, half-confidence {half:.6f}")
    assert ok


def test_a8_determinism(criterion, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "16", "--size", "32", "--depth", "3"]) == 0
    blobs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--arch", "unetpp", "--depth", "3", "--base-width", "4", "--input-size", "32",
                     "--data", str(tmp_path / "d" / "manifest.tsv"), "--out", str(out),
                     "--epochs", "3", "--seed", "11"]) == 0
        blobs[run] = ((out / "metrics.csv").read_bytes(), (out / "checkpoint.unpp").read_bytes())
    ok = blobs["a"] == blobs["b"]
    criterion("A8", ok, f"metrics.csv and checkpoint.unpp byte-identical ({len(blobs['a'][1])} bytes)")
    assert ok


def test_a9_modes(criterion, rng):
    g = build(ArchitectureSpec.preset("unetpp", input_size=(32, 32)), seed=1)
    x = Tensor(rng.random((2, 1, 32, 32)).astype(np.float32))
    heads = forward_heads(g, x)
    mean = np.mean([heads[d].data.astype(np.float64) for d in sorted(heads)], axis=0)
    acc_diff = float(np.abs(forward(g, x, "accurate").data - mean).max())
    fast_diff = float(np.abs(forward(g, x, "fast:4").data - heads[4].data).max())
    ok = acc_diff <= 1e-6 and fast_diff == 0.0
    criterion("A9", ok, f"accurate vs head mean {acc_diff:.1e}, fast:4 vs last head {fast_diff}")
    assert ok
