"""One-time calibration of the end-to-end training threshold.

Trains one architecture on the seeded 200-sample synthetic set with the
default optimizer settings and prints per-epoch progress plus the held-out
test metrics. Usage::

    python scripts/calibrate_training.py unetpp 8    # variant, base width
"""
import sys
import tempfile
import time

from threadpoolctl import threadpool_limits

from nestseg.data import SyntheticConfig, generate_synthetic, load_dataset
from nestseg.graph import ArchitectureSpec, build
from nestseg.trainer import TrainConfig, evaluate, train


def main(variant="unetpp", base_width=8):
    with tempfile.TemporaryDirectory() as root, threadpool_limits(limits=1):
        splits = load_dataset(generate_synthetic(SyntheticConfig(seed=0), root))
        graph = build(ArchitectureSpec.preset(variant, base_width=base_width), seed=0)
        t0 = time.time()

        def progress(tr, va):
            print(f"epoch {tr.epoch:2d} train loss {tr.loss:.4f} iou {tr.iou:.4f} | val iou {va.iou:.4f} "
                  f"({time.time() - t0:.0f}s)", flush=True)

        result = train(graph, splits, TrainConfig(max_epochs=20, seed=0), progress=progress)
        rec = evaluate(graph, result.checkpoint, splits["test"])
        print(f"{variant} base {base_width}: best epoch {result.checkpoint.epoch}, "
              f"test iou {rec.iou:.4f} dice {rec.dice:.4f}, {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "unetpp", int(sys.argv[2]) if len(sys.argv) > 2 else 8)
