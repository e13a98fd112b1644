"""Adam training with early stopping on validation IoU, checkpoints and metrics logs."""
from __future__ import annotations

import csv
import io
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import DataSplit
from .graph import ModelGraph, flop_count, forward, forward_heads, param_count, parse_mode
from .losses import LossConfig, bce_dice_loss, deep_supervision_loss, dice_per_image, iou_per_image
from .tensor import Parameter, Tape, Tensor

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "iou", "dice", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 20
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: Sequence[Parameter], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update of ``params`` from their ``.grad`` buffers, in place.

    Raises FloatingPointError (before touching anything) if a gradient is not finite.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {p.name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)).astype(p.dtype)


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"UNPP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Parameter and optimizer snapshot tied to one architecture fingerprint."""

    fingerprint: str
    params: Dict[str, np.ndarray]
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_val_iou: float = float("nan")

    @classmethod
    def capture(cls, graph: ModelGraph, adam: Optional[AdamState] = None, epoch: int = 0,
                best_val_iou: float = float("nan")) -> "Checkpoint":
        params = {name: p.data.astype(np.float32).copy() for name, p in graph.parameters.items()}
        return cls(graph.spec.fingerprint(), params, adam.copy() if adam else AdamState(), epoch, best_val_iou)

    def check(self, graph: ModelGraph) -> None:
        if self.fingerprint != graph.spec.fingerprint():
            raise ValueError(
                f"checkpoint fingerprint {self.fingerprint[:12]} does not match graph {graph.spec.fingerprint()[:12]}"
            )
        mine = graph.parameters
        if set(mine) != set(self.params):
            missing = sorted(set(mine) ^ set(self.params))[:3]
            raise ValueError(f"checkpoint parameter names differ from graph, e.g. {missing}")
        for name, p in mine.items():
            if p.shape != self.params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {self.params[name].shape} != graph {p.shape}")

    def restore(self, graph: ModelGraph) -> None:
        self.check(graph)
        for name, p in graph.parameters.items():
            p.data = self.params[name].astype(p.dtype).copy()
            p.zero_grad()

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(MAGIC)
        fp = self.fingerprint.encode("ascii")
        out.write(struct.pack("<IH", FORMAT_VERSION, len(fp)))
        out.write(fp)
        out.write(struct.pack("<IdQ", self.epoch, self.best_val_iou, self.adam.step))
        records = [(n, a) for n, a in self.params.items()]
        records += [(f"adam.m.{n}", self.adam.m[n]) for n in self.params if n in self.adam.m]
        records += [(f"adam.v.{n}", self.adam.v[n]) for n in self.params if n in self.adam.v]
        out.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
            out.write(struct.pack("<B", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        try:
            return cls._parse(buf)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValueError(f"corrupt or truncated checkpoint ({len(buf)} bytes): {exc}") from None

    @classmethod
    def _parse(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise ValueError(f"not a checkpoint (magic {buf[:4]!r})")
        pos = 4
        version, fplen = struct.unpack_from("<IH", buf, pos)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += 6
        fingerprint = buf[pos:pos + fplen].decode("ascii")
        pos += fplen
        epoch, best, step = struct.unpack_from("<IdQ", buf, pos)
        pos += struct.calcsize("<IdQ")
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params, m, v = {}, {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
            if name.startswith("adam.m."):
                m[name[7:]] = arr
            elif name.startswith("adam.v."):
                v[name[7:]] = arr
            else:
                params[name] = arr
        if pos != len(buf):
            raise ValueError(f"{len(buf) - pos} trailing bytes in checkpoint")
        return cls(fingerprint, params, AdamState(step, m, v), epoch, best)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# -- metrics -----------------------------------------------------------------------

@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    iou: float
    dice: float
    seconds: float = 0.0
    params: Optional[int] = None
    flops: Optional[int] = None
    mode: str = "accurate"

    def row(self, with_time: bool = True) -> List[str]:
        secs = f"{self.seconds:.4f}" if with_time else "0"
        return [str(self.epoch), self.split, f"{self.loss:.8f}", f"{self.iou:.8f}", f"{self.dice:.8f}", secs]


def write_metrics_csv(path, history: Iterable[MetricsRecord], with_time: bool = True) -> None:
    """CSV with header ``epoch,split,loss,iou,dice,seconds``.

    ``with_time=False`` writes 0 in the seconds column so reruns are byte-identical.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for rec in history:
            w.writerow(rec.row(with_time))


def _mode_output(graph: ModelGraph, heads: Mapping[int, Tensor], mode) -> np.ndarray:
    kind, level = parse_mode(mode)
    if kind == "fast":
        return heads[level].data
    arrs = [heads[d].data for d in sorted(heads)]
    return arrs[0] if len(arrs) == 1 else sum(arrs[1:], arrs[0]) * (1.0 / len(arrs))


def evaluate(graph: ModelGraph, checkpoint: Optional[Checkpoint], split: DataSplit, mode="accurate",
             batch_size: int = 8, loss_config: LossConfig = LossConfig(), epoch: int = 0) -> MetricsRecord:
    """Mean per-image IoU/Dice and mean loss of the ``mode`` output over ``split``.

    When ``checkpoint`` is given its weights are loaded into ``graph`` first.
    """
    if checkpoint is not None:
        checkpoint.restore(graph)
    if len(split) == 0:
        raise ValueError(f"split {split.name!r} is empty")
    kind, level = parse_mode(mode)
    if kind == "fast" and level not in graph.heads:
        raise ValueError(f"no output head at X0,{level}; available: {sorted(graph.heads)}")
    dtype = next(iter(graph.parameters.values())).dtype
    losses, ious, dices = [], [], []
    start = time.perf_counter()
    for x, y in split.batches(batch_size):
        out = forward(graph, Tensor(x.astype(dtype)), mode)
        per_image = [bce_dice_loss(Tensor(out.data[k:k + 1]), y[k:k + 1].astype(dtype), loss_config).item()
                     for k in range(len(x))]
        losses.extend(per_image)
        ious.extend(iou_per_image(out.data, y))
        dices.extend(dice_per_image(out.data, y))
    seconds = time.perf_counter() - start
    label = "accurate" if kind == "accurate" else f"fast:{level}"
    return MetricsRecord(epoch, split.name, float(np.mean(losses)), float(np.mean(ious)),
                         float(np.mean(dices)), seconds, param_count(graph), flop_count(graph), label)


# -- training loop -------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[MetricsRecord]
    stopped_early: bool = False
    diverged: bool = False

    def __iter__(self):
        # allows ``checkpoint, history = train(...)``
        return iter((self.checkpoint, self.history))


def _train_epoch(graph: ModelGraph, data: DataSplit, config: TrainConfig, adam: AdamState,
                 loss_config: LossConfig, epoch: int) -> Tuple[float, float, float]:
    params = list(graph.parameters.values())
    dtype = params[0].dtype
    total_loss = 0.0
    ious, dices = [], []
    shuffle_seed = np.random.SeedSequence([config.seed, epoch]).generate_state(1)[0]
    for x, y in data.batches(config.batch_size, seed=int(shuffle_seed)):
        graph.zero_grad()
        xt = Tensor(x.astype(dtype))
        yt = Tensor(y.astype(dtype))
        with Tape() as tape:
            heads = forward_heads(graph, xt)
            loss = deep_supervision_loss([heads[d] for d in sorted(heads)], yt, loss_config)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
        tape.backward(loss)
        del tape
        try:
            adam_step(params, adam, config)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
        total_loss += value * len(x)
        pred = _mode_output(graph, heads, "accurate")
        ious.extend(iou_per_image(pred, y))
        dices.extend(dice_per_image(pred, y))
    return total_loss / len(data), float(np.mean(ious)), float(np.mean(dices))


def train(graph: ModelGraph, splits: Mapping[str, DataSplit], config: TrainConfig = TrainConfig(),
          loss_config: LossConfig = LossConfig(), progress=None) -> TrainResult:
    """Fit ``graph`` on ``splits['train']``, early-stopping on ``splits['val']`` IoU.

    Every head is supervised (a single-head graph reduces to the plain
    loss). Validation uses accurate mode. On return the graph holds the
    weights of the best validation epoch, which is also the returned
    checkpoint.
    """
    train_split, val_split = splits.get("train"), splits.get("val")
    for name, s in (("train", train_split), ("val", val_split)):
        if s is None or len(s) == 0:
            raise ValueError(f"{name} split is empty")
    overlap = set(train_split.ids) & set(val_split.ids)
    if overlap:
        raise ValueError(f"train and val splits share samples, e.g. {sorted(overlap)[:3]}")

    adam = AdamState()
    best = Checkpoint.capture(graph, adam, 0, float("-inf"))
    best_iou = float("-inf")
    history: List[MetricsRecord] = []
    since_best = 0
    stopped_early = diverged = False
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        try:
            loss, tr_iou, tr_dice = _train_epoch(graph, train_split, config, adam, loss_config, epoch)
        except TrainingDiverged as exc:
            logger.warning("%s; restoring epoch %d weights", exc, best.epoch)
            diverged = True
            break
        train_secs = time.perf_counter() - t0
        history.append(MetricsRecord(epoch, "train", loss, tr_iou, tr_dice, train_secs))
        val = evaluate(graph, None, val_split, "accurate", config.batch_size, loss_config, epoch)
        history.append(val)
        if progress is not None:
            progress(history[-2], val)
        logger.info("epoch %d train loss %.4f iou %.4f | val loss %.4f iou %.4f",
                    epoch, loss, tr_iou, val.loss, val.iou)
        if val.iou > best_iou:
            best_iou = val.iou
            best = Checkpoint.capture(graph, adam, epoch, best_iou)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                stopped_early = True
                break
    best.restore(graph)
    return TrainResult(best, history, stopped_early, diverged)
