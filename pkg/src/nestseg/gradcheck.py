"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .tensor import Parameter, Tape, Tensor


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    n_coords: int
    worst: Optional[Tuple[int, Tuple[int, ...]]] = None  # (argument index, coordinate)
    message: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at arg {self.worst[0]} coord {self.worst[1]}" if self.worst else ""
        extra = f" ({self.message})" if self.message else ""
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}{where}{extra}"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradcheck(
    f: Callable[..., Tensor],
    point: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``point`` is one tensor or a sequence of tensors passed positionally to
    ``f``; every coordinate of every argument is perturbed. Arguments are
    promoted to float64 first. The per-coordinate error is
    ``|a - n| / max(|a|, |n|, floor)``, so gradients much smaller than
    ``floor`` are compared absolutely.
    """
    with np.errstate(all="ignore"):
        return _gradcheck(f, point, eps, tol, floor)


def _gradcheck(f, point, eps, tol, floor) -> GradcheckReport:
    single = isinstance(point, Tensor)
    args = [point] if single else list(point)
    args64 = []
    for i, a in enumerate(args):
        data = np.array(a.data, dtype=np.float64)
        if isinstance(a, Parameter):
            args64.append(Parameter(data, name=a.name or f"arg{i}", dtype=np.float64))
        else:
            args64.append(Tensor(data, requires_grad=True, dtype=np.float64))

    with Tape() as tape:
        out = f(*args64)
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    analytic = tape.backward(out, wrt=args64)

    for ai, a in enumerate(args64):
        ana = np.asarray(analytic[ai], dtype=np.float64)
        if not np.all(np.isfinite(ana)):
            bad = np.unravel_index(int(np.flatnonzero(~np.isfinite(ana))[0]), a.shape)
            return GradcheckReport(float("inf"), False, tol, 0, (ai, tuple(int(c) for c in bad)),
                                   message="non-finite analytic gradient")

    n_coords = 0
    worst_err, worst = 0.0, None
    for ai, a in enumerate(args64):
        flat = a.data.reshape(-1)
        ana = np.asarray(analytic[ai], dtype=np.float64).reshape(-1)
        numeric = np.empty_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = float(f(*args64).data)
            flat[idx] = orig - eps
            fm = float(f(*args64).data)
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                coord = np.unravel_index(idx, a.shape)
                return GradcheckReport(
                    float("inf"), False, tol, n_coords + idx + 1, (ai, tuple(int(c) for c in coord)),
                    message="non-finite function value",
                )
            numeric[idx] = (fp - fm) / (2 * eps)
        err = _relative_error(ana, numeric, floor)
        n_coords += flat.size
        k = int(err.argmax())
        if err[k] > worst_err or worst is None:
            worst_err = float(err[k])
            worst = (ai, tuple(int(c) for c in np.unravel_index(k, a.shape)))
    return GradcheckReport(worst_err, worst_err <= tol, tol, n_coords, worst)


# -- the standard battery ------------------------------------------------------

def _case_conv2d(rng):
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    r = rng.standard_normal((2, 4, 8, 8))
    return (lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b), r))), [x, w, b]


def _case_conv2d_relu(rng, eps=1e-4):
    # redraw until no pre-activation sits within one perturbation of the relu kink
    while True:
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3)
        b = Tensor(rng.standard_normal(4))
        z = ops.conv2d(x, w, b).data
        margin = 2 * eps * 27 * max(np.abs(x.data).max(), np.abs(w.data).max(), 1.0)
        if np.abs(z).min() > margin:
            return (lambda x, w, b: ops.sum(ops.relu(ops.conv2d(x, w, b)))), [x, w, b]


def _case_conv1x1(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    w = Tensor(rng.standard_normal((1, 3, 1, 1)))
    b = Tensor(rng.standard_normal(1))
    return (lambda x, w, b: ops.sum(ops.sigmoid(ops.conv2d(x, w, b)))), [x, w, b]


def _case_maxpool2(rng):
    x = Tensor(rng.standard_normal((2, 2, 6, 6)))
    r = rng.standard_normal((2, 2, 3, 3))
    return (lambda x: ops.sum(ops.mul(ops.maxpool2(x), r))), [x]


def _case_upsample2(rng):
    x = Tensor(rng.standard_normal((2, 2, 3, 3)))
    r = rng.standard_normal((2, 2, 6, 6))
    return (lambda x: ops.sum(ops.mul(ops.upsample2(x), r))), [x]


def _case_concat(rng):
    a = Tensor(rng.standard_normal((2, 2, 4, 4)))
    b = Tensor(rng.standard_normal((2, 3, 4, 4)))
    r = rng.standard_normal((2, 5, 4, 4))
    return (lambda a, b: ops.sum(ops.mul(ops.concat_channels([a, b]), r))), [a, b]


def _case_relu(rng):
    x = rng.standard_normal((3, 4, 5))
    x = Tensor(np.where(np.abs(x) < 1e-2, 0.5, x))
    r = rng.standard_normal((3, 4, 5))
    return (lambda x: ops.sum(ops.mul(ops.relu(x), r))), [x]


def _case_sigmoid(rng):
    x = Tensor(rng.standard_normal((3, 4, 5)) * 3)
    r = rng.standard_normal((3, 4, 5))
    return (lambda x: ops.sum(ops.mul(ops.sigmoid(x), r))), [x]


def _random_pair(rng, shape):
    pred = Tensor(rng.uniform(0.05, 0.95, size=shape))
    target = (rng.random(shape) < 0.4).astype(np.float64)
    target.reshape(shape[0], -1)[:, 0] = 1.0  # at least one foreground pixel per image
    return pred, target


def _case_bce_dice(rng):
    from .losses import bce_dice_loss
    pred, target = _random_pair(rng, (1, 1, 8, 8))
    return (lambda p: bce_dice_loss(p, target)), [pred]


def _case_deep_supervision(rng):
    from .losses import deep_supervision_loss
    heads, target = [], None
    for _ in range(4):
        p, t = _random_pair(rng, (2, 1, 8, 8))
        heads.append(p)
        target = t if target is None else target
    return (lambda *hs: deep_supervision_loss(hs, target)), heads


def _case_network(rng):
    from .graph import ArchitectureSpec, build, forward_heads
    from .losses import deep_supervision_loss
    spec = ArchitectureSpec("unetpp", depth=3, widths=(2, 3, 4), input_size=(8, 8))
    seed = int(rng.integers(2 ** 31))
    graph = build(spec, seed=seed, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 1, 8, 8)))
    _, target = _random_pair(rng, (1, 1, 8, 8))

    def f(x):
        heads = forward_heads(graph, x)
        return deep_supervision_loss([heads[d] for d in sorted(heads)], target)

    return f, [x]


CASES = {
    "conv2d": _case_conv2d,
    "conv2d_relu": _case_conv2d_relu,
    "conv2d_1x1": _case_conv1x1,
    "maxpool2": _case_maxpool2,
    "upsample2": _case_upsample2,
    "concat_channels": _case_concat,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "bce_dice_loss": _case_bce_dice,
    "deep_supervision_loss": _case_deep_supervision,
    "network_loss": _case_network,
}


def run_battery(ops_filter: Optional[Sequence[str]] = None, instances: int = 10, seed: int = 0,
                eps: float = 1e-4, tol: float = 1e-4) -> Dict[str, GradcheckReport]:
    """Gradcheck each named case on ``instances`` seeded random inputs.

    The report kept per case is the worst instance.
    """
    names = list(CASES) if not ops_filter else list(ops_filter)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ValueError(f"unknown gradcheck case(s) {unknown}; choose from {sorted(CASES)}")
    results = {}
    for name in names:
        worst = None
        for k in range(instances):
            rng = np.random.default_rng([seed, k, zlib.crc32(name.encode())])
            f, args = CASES[name](rng)
            rep = gradcheck(f, args, eps=eps, tol=tol)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        results[name] = worst
    return results
