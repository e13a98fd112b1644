"""Declarative architecture specs and the nested encoder-decoder graph.

A network is a grid of convolution blocks ``X[i, j]``: ``i`` is the
resolution level (each step down halves H and W) and ``j`` the position
along the skip pathway at that level. U-Net keeps only the encoder column
(``j == 0``) and the decoder diagonal (``i + j == depth - 1``); the nested
variant fills in every node with ``i + j < depth``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .tensor import Parameter, Tensor

VARIANTS = ("unet", "wide_unet", "unetpp")
INPUT = "input"

# channel widths per level for the two baselines
UNET_WIDTHS = (32, 64, 128, 256, 512)
WIDE_UNET_WIDTHS = (35, 70, 140, 280, 560)


class NodeId(NamedTuple):
    i: int
    j: int

    def __str__(self) -> str:
        return f"X{self.i},{self.j}"


Source = Union[NodeId, str]


def default_widths(variant: str, depth: int = 5, base: Optional[int] = None) -> Tuple[int, ...]:
    """Per-level widths: ``base * 2**i``, with the baseline tables for depth 5."""
    if base is None:
        if variant == "wide_unet":
            if depth == len(WIDE_UNET_WIDTHS):
                return WIDE_UNET_WIDTHS
            base = 35
        else:
            base = 32
    return tuple(base * 2 ** i for i in range(depth))


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: str = "unetpp"
    depth: int = 5
    widths: Tuple[int, ...] = ()
    convs_per_node: int = 2
    deep_supervision: bool = True
    input_channels: int = 1
    input_size: Tuple[int, int] = (96, 96)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if not self.widths:
            object.__setattr__(self, "widths", default_widths(self.variant, self.depth))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.widths) != self.depth:
            raise ValueError(f"need {self.depth} widths, got {len(self.widths)}: {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.convs_per_node < 1:
            raise ValueError(f"convs_per_node must be >= 1, got {self.convs_per_node}")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        if len(self.input_size) != 2:
            raise ValueError(f"input_size must be (H, W), got {self.input_size}")
        check_input_size(self.input_size, self.depth)

    @classmethod
    def preset(cls, variant: str, **overrides) -> "ArchitectureSpec":
        """The full-size reference configuration for ``variant``.

        U-Net baselines carry a single output head; the nested variant is deep
        supervised unless ``deep_supervision=False`` is passed.
        """
        overrides.setdefault("deep_supervision", variant == "unetpp")
        if "widths" not in overrides:
            overrides["widths"] = default_widths(
                variant, overrides.get("depth", 5), overrides.pop("base_width", None)
            )
        overrides.pop("base_width", None)
        return cls(variant=variant, **overrides)

    @property
    def head_levels(self) -> Tuple[int, ...]:
        last = self.depth - 1
        if self.variant == "unetpp" and self.deep_supervision:
            return tuple(range(1, last + 1))
        return (last,)

    def to_text(self) -> str:
        lines = [
            f"variant = {self.variant}",
            f"depth = {self.depth}",
            "widths = " + ",".join(str(w) for w in self.widths),
            f"convs_per_node = {self.convs_per_node}",
            f"deep_supervision = {str(self.deep_supervision).lower()}",
            f"input_channels = {self.input_channels}",
            f"input_size = {self.input_size[0]}x{self.input_size[1]}",
        ]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        return cls(**parse_spec_fields(parse_key_values(text)))

    @classmethod
    def from_file(cls, path) -> "ArchitectureSpec":
        with open(path) as fh:
            return cls.from_text(fh.read())


def check_input_size(size: Sequence[int], depth: int) -> None:
    step = 2 ** (depth - 1)
    bad = [s for s in size if s < 1 or s % step]
    if bad:
        padded = tuple(-(-max(s, 1) // step) * step for s in size)
        raise ValueError(
            f"input size {tuple(size)} must be divisible by 2**(depth-1) = {step}; "
            f"pad to {padded[0]}x{padded[1]}"
        )


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_spec_fields(kv: Dict[str, str]) -> dict:
    known = {"variant", "depth", "widths", "convs_per_node", "deep_supervision",
             "input_channels", "input_size", "base_width"}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
    fields = {}
    if "variant" in kv:
        fields["variant"] = kv["variant"]
    for key in ("depth", "convs_per_node", "input_channels"):
        if key in kv:
            fields[key] = int(kv[key])
    if "widths" in kv:
        fields["widths"] = tuple(int(w) for w in kv["widths"].split(",") if w.strip())
    elif "base_width" in kv:
        fields["widths"] = default_widths(
            fields.get("variant", "unetpp"), fields.get("depth", 5), int(kv["base_width"])
        )
    if "deep_supervision" in kv:
        fields["deep_supervision"] = _parse_bool(kv["deep_supervision"])
    if "input_size" in kv:
        parts = kv["input_size"].replace("x", ",").split(",")
        fields["input_size"] = tuple(int(p) for p in parts if p.strip())
    return fields


# -- topology ----------------------------------------------------------------

def node_ids(spec: ArchitectureSpec) -> List[NodeId]:
    """All nodes of the variant in evaluation order (by j, then i)."""
    last = spec.depth - 1
    out = []
    for j in range(spec.depth):
        for i in range(spec.depth - j):
            if spec.variant == "unetpp" or j == 0 or i + j == last:
                out.append(NodeId(i, j))
    return out


def node_inputs(spec: ArchitectureSpec, node: Tuple[int, int]) -> List[Tuple[Source, str]]:
    """Ordered ``(source, transform)`` pairs concatenated at the node's input.

    Encoder nodes read the network input (level 0) or the max-pooled node
    above them. Skip-pathway nodes read the earlier nodes of their own
    pathway, in order, then the upsampled node diagonally below.
    """
    i, j = node
    if i < 0 or j < 0 or i + j > spec.depth - 1:
        raise ValueError(f"invalid node {tuple(node)} for depth {spec.depth}")
    if spec.variant != "unetpp" and not (j == 0 or i + j == spec.depth - 1):
        raise ValueError(f"node {tuple(node)} does not exist in {spec.variant}")
    if j == 0:
        return [(INPUT, "direct")] if i == 0 else [(NodeId(i - 1, 0), "maxpool2")]
    if spec.variant == "unetpp":
        lateral = [(NodeId(i, k), "direct") for k in range(j)]
    else:
        lateral = [(NodeId(i, 0), "direct")]
    return lateral + [(NodeId(i + 1, j - 1), "upsample2")]


def dependency_cone(spec: ArchitectureSpec, targets: Iterable[Tuple[int, int]]) -> List[NodeId]:
    """Every node reachable backwards from ``targets``, in evaluation order."""
    seen = set()
    stack = [NodeId(*t) for t in targets]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        for src, _ in node_inputs(spec, n):
            if src != INPUT:
                stack.append(src)
    return [n for n in node_ids(spec) if n in seen]


# -- the materialized graph ----------------------------------------------------

@dataclass
class NodeBlock:
    node: NodeId
    in_channels: int
    out_channels: int
    convs: List[Tuple[Parameter, Parameter]]  # (weight, bias) per conv -> relu


@dataclass
class ModelGraph:
    spec: ArchitectureSpec
    nodes: Dict[NodeId, NodeBlock]
    heads: Dict[int, Tuple[Parameter, Parameter]]  # keyed by j of X[0, j]
    edges: List[Tuple[Source, str, NodeId]] = field(default_factory=list)

    @property
    def order(self) -> List[NodeId]:
        return [n for n in node_ids(self.spec) if n in self.nodes]

    @property
    def parameters(self) -> Dict[str, Parameter]:
        out = {}
        for n in self.order:
            for c, (w, b) in enumerate(self.nodes[n].convs):
                out[w.name] = w
                out[b.name] = b
        for j in sorted(self.heads):
            w, b = self.heads[j]
            out[w.name] = w
            out[b.name] = b
        return out

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def in_degree(self, node: Tuple[int, int]) -> int:
        node = NodeId(*node)
        return sum(1 for _, _, dst in self.edges if dst == node)

    def astype(self, dtype) -> "ModelGraph":
        """Deep copy with parameters cast to ``dtype`` (e.g. float64 for gradcheck)."""
        def cast(p: Parameter) -> Parameter:
            return Parameter(p.data.astype(dtype), name=p.name, dtype=dtype)

        nodes = {
            n: NodeBlock(b.node, b.in_channels, b.out_channels, [(cast(w), cast(bb)) for w, bb in b.convs])
            for n, b in self.nodes.items()
        }
        heads = {j: (cast(w), cast(b)) for j, (w, b) in self.heads.items()}
        return ModelGraph(self.spec, nodes, heads, list(self.edges))


def _node_in_channels(spec: ArchitectureSpec, node: NodeId) -> int:
    total = 0
    for src, _ in node_inputs(spec, node):
        total += spec.input_channels if src == INPUT else spec.widths[src.i]
    return total


def _he_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Materialize ``spec`` with seeded He-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    nodes: Dict[NodeId, NodeBlock] = {}
    edges = []
    for n in node_ids(spec):
        for src, transform in node_inputs(spec, n):
            edges.append((src, transform, n))
        cin = _node_in_channels(spec, n)
        cout = spec.widths[n.i]
        convs = []
        for c in range(spec.convs_per_node):
            prefix = f"node.{n.i}.{n.j}.conv.{c}"
            w = Parameter(_he_uniform(rng, (cout, cin if c == 0 else cout, 3, 3), dtype), f"{prefix}.weight")
            b = Parameter(np.zeros(cout, dtype=dtype), f"{prefix}.bias")
            convs.append((w, b))
        nodes[n] = NodeBlock(n, cin, cout, convs)
    heads = {}
    for j in spec.head_levels:
        w = Parameter(_he_uniform(rng, (1, spec.widths[0], 1, 1), dtype), f"head.{j}.weight")
        b = Parameter(np.zeros(1, dtype=dtype), f"head.{j}.bias")
        heads[j] = (w, b)
    return ModelGraph(spec, nodes, heads, edges)


# -- accounting ------------------------------------------------------------------

def param_count(graph: ModelGraph) -> int:
    return int(sum(p.size for p in graph.parameters.values()))


def flop_count(graph: ModelGraph, input_size: Optional[Tuple[int, int]] = None) -> int:
    """Floating-point operations of one forward pass for a single image.

    Each k x k convolution costs ``2 * Cin * Cout * k * k * H * W`` (one
    multiply and one add per MAC); biases, activations and resampling are
    not counted.
    """
    h, w = input_size or graph.spec.input_size
    total = 0
    for n in graph.order:
        block = graph.nodes[n]
        pixels = (h >> n.i) * (w >> n.i)
        for wt, _ in block.convs:
            cout, cin, kh, kw = wt.shape
            total += 2 * cin * cout * kh * kw * pixels
    for wt, _ in graph.heads.values():
        cout, cin, kh, kw = wt.shape
        total += 2 * cin * cout * kh * kw * h * w
    return int(total)


# -- evaluation --------------------------------------------------------------------

def _run_block(block: NodeBlock, x: Tensor) -> Tensor:
    for w, b in block.convs:
        x = ops.relu(ops.conv2d(x, w, b))
    return x


def compute_nodes(graph: ModelGraph, x: Tensor, targets: Iterable[Tuple[int, int]]) -> Dict[NodeId, Tensor]:
    """Evaluate the dependency cone of ``targets`` and return every node output."""
    spec = graph.spec
    if x.ndim != 4 or x.shape[1] != spec.input_channels:
        raise ValueError(
            f"expected input (B, {spec.input_channels}, H, W), got shape {x.shape}"
        )
    check_input_size(x.shape[2:], spec.depth)
    outputs: Dict[NodeId, Tensor] = {}
    for n in dependency_cone(spec, targets):
        if n not in graph.nodes:
            raise ValueError(f"node {n} is not part of this graph")
        parts = []
        for src, transform in node_inputs(spec, n):
            t = x if src == INPUT else outputs[src]
            if transform == "maxpool2":
                t = ops.maxpool2(t)
            elif transform == "upsample2":
                t = ops.upsample2(t)
            parts.append(t)
        outputs[n] = _run_block(graph.nodes[n], ops.concat_channels(parts))
    return outputs


def forward_heads(graph: ModelGraph, x: Tensor, levels: Optional[Sequence[int]] = None) -> Dict[int, Tensor]:
    """Sigmoid probability map of each requested head (default: all heads)."""
    levels = sorted(graph.heads) if levels is None else list(levels)
    for d in levels:
        if d not in graph.heads:
            raise ValueError(f"no output head at X0,{d}; available: {sorted(graph.heads)}")
    feats = compute_nodes(graph, x, [NodeId(0, d) for d in levels])
    out = {}
    for d in levels:
        w, b = graph.heads[d]
        out[d] = ops.sigmoid(ops.conv2d(feats[NodeId(0, d)], w, b))
    return out


def parse_mode(mode) -> Tuple[str, Optional[int]]:
    """Normalize ``'accurate'``, ``'fast:3'`` or ``('fast', 3)``."""
    if isinstance(mode, tuple):
        kind, level = mode
        return kind, None if level is None else int(level)
    if mode == "accurate":
        return "accurate", None
    if isinstance(mode, str) and mode.startswith("fast"):
        _, _, level = mode.partition(":")
        if not level:
            raise ValueError("fast mode needs a level, e.g. 'fast:4'")
        return "fast", int(level)
    raise ValueError(f"unknown inference mode {mode!r}; use 'accurate' or 'fast:<d>'")


def forward(graph: ModelGraph, x: Tensor, mode="accurate") -> Tensor:
    """Probability map (B, 1, H, W).

    ``accurate`` averages the probabilities of all heads; ``fast:<d>``
    returns only the head on X[0, d] and evaluates only the nodes it needs.
    """
    kind, level = parse_mode(mode)
    if kind == "fast":
        return forward_heads(graph, x, [level])[level]
    heads = forward_heads(graph, x)
    if len(heads) == 1:
        return next(iter(heads.values()))
    return ops.stack_mean([heads[d] for d in sorted(heads)])


# -- text dump -------------------------------------------------------------------

def dump(graph: ModelGraph) -> str:
    """Deterministic listing of nodes, edges, channels and costs."""
    spec = graph.spec
    lines = [f"# {spec.variant} depth={spec.depth} widths={','.join(map(str, spec.widths))}"
             f" convs_per_node={spec.convs_per_node} heads={','.join(map(str, sorted(graph.heads)))}"]
    lines.append(f"nodes {len(graph.nodes)}")
    for n in graph.order:
        b = graph.nodes[n]
        lines.append(f"node {n} in={b.in_channels} out={b.out_channels} convs={len(b.convs)}")
    lines.append(f"edges {len(graph.edges)}")
    for src, transform, dst in graph.edges:
        lines.append(f"edge {src} -> {dst} {transform}")
    for j in sorted(graph.heads):
        lines.append(f"head X0,{j} 1x1 conv {spec.widths[0]}->1 sigmoid")
    lines.append(f"param_count {param_count(graph)}")
    lines.append(f"flop_count {flop_count(graph)}")
    return "\n".join(lines) + "\n"
