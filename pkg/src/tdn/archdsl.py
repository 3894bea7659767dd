"""Line-oriented architecture DSL: parse, validate, shape-infer, serialize.

One node per line, ``#`` starts a comment. Grammar::

    input H W C
    conv ID k=K s=S f=F pad=same|valid bn=0|1 act=none|relu [from=ID]
    dwconv ID k=K s=S pad=same|valid bn=0|1 act=none|relu [from=ID]
    maxpool ID k=K s=S [from=ID]
    gap ID [from=ID]
    add ID from=ID,ID
    dense ID units=U act=none|relu [from=ID]
    softmax ID [from=ID]

An omitted ``from=`` means "the node on the previous line". The input node
is implicitly named ``input``. Attribute defaults: ``s=1``, ``pad=same``,
``bn=0``, ``act=relu`` for conv/dwconv and ``act=none`` for dense. A conv
carries a bias exactly when it has no batch norm. Files use the ``.tdn``
extension.

Shape conventions: ``same`` padding gives ``ceil(in / stride)`` per spatial
dim, ``valid`` gives ``floor((in - k) / stride) + 1``; maxpool always uses
valid padding. ``gap`` produces 1x1xC; ``dense`` requires a 1x1xC input.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

INPUT_ID = "input"

CONV_KERNELS = (1, 3, 5, 7)
CONV_STRIDES = (1, 2)

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class DslError(ValueError):
    """Parse or structural validation failure; carries source position."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f"line {line}"
            if col is not None:
                where += f", col {col}"
            where += ": "
        super().__init__(where + message)


class ShapeError(ValueError):
    """Shape inference failure, tagged with the offending node id."""

    def __init__(self, message: str, node_id: str):
        self.node_id = node_id
        super().__init__(f"node '{node_id}': {message}")


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ValueError(f"tensor dimensions must be >= 1, got {self}")

    @property
    def elements(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class LayerSpec:
    """One node of an architecture graph.

    ``kind`` is one of input/conv/dwconv/maxpool/gap/add/dense/softmax;
    only the attributes meaningful for that kind are read, the rest keep
    their defaults.
    """

    id: str
    kind: str
    predecessors: tuple[str, ...] = ()
    shape: TensorShape | None = None  # input only
    out_channels: int = 0  # conv only
    kernel: int = 0
    stride: int = 1
    padding: str = "same"
    batch_norm: bool = False
    has_bias: bool = True
    activation: str = "none"
    units: int = 0  # dense only


@dataclass
class ArchGraph:
    nodes: list[LayerSpec]
    input_shape: TensorShape
    resolved_shapes: dict[str, TensorShape] = field(default_factory=dict)

    @property
    def is_shape_inferred(self) -> bool:
        return len(self.resolved_shapes) == len(self.nodes)

    @property
    def output(self) -> LayerSpec:
        return self.nodes[-1]

    def node(self, node_id: str) -> LayerSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for p in n.predecessors:
                out[p].append(n.id)
        return out

    def shape_of(self, node_id: str) -> TensorShape:
        return self.resolved_shapes[node_id]


def structurally_equal(a: ArchGraph, b: ArchGraph) -> bool:
    """Node-by-node equality ignoring resolved shapes."""
    return a.nodes == b.nodes and a.input_shape == b.input_shape


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

# attribute name -> parser; per-kind allowed/required sets below
_ATTR_ALLOWED = {
    "conv": ("k", "s", "f", "pad", "bn", "act", "from"),
    "dwconv": ("k", "s", "pad", "bn", "act", "from"),
    "maxpool": ("k", "s", "from"),
    "gap": ("from",),
    "add": ("from",),
    "dense": ("units", "act", "from"),
    "softmax": ("from",),
}
_ATTR_REQUIRED = {
    "conv": ("k", "f"),
    "dwconv": ("k",),
    "maxpool": ("k",),
    "add": ("from",),
    "dense": ("units",),
    "gap": (),
    "softmax": (),
}


def _parse_int(value: str, name: str, line: int, col: int, minimum: int = 1) -> int:
    try:
        v = int(value)
    except ValueError:
        raise DslError(f"attribute '{name}' expects an integer, got '{value}'", line, col)
    if v < minimum:
        raise DslError(f"attribute '{name}' must be >= {minimum}, got {v}", line, col)
    return v


def _parse_enum(value: str, name: str, options: tuple[str, ...], line: int, col: int) -> str:
    if value not in options:
        raise DslError(f"attribute '{name}' must be one of {'/'.join(options)}, got '{value}'", line, col)
    return value


def _parse_flag(value: str, name: str, line: int, col: int) -> bool:
    if value not in ("0", "1"):
        raise DslError(f"attribute '{name}' must be 0 or 1, got '{value}'", line, col)
    return value == "1"


def parse_arch(text: str) -> ArchGraph:
    """Parse DSL source into a structurally validated (not shape-inferred) graph.

    Raises :class:`DslError` with a line (and usually column) on any
    malformed input; never raises anything else, for any string.
    """
    nodes: list[LayerSpec] = []
    lines_of: dict[str, int] = {}
    seen: dict[str, LayerSpec] = {}
    prev_id: str | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        tokens = [(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", line)]
        if not tokens:
            continue
        kind, kcol = tokens[0]

        if kind == "input":
            if any(n.kind == "input" for n in nodes):
                raise DslError("multiple input nodes", lineno, kcol)
            if len(tokens) != 4:
                raise DslError("input expects exactly 3 dimensions: input H W C", lineno, kcol)
            h = _parse_int(tokens[1][0], "H", lineno, tokens[1][1])
            w = _parse_int(tokens[2][0], "W", lineno, tokens[2][1])
            c = _parse_int(tokens[3][0], "C", lineno, tokens[3][1])
            node = LayerSpec(id=INPUT_ID, kind="input", shape=TensorShape(h, w, c))
            if node.id in seen:
                raise DslError(f"duplicate id '{node.id}'", lineno, kcol)
            nodes.append(node)
            seen[node.id] = node
            lines_of[node.id] = lineno
            prev_id = node.id
            continue

        if kind not in _ATTR_ALLOWED:
            raise DslError(f"unknown layer kind '{kind}'", lineno, kcol)
        if len(tokens) < 2:
            raise DslError(f"'{kind}' needs an id", lineno, kcol)
        node_id, idcol = tokens[1]
        if not _IDENT_RE.match(node_id):
            raise DslError(f"invalid identifier '{node_id}'", lineno, idcol)
        if node_id in seen:
            raise DslError(f"duplicate id '{node_id}'", lineno, idcol)

        attrs: dict[str, tuple[str, int]] = {}
        for tok, col in tokens[2:]:
            if "=" not in tok:
                raise DslError(f"expected attribute of the form name=value, got '{tok}'", lineno, col)
            name, value = tok.split("=", 1)
            if name not in _ATTR_ALLOWED[kind]:
                raise DslError(f"'{kind}' does not take attribute '{name}'", lineno, col)
            if name in attrs:
                raise DslError(f"duplicate attribute '{name}'", lineno, col)
            if value == "":
                raise DslError(f"attribute '{name}' has an empty value", lineno, col)
            attrs[name] = (value, col)
        for req in _ATTR_REQUIRED[kind]:
            if req not in attrs:
                raise DslError(f"'{kind}' requires attribute '{req}'", lineno, kcol)

        # predecessors
        if "from" in attrs:
            value, col = attrs["from"]
            preds = tuple(value.split(","))
            for p in preds:
                if not _IDENT_RE.match(p):
                    raise DslError(f"invalid predecessor id '{p}'", lineno, col)
                if p not in seen:
                    raise DslError(f"reference to undeclared id '{p}'", lineno, col)
        else:
            if prev_id is None:
                raise DslError(f"'{kind}' has no previous node to connect to; specify from=", lineno, kcol)
            preds = (prev_id,)
            col = kcol
        if kind == "add":
            if len(preds) != 2:
                raise DslError(f"add requires exactly two predecessors, got {len(preds)}", lineno, col)
        elif len(preds) != 1:
            raise DslError(f"'{kind}' takes exactly one predecessor, got {len(preds)}", lineno, col)
        for p in preds:
            if seen[p].kind == "softmax":
                raise DslError(f"softmax node '{p}' is terminal and cannot feed '{node_id}'", lineno, col)

        def geti(name: str, default: int | None = None, minimum: int = 1) -> int:
            if name not in attrs:
                assert default is not None
                return default
            v, c = attrs[name]
            return _parse_int(v, name, lineno, c, minimum)

        def gete(name: str, options: tuple[str, ...], default: str) -> str:
            if name not in attrs:
                return default
            v, c = attrs[name]
            return _parse_enum(v, name, options, lineno, c)

        def getf(name: str, default: bool) -> bool:
            if name not in attrs:
                return default
            v, c = attrs[name]
            return _parse_flag(v, name, lineno, c)

        if kind in ("conv", "dwconv"):
            k = geti("k")
            s = geti("s", 1)
            if k not in CONV_KERNELS:
                raise DslError(f"conv kernel must be one of {CONV_KERNELS}, got {k}", lineno, attrs["k"][1])
            if s not in CONV_STRIDES:
                raise DslError(f"conv stride must be one of {CONV_STRIDES}, got {s}", lineno, attrs["s"][1])
            bn = getf("bn", False)
            node = LayerSpec(
                id=node_id,
                kind=kind,
                predecessors=preds,
                out_channels=geti("f") if kind == "conv" else 0,
                kernel=k,
                stride=s,
                padding=gete("pad", ("same", "valid"), "same"),
                batch_norm=bn,
                has_bias=not bn,
                activation=gete("act", ("none", "relu"), "relu"),
            )
        elif kind == "maxpool":
            node = LayerSpec(
                id=node_id,
                kind=kind,
                predecessors=preds,
                kernel=geti("k"),
                stride=geti("s", 1),
                padding="valid",
                has_bias=False,
            )
        elif kind == "dense":
            node = LayerSpec(
                id=node_id,
                kind=kind,
                predecessors=preds,
                units=geti("units"),
                activation=gete("act", ("none", "relu"), "none"),
            )
        else:  # gap, add, softmax
            node = LayerSpec(id=node_id, kind=kind, predecessors=preds, has_bias=False)

        nodes.append(node)
        seen[node_id] = node
        lines_of[node_id] = lineno
        prev_id = node_id

    if not any(n.kind == "input" for n in nodes):
        raise DslError("missing input node", len(text.splitlines()) or 1)
    return make_graph(nodes)


def make_graph(nodes: list[LayerSpec]) -> ArchGraph:
    """Structurally validate a node list built in code and wrap it in a graph."""
    inputs = [n for n in nodes if n.kind == "input"]
    if len(inputs) != 1:
        raise DslError(f"graph must have exactly one input node, found {len(inputs)}")
    seen: set[str] = set()
    for i, n in enumerate(nodes):
        if n.id in seen:
            raise DslError(f"duplicate id '{n.id}' (node {i})")
        if n.kind == "input":
            if n.predecessors:
                raise DslError("input node takes no predecessors")
            if n.shape is None:
                raise DslError("input node needs a shape")
        else:
            want = 2 if n.kind == "add" else 1
            if len(n.predecessors) != want:
                raise DslError(f"'{n.id}' ({n.kind}) needs {want} predecessor(s), has {len(n.predecessors)}")
            for p in n.predecessors:
                if p not in seen:
                    raise DslError(f"'{n.id}' references undeclared id '{p}'")
        seen.add(n.id)
    by_id = {n.id: n for n in nodes}
    for n in nodes:
        for p in n.predecessors:
            if by_id[p].kind == "softmax":
                raise DslError(f"softmax node '{p}' is terminal and cannot feed '{n.id}'")
    return ArchGraph(nodes=list(nodes), input_shape=inputs[0].shape)


# --------------------------------------------------------------------------
# Shape inference
# --------------------------------------------------------------------------

def _conv_spatial(h: int, w: int, k: int, s: int, padding: str, node_id: str) -> tuple[int, int]:
    if padding == "same":
        return math.ceil(h / s), math.ceil(w / s)
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"valid padding with k={k} s={s} on {h}x{w} yields non-positive output", node_id)
    return oh, ow


def infer_shapes(graph: ArchGraph) -> ArchGraph:
    """Return a copy of the graph with every node's output shape resolved."""
    shapes: dict[str, TensorShape] = {}
    for n in graph.nodes:
        if n.kind == "input":
            shapes[n.id] = n.shape
            continue
        pred = shapes[n.predecessors[0]]
        if n.kind == "conv":
            oh, ow = _conv_spatial(pred.height, pred.width, n.kernel, n.stride, n.padding, n.id)
            shapes[n.id] = TensorShape(oh, ow, n.out_channels)
        elif n.kind == "dwconv":
            oh, ow = _conv_spatial(pred.height, pred.width, n.kernel, n.stride, n.padding, n.id)
            shapes[n.id] = TensorShape(oh, ow, pred.channels)
        elif n.kind == "maxpool":
            oh, ow = _conv_spatial(pred.height, pred.width, n.kernel, n.stride, "valid", n.id)
            shapes[n.id] = TensorShape(oh, ow, pred.channels)
        elif n.kind == "gap":
            shapes[n.id] = TensorShape(1, 1, pred.channels)
        elif n.kind == "add":
            other = shapes[n.predecessors[1]]
            if pred != other:
                raise ShapeError(f"add operands disagree: {pred} vs {other}", n.id)
            shapes[n.id] = pred
        elif n.kind == "dense":
            if pred.height != 1 or pred.width != 1:
                raise ShapeError(f"dense applied to spatial tensor {pred}; insert gap first", n.id)
            shapes[n.id] = TensorShape(1, 1, n.units)
        elif n.kind == "softmax":
            shapes[n.id] = pred
        else:  # pragma: no cover - kinds are closed
            raise ShapeError(f"unknown kind '{n.kind}'", n.id)
    return replace(graph, resolved_shapes=shapes)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _fmt(node: LayerSpec) -> str:
    if node.kind == "input":
        s = node.shape
        return f"input {s.height} {s.width} {s.channels}"
    frm = ",".join(node.predecessors)
    if node.kind == "conv":
        return (
            f"conv {node.id} k={node.kernel} s={node.stride} f={node.out_channels} "
            f"pad={node.padding} bn={int(node.batch_norm)} act={node.activation} from={frm}"
        )
    if node.kind == "dwconv":
        return (
            f"dwconv {node.id} k={node.kernel} s={node.stride} "
            f"pad={node.padding} bn={int(node.batch_norm)} act={node.activation} from={frm}"
        )
    if node.kind == "maxpool":
        return f"maxpool {node.id} k={node.kernel} s={node.stride} from={frm}"
    if node.kind == "dense":
        return f"dense {node.id} units={node.units} act={node.activation} from={frm}"
    return f"{node.kind} {node.id} from={frm}"


def serialize_arch(graph: ArchGraph) -> str:
    """Render a graph in canonical form: every attribute explicit, fixed order.

    ``parse_arch(serialize_arch(g))`` is node-by-node identical to ``g``.
    """
    return "\n".join(_fmt(n) for n in graph.nodes) + "\n"
