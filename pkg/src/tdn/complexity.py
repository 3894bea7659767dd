"""Exact parameter, FLOP, and activation-memory accounting for architecture graphs.

Counting conventions:

* a conv or dense multiply-accumulate (MAC) costs 2 FLOPs; the ``macs``
  field holds the MAC count alone
* bias adds cost 1 FLOP per output element
* inference-mode batch norm (not folded) costs 2 FLOPs per element
* relu costs 1 FLOP per element
* maxpool costs k*k - 1 comparisons per output element
* global average pooling costs one add per element plus one divide per
  channel; elementwise add costs 1 FLOP per element; softmax 3 per element
* batch-norm scale and shift count as parameters, running statistics do not

Peak activation memory is the high-water mark of a last-use liveness walk
over the declared node order, single image, 4 bytes per element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .archdsl import ArchGraph, LayerSpec


@dataclass(frozen=True)
class LayerCount:
    id: str
    params: int
    flops: int


@dataclass(frozen=True)
class ComplexityReport:
    params: int
    macs: int
    flops: int
    peak_activation_bytes: int
    per_layer: tuple[LayerCount, ...]

    def to_json_dict(self) -> dict:
        return {
            "params": self.params,
            "macs": self.macs,
            "flops": self.flops,
            "peak_activation_bytes": self.peak_activation_bytes,
            "per_layer": [{"id": l.id, "params": l.params, "flops": l.flops} for l in self.per_layer],
        }


def _require_inferred(graph: ArchGraph):
    if not graph.is_shape_inferred:
        raise ValueError("graph is not shape-inferred; call infer_shapes first")


def _node_params(node: LayerSpec, cin: int) -> int:
    if node.kind == "conv":
        p = node.kernel * node.kernel * cin * node.out_channels
        if node.has_bias:
            p += node.out_channels
        if node.batch_norm:
            p += 2 * node.out_channels
        return p
    if node.kind == "dwconv":
        p = node.kernel * node.kernel * cin
        if node.has_bias:
            p += cin
        if node.batch_norm:
            p += 2 * cin
        return p
    if node.kind == "dense":
        return cin * node.units + node.units
    return 0


def _node_counts(node: LayerSpec, graph: ArchGraph) -> tuple[int, int, int]:
    """(params, macs, flops) for one node."""
    if node.kind == "input":
        return 0, 0, 0
    pred = graph.shape_of(node.predecessors[0])
    out = graph.shape_of(node.id)
    out_elems = out.elements
    params = _node_params(node, pred.channels)

    if node.kind == "conv":
        macs = node.kernel * node.kernel * pred.channels * node.out_channels * out.height * out.width
        flops = 2 * macs
        if node.has_bias:
            flops += out_elems
        if node.batch_norm:
            flops += 2 * out_elems
        if node.activation == "relu":
            flops += out_elems
        return params, macs, flops
    if node.kind == "dwconv":
        macs = node.kernel * node.kernel * pred.channels * out.height * out.width
        flops = 2 * macs
        if node.has_bias:
            flops += out_elems
        if node.batch_norm:
            flops += 2 * out_elems
        if node.activation == "relu":
            flops += out_elems
        return params, macs, flops
    if node.kind == "dense":
        macs = pred.channels * node.units
        flops = 2 * macs + node.units
        if node.activation == "relu":
            flops += node.units
        return params, macs, flops
    if node.kind == "maxpool":
        return 0, 0, (node.kernel * node.kernel - 1) * out_elems
    if node.kind == "gap":
        return 0, 0, pred.elements + pred.channels
    if node.kind == "add":
        return 0, 0, out_elems
    if node.kind == "softmax":
        return 0, 0, 3 * out_elems
    raise ValueError(f"unknown kind '{node.kind}'")  # pragma: no cover


def analyze(graph: ArchGraph) -> ComplexityReport:
    """Full complexity report for a shape-inferred graph."""
    _require_inferred(graph)
    per_layer = []
    total_p = total_m = total_f = 0
    for node in graph.nodes:
        p, m, f = _node_counts(node, graph)
        per_layer.append(LayerCount(node.id, p, f))
        total_p += p
        total_m += m
        total_f += f
    return ComplexityReport(
        params=total_p,
        macs=total_m,
        flops=total_f,
        peak_activation_bytes=peak_activation_bytes(graph),
        per_layer=tuple(per_layer),
    )


def count_params(graph: ArchGraph) -> ComplexityReport:
    return analyze(graph)


def count_flops(graph: ArchGraph) -> ComplexityReport:
    return analyze(graph)


def peak_activation_bytes(graph: ArchGraph) -> int:
    """Peak of live activation bytes over the declared schedule, single image.

    A node's output becomes live when the node runs and dies after its last
    consumer runs; outputs with no consumer stay live through their own step
    only. No rematerialization is modelled.
    """
    _require_inferred(graph)
    order = {n.id: i for i, n in enumerate(graph.nodes)}
    last_use = {n.id: order[n.id] for n in graph.nodes}
    for n in graph.nodes:
        for p in n.predecessors:
            last_use[p] = max(last_use[p], order[n.id])
    peak = 0
    for i, n in enumerate(graph.nodes):
        live = 0
        for m in graph.nodes[: i + 1]:
            if last_use[m.id] >= i:
                live += graph.shape_of(m.id).elements
        peak = max(peak, live)
    return peak * 4


def format_ratio(value: float) -> str:
    """Display rule for improvement ratios: >=10 rounds to an integer, below
    that one decimal. E.g. 56.42 -> '56x' style string (with a times sign)."""
    if value >= 10:
        return f"{int(math.floor(value + 0.5))}×"
    return f"{value:.1f}×"


@dataclass(frozen=True)
class RatioReport:
    params_ratio: Fraction
    flops_ratio: Fraction

    @property
    def params_display(self) -> str:
        return format_ratio(float(self.params_ratio))

    @property
    def flops_display(self) -> str:
        return format_ratio(float(self.flops_ratio))


def compare_reports(a: ComplexityReport, b: ComplexityReport) -> RatioReport:
    """Exact a/b ratios of parameter and FLOP counts, plus display strings."""
    if b.params == 0 or b.flops == 0:
        raise ValueError("cannot compare against a report with zero counts")
    return RatioReport(
        params_ratio=Fraction(a.params, b.params),
        flops_ratio=Fraction(a.flops, b.flops),
    )
