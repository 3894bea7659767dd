"""CPU inference engine: compiles a graph plus weights into an optimized
execution plan and benchmarks it.

Plan construction folds inference-mode batch norm into the preceding conv,
fuses conv+relu (always) and conv+add (knob-controlled), optionally packs
conv weights into channel blocks of 8, and lays activations out in a shared
arena computed from tensor liveness. The tuning knobs and their defaults
mirror a run-time accelerator library's environment variables; each knob
here is an analog with the semantics documented on :class:`RuntimeConfig`.

A deliberately unoptimized reference interpreter (direct convolution, no
folding, no fusion, fresh buffers) is kept alongside as the numerical
oracle for every optimized configuration.
"""

from __future__ import annotations

import os
import statistics
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dataclasses import replace as _dc_replace

from .archdsl import ArchGraph, TensorShape
from .train import BN_EPS, ModelParams, conv_pads

ENV_PREFIX = "TDN_"


class NumericError(RuntimeError):
    """Non-finite value produced during inference."""


@dataclass(frozen=True)
class RuntimeConfig:
    """Tuning knobs. Defaults mirror the accelerator flag table:
    cache capacity 4, blocked format off, memory pool on, tensor pool
    limit 1, aggressive conv+add fusion, 8 threads, cores 0-7.

    * primitive_cache_capacity: retained im2col/padding scratch entries per
      worker context, keyed by operation signature (0 disables reuse)
    * blocked_format: pack conv weights into channel blocks of 8
    * mempool_enable: shared liveness-planned arena instead of one private
      buffer per tensor
    * tensor_pool_limit: worker contexts (arena + scratch cache) retained
      across infer calls per plan
    * conv_add_fusion_safe: when on, fuse conv+add only if the residual
      input has no consumer other than the add
    * num_threads: batch is split across this many workers
    * cpu_affinity: core range such as "0-7", applied best-effort in bench
    """

    primitive_cache_capacity: int = 4
    blocked_format: bool = False
    mempool_enable: bool = True
    tensor_pool_limit: int = 1
    conv_add_fusion_safe: bool = False
    num_threads: int = 8
    cpu_affinity: str = "0-7"

    def __post_init__(self):
        if self.primitive_cache_capacity < 0 or self.tensor_pool_limit < 0:
            raise ValueError("capacities must be >= 0")
        if self.num_threads < 1:
            raise ValueError("num_threads must be >= 1")


_ENV_FIELDS = {
    "PRIMITIVE_CACHE_CAPACITY": ("primitive_cache_capacity", int),
    "BLOCKED_FORMAT": ("blocked_format", None),
    "MEMPOOL_ENABLE": ("mempool_enable", None),
    "TENSOR_POOL_LIMIT": ("tensor_pool_limit", int),
    "CONV_ADD_FUSION_SAFE": ("conv_add_fusion_safe", None),
    "NUM_THREADS": ("num_threads", int),
    "CPU_AFFINITY": ("cpu_affinity", str),
}


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean flag, got '{value}'")


def config_from_env(base: RuntimeConfig | None = None, environ=None) -> RuntimeConfig:
    """Overlay TDN_* environment variables onto a config."""
    cfg = base or RuntimeConfig()
    env = os.environ if environ is None else environ
    updates = {}
    for suffix, (name, conv) in _ENV_FIELDS.items():
        raw = env.get(ENV_PREFIX + suffix)
        if raw is None:
            continue
        updates[name] = parse_bool(raw) if conv is None else conv(raw)
    return _dc_replace(cfg, **updates) if updates else cfg


# --------------------------------------------------------------------------
# plan structure
# --------------------------------------------------------------------------

@dataclass
class PlanOp:
    kind: str  # conv, conv_add, dwconv, maxpool, gap, add, dense, softmax
    node_ids: tuple[str, ...]
    inputs: tuple[int, ...]  # buffer ids; -1 is the external input batch
    output: int
    in_shape: TensorShape
    out_shape: TensorShape
    kernel: int = 0
    stride: int = 1
    pads: tuple[int, int, int, int] = (0, 0, 0, 0)
    act: str = "none"
    w: np.ndarray | None = None  # conv: (k,k,cin,cout); dense: (cin,units)
    wblocks: list[np.ndarray] | None = None  # blocked conv weights, (K, 8) each
    b: np.ndarray | None = None


@dataclass
class BufferSpec:
    elems_per_image: int
    shape: tuple[int, int, int]  # per-image (h, w, c)
    offset: int = -1  # arena element offset, or -1 when privately allocated
    producer: int = -1
    last_use: int = -1


class _WorkerContext:
    """Per-worker mutable state: arena storage and the scratch cache."""

    def __init__(self, cache_capacity: int):
        self.arena = np.empty(0, np.float32)
        self.cache: OrderedDict[tuple, np.ndarray] = OrderedDict()
        self.cache_capacity = cache_capacity

    def arena_view(self, elems: int) -> np.ndarray:
        if self.arena.size < elems:
            self.arena = np.empty(elems, np.float32)
        return self.arena[:elems]

    def scratch(self, key: tuple, shape: tuple) -> np.ndarray:
        if self.cache_capacity == 0:
            return np.empty(shape, np.float32)
        hit = self.cache.get(key)
        if hit is not None and hit.shape == shape:
            self.cache.move_to_end(key)
            return hit
        buf = np.empty(shape, np.float32)
        self.cache[key] = buf
        self.cache.move_to_end(key)
        while len(self.cache) > self.cache_capacity:
            self.cache.popitem(last=False)
        return buf


@dataclass
class ExecutionPlan:
    ops: list[PlanOp]
    buffers: list[BufferSpec]
    arena_elems_per_image: int
    input_shape: TensorShape
    output_buffer: int
    output_elems: int
    logits_buffer: int  # input of a terminal softmax, else the output buffer
    cfg: RuntimeConfig
    _pool: list = field(default_factory=list, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def _checkout(self) -> _WorkerContext:
        with self._lock:
            if self._pool:
                return self._pool.pop()
        return _WorkerContext(self.cfg.primitive_cache_capacity)

    def _checkin(self, ctx: _WorkerContext):
        with self._lock:
            if len(self._pool) < self.cfg.tensor_pool_limit:
                self._pool.append(ctx)


def _fold_bn(node, t: dict) -> tuple[np.ndarray, np.ndarray | None]:
    """Absorb inference-mode batch norm into (w, b); returns float32 copies."""
    w = t["w"].astype(np.float32)
    b = t["b"].astype(np.float32) if "b" in t else None
    if node.kind in ("conv", "dwconv") and node.batch_norm:
        scale = (t["gamma"] / np.sqrt(t["running_var"] + BN_EPS)).astype(np.float32)
        w = w * scale  # broadcasts over the trailing channel axis
        base = b if b is not None else 0.0
        b = ((base - t["running_mean"]) * scale + t["beta"]).astype(np.float32)
    return w, b


def _validate_weights(graph: ArchGraph, params: ModelParams):
    for node in graph.nodes:
        if node.kind not in ("conv", "dwconv", "dense"):
            continue
        t = params.tensors.get(node.id)
        if t is None or "w" not in t:
            raise ValueError(f"missing weights for node '{node.id}'")
        cin = graph.shape_of(node.predecessors[0]).channels
        if node.kind == "conv":
            want = (node.kernel, node.kernel, cin, node.out_channels)
        elif node.kind == "dwconv":
            want = (node.kernel, node.kernel, cin)
        else:
            want = (cin, node.units)
        if t["w"].shape != want:
            raise ValueError(f"node '{node.id}': weight shape {t['w'].shape} != expected {want}")
        for key, arr in t.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"node '{node.id}': non-finite values in '{key}'")


def build_plan(graph: ArchGraph, params: ModelParams, cfg: RuntimeConfig | None = None) -> ExecutionPlan:
    """Compile graph + weights into a fused, arena-planned op sequence."""
    cfg = cfg or RuntimeConfig()
    if not graph.is_shape_inferred:
        raise ValueError("graph must be shape-inferred")
    _validate_weights(graph, params)

    consumers = graph.consumers()
    by_id = {n.id: n for n in graph.nodes}

    # conv+add fusion: the conv must feed only the add; in safe mode the
    # residual input must also have no other consumer.
    fused_conv_of: dict[str, str] = {}  # add id -> conv id
    for node in graph.nodes:
        if node.kind != "add":
            continue
        cands = [
            p
            for p in node.predecessors
            if by_id[p].kind == "conv" and consumers[p] == [node.id]
        ]
        if not cands:
            continue
        conv_id = cands[-1]  # later-declared predecessor wins
        other = next(p for p in node.predecessors if p != conv_id)
        if cfg.conv_add_fusion_safe and consumers[other] != [node.id]:
            continue
        fused_conv_of[node.id] = conv_id

    fused_convs = set(fused_conv_of.values())

    # one buffer per materialized node output
    buffers: list[BufferSpec] = []
    buf_of: dict[str, int] = {}
    for node in graph.nodes:
        if node.kind == "input" or node.id in fused_convs:
            continue
        s = graph.shape_of(node.id)
        buf_of[node.id] = len(buffers)
        buffers.append(BufferSpec(elems_per_image=s.elements, shape=(s.height, s.width, s.channels)))

    def src(node_id: str) -> int:
        return -1 if by_id[node_id].kind == "input" else buf_of[node_id]

    ops: list[PlanOp] = []
    for node in graph.nodes:
        if node.kind == "input" or node.id in fused_convs:
            continue
        t = params.tensors.get(node.id, {})
        pred_shape = graph.shape_of(node.predecessors[0]) if node.predecessors else None
        out_shape = graph.shape_of(node.id)
        if node.kind == "add" and node.id in fused_conv_of:
            conv = by_id[fused_conv_of[node.id]]
            skip = next(p for p in node.predecessors if p != conv.id)
            w, b = _fold_bn(conv, params.tensors[conv.id])
            cin_shape = graph.shape_of(conv.predecessors[0])
            pt, pb, pl, pr, _, _ = conv_pads(cin_shape, conv)
            ops.append(
                PlanOp(
                    kind="conv_add",
                    node_ids=(conv.id, node.id),
                    inputs=(src(conv.predecessors[0]), src(skip)),
                    output=buf_of[node.id],
                    in_shape=cin_shape,
                    out_shape=out_shape,
                    kernel=conv.kernel,
                    stride=conv.stride,
                    pads=(pt, pb, pl, pr),
                    act=conv.activation,
                    w=w,
                    b=b,
                )
            )
            continue
        if node.kind in ("conv", "dwconv"):
            w, b = _fold_bn(node, t)
            pt, pb, pl, pr, _, _ = conv_pads(pred_shape, node)
            ops.append(
                PlanOp(
                    kind=node.kind,
                    node_ids=(node.id,),
                    inputs=(src(node.predecessors[0]),),
                    output=buf_of[node.id],
                    in_shape=pred_shape,
                    out_shape=out_shape,
                    kernel=node.kernel,
                    stride=node.stride,
                    pads=(pt, pb, pl, pr),
                    act=node.activation,
                    w=w,
                    b=b,
                )
            )
        elif node.kind == "dense":
            ops.append(
                PlanOp(
                    kind="dense",
                    node_ids=(node.id,),
                    inputs=(src(node.predecessors[0]),),
                    output=buf_of[node.id],
                    in_shape=pred_shape,
                    out_shape=out_shape,
                    act=node.activation,
                    w=t["w"].astype(np.float32),
                    b=t["b"].astype(np.float32),
                )
            )
        else:
            ops.append(
                PlanOp(
                    kind=node.kind,
                    node_ids=(node.id,),
                    inputs=tuple(src(p) for p in node.predecessors),
                    output=buf_of[node.id],
                    in_shape=pred_shape,
                    out_shape=out_shape,
                    kernel=node.kernel,
                    stride=node.stride,
                )
            )

    # channel-blocked weight packing (conv GEMM operands only)
    if cfg.blocked_format:
        for op in ops:
            if op.kind in ("conv", "conv_add"):
                cout = op.out_shape.channels
                if cout % 8 == 0:
                    wmat = op.w.reshape(-1, cout)
                    op.wblocks = [np.ascontiguousarray(wmat[:, i : i + 8]) for i in range(0, cout, 8)]

    # liveness over plan ops
    for i, op in enumerate(ops):
        buffers[op.output].producer = i
        buffers[op.output].last_use = max(buffers[op.output].last_use, i)
        for b in op.inputs:
            if b >= 0:
                buffers[b].last_use = max(buffers[b].last_use, i)

    arena_elems = 0
    if cfg.mempool_enable:
        arena_elems = _layout_arena(ops, buffers)

    last = graph.nodes[-1]
    out_buf = buf_of[last.id]
    logits_buf = out_buf
    if last.kind == "softmax":
        logits_buf = src(last.predecessors[0])

    return ExecutionPlan(
        ops=ops,
        buffers=buffers,
        arena_elems_per_image=arena_elems,
        input_shape=graph.input_shape,
        output_buffer=out_buf,
        output_elems=graph.shape_of(last.id).elements,
        logits_buffer=logits_buf,
        cfg=cfg,
    )


def _layout_arena(ops: list[PlanOp], buffers: list[BufferSpec]) -> int:
    """First-fit offsets under last-use liveness. An op's output is placed
    while its inputs are still allocated, so kernels never alias their own
    operands."""
    allocated: list[tuple[int, int, int]] = []  # (offset, size, buffer id)
    total = 0
    for i, op in enumerate(ops):
        size = buffers[op.output].elems_per_image
        offset = 0
        for off, sz, _ in sorted(allocated):
            if off - offset >= size:
                break
            offset = max(offset, off + sz)
        buffers[op.output].offset = offset
        allocated.append((offset, size, op.output))
        total = max(total, offset + size)
        allocated = [(o, s, b) for o, s, b in allocated if buffers[b].last_use > i]
    return total


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def _pad_into(ctx, key, x, pads):
    pt, pb, pl, pr = pads
    if not (pt or pb or pl or pr):
        return x
    n, h, w, c = x.shape
    xp = ctx.scratch(key + ("pad",), (n, h + pt + pb, w + pl + pr, c))
    xp.fill(0.0)
    xp[:, pt : pt + h, pl : pl + w, :] = x
    return xp


def _run_conv(op: PlanOp, x: np.ndarray, out: np.ndarray, ctx: _WorkerContext, skip=None):
    n = x.shape[0]
    k, s = op.kernel, op.stride
    oh, ow, cout = op.out_shape.height, op.out_shape.width, op.out_shape.channels
    sig = ("conv", n, op.in_shape, k, s, op.pads)
    xp = _pad_into(ctx, sig, x, op.pads)
    cin = op.in_shape.channels
    cols = ctx.scratch(sig + ("cols",), (n * oh * ow, k * k * cin))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    cols[...] = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * cin)
    out2 = out.reshape(n * oh * ow, cout)
    if op.wblocks is not None:
        for bi, wb in enumerate(op.wblocks):
            out2[:, 8 * bi : 8 * bi + 8] = cols @ wb
    else:
        np.matmul(cols, op.w.reshape(-1, cout), out=out2)
    if op.b is not None:
        out2 += op.b
    if op.act == "relu":
        np.maximum(out2, 0, out=out2)
    if skip is not None:
        out += skip.reshape(out.shape)


def _run_dwconv(op: PlanOp, x: np.ndarray, out: np.ndarray, ctx: _WorkerContext):
    n = x.shape[0]
    k, s = op.kernel, op.stride
    oh, ow = op.out_shape.height, op.out_shape.width
    sig = ("dwconv", n, op.in_shape, k, s, op.pads)
    xp = _pad_into(ctx, sig, x, op.pads)
    out.fill(0.0)
    for i in range(k):
        for j in range(k):
            out += xp[:, i : i + s * oh : s, j : j + s * ow : s, :] * op.w[i, j]
    if op.b is not None:
        out += op.b
    if op.act == "relu":
        np.maximum(out, 0, out=out)


def _run_op(op: PlanOp, get, out: np.ndarray, ctx: _WorkerContext):
    x = get(op.inputs[0])
    if op.kind == "conv":
        _run_conv(op, x, out, ctx)
    elif op.kind == "conv_add":
        _run_conv(op, x, out, ctx, skip=get(op.inputs[1]))
    elif op.kind == "dwconv":
        _run_dwconv(op, x, out, ctx)
    elif op.kind == "maxpool":
        k, s = op.kernel, op.stride
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        np.max(win, axis=(4, 5), out=out)
    elif op.kind == "gap":
        np.mean(x, axis=(1, 2), keepdims=True, out=out)
    elif op.kind == "add":
        np.add(x, get(op.inputs[1]), out=out)
    elif op.kind == "dense":
        n = x.shape[0]
        out2 = out.reshape(n, -1)
        np.matmul(x.reshape(n, -1), op.w, out=out2)
        out2 += op.b
        if op.act == "relu":
            np.maximum(out2, 0, out=out2)
    elif op.kind == "softmax":
        z = x - x.max(-1, keepdims=True)
        np.exp(z, out=out)
        out /= out.sum(-1, keepdims=True)
    else:  # pragma: no cover
        raise ValueError(op.kind)


def _execute(plan: ExecutionPlan, x: np.ndarray, ctx: _WorkerContext,
             want_logits: bool, instrument: bool) -> np.ndarray:
    n = x.shape[0]
    bufs = plan.buffers
    if plan.cfg.mempool_enable:
        arena = ctx.arena_view(plan.arena_elems_per_image * n)

        def view(b: int) -> np.ndarray:
            spec = bufs[b]
            start = spec.offset * n
            return arena[start : start + spec.elems_per_image * n]
    else:
        private = [np.empty(spec.elems_per_image * n, np.float32) for spec in bufs]

        def view(b: int) -> np.ndarray:
            return private[b]

    shaped: dict[int, np.ndarray] = {}

    def tensor(b: int) -> np.ndarray:
        if b == -1:
            return x
        if b not in shaped:
            shaped[b] = view(b).reshape((n,) + bufs[b].shape)
        return shaped[b]

    keep = {plan.output_buffer, plan.logits_buffer if want_logits else plan.output_buffer}
    for i, op in enumerate(plan.ops):
        out = tensor(op.output)
        _run_op(op, tensor, out, ctx)
        if instrument:
            if not np.all(np.isfinite(out)):
                raise NumericError(f"non-finite values after op {i} ({op.kind} {op.node_ids})")
            for b, spec in enumerate(bufs):
                if spec.last_use == i and b not in keep:
                    view(b).fill(np.nan)

    result = tensor(plan.logits_buffer if want_logits else plan.output_buffer)
    return result.reshape(n, -1).copy()


def _check_input(plan: ExecutionPlan, batch: np.ndarray) -> np.ndarray:
    s = plan.input_shape
    if batch.ndim != 4 or batch.shape[1:] != (s.height, s.width, s.channels):
        raise ValueError(f"batch shape {batch.shape} does not match plan input {s}")
    if batch.dtype != np.float32:
        batch = batch.astype(np.float32)
    return batch


def _infer_impl(plan: ExecutionPlan, batch: np.ndarray, want_logits: bool, instrument: bool) -> np.ndarray:
    batch = _check_input(plan, batch)
    n = batch.shape[0]
    threads = min(plan.cfg.num_threads, n)
    if threads <= 1 or instrument:
        ctx = plan._checkout()
        try:
            result = _execute(plan, batch, ctx, want_logits, instrument)
        finally:
            plan._checkin(ctx)
    else:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, n, threads + 1).astype(int)
        chunks = [(bounds[i], bounds[i + 1]) for i in range(threads) if bounds[i + 1] > bounds[i]]
        if want_logits:
            lb = plan.logits_buffer
            cols = plan.input_shape.elements if lb == -1 else plan.buffers[lb].elems_per_image
        else:
            cols = plan.output_elems
        result = np.empty((n, cols), np.float32)

        def work(lo, hi):
            ctx = plan._checkout()
            try:
                result[lo:hi] = _execute(plan, batch[lo:hi], ctx, want_logits, instrument)
            finally:
                plan._checkin(ctx)

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(lambda span: work(*span), chunks))
    if not np.all(np.isfinite(result)):
        raise NumericError("non-finite values in inference output")
    return result


def infer(plan: ExecutionPlan, batch: np.ndarray, instrument: bool = False) -> np.ndarray:
    """Run the plan; returns the final node's output flattened to (batch, -1).

    For classifier graphs that is one probability row per image. With
    ``instrument`` set, execution is single-threaded, every op output is
    checked finite, and dead arena regions are poisoned with NaN to assert
    liveness safety.
    """
    return _infer_impl(plan, batch, want_logits=False, instrument=instrument)


def infer_logits(plan: ExecutionPlan, batch: np.ndarray) -> np.ndarray:
    """Like :func:`infer` but returns the input of a terminal softmax."""
    return _infer_impl(plan, batch, want_logits=True, instrument=False)


# --------------------------------------------------------------------------
# reference interpreter (numerical oracle, deliberately unoptimized)
# --------------------------------------------------------------------------

def reference_infer(graph: ArchGraph, params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Direct node-by-node inference: naive convolution, explicit batch norm
    with running statistics, no fusion, no shared buffers."""
    if not graph.is_shape_inferred:
        raise ValueError("graph must be shape-inferred")
    x = batch.astype(np.float32)
    outs: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.kind == "input":
            outs[node.id] = x
            continue
        a = outs[node.predecessors[0]]
        t = params.tensors.get(node.id, {})
        if node.kind in ("conv", "dwconv"):
            shp = graph.shape_of(node.predecessors[0])
            pt, pb, pl, pr, oh, ow = conv_pads(shp, node)
            xp = np.pad(a, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
            k, s = node.kernel, node.stride
            cout = node.out_channels if node.kind == "conv" else shp.channels
            z = np.zeros((a.shape[0], oh, ow, cout), np.float32)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, i : i + s * oh : s, j : j + s * ow : s, :]
                    if node.kind == "conv":
                        z += np.einsum("nhwc,cf->nhwf", patch, t["w"][i, j])
                    else:
                        z += patch * t["w"][i, j]
            if node.has_bias:
                z = z + t["b"]
            if node.batch_norm:
                inv = 1.0 / np.sqrt(t["running_var"] + BN_EPS)
                z = t["gamma"] * (z - t["running_mean"]) * inv + t["beta"]
            if node.activation == "relu":
                z = np.maximum(z, 0)
            outs[node.id] = z
        elif node.kind == "maxpool":
            k, s = node.kernel, node.stride
            win = sliding_window_view(a, (k, k), axis=(1, 2))[:, ::s, ::s]
            outs[node.id] = win.max((4, 5))
        elif node.kind == "gap":
            outs[node.id] = a.mean((1, 2), keepdims=True)
        elif node.kind == "add":
            outs[node.id] = a + outs[node.predecessors[1]]
        elif node.kind == "dense":
            n = a.shape[0]
            z = a.reshape(n, -1) @ t["w"] + t["b"]
            if node.activation == "relu":
                z = np.maximum(z, 0)
            outs[node.id] = z.reshape(n, 1, 1, node.units)
        elif node.kind == "softmax":
            z = a - a.max(-1, keepdims=True)
            e = np.exp(z)
            outs[node.id] = e / e.sum(-1, keepdims=True)
    return outs[graph.nodes[-1].id].reshape(batch.shape[0], -1)


# --------------------------------------------------------------------------
# benchmarking
# --------------------------------------------------------------------------

@dataclass
class BenchReport:
    batch_size: int
    warmup_iters: int
    timed_iters: int
    latencies: list[float]
    median_seconds: float
    mean_seconds: float
    std_seconds: float
    per_image_seconds: float
    throughput: float

    def to_json_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "warmup_iters": self.warmup_iters,
            "timed_iters": self.timed_iters,
            "latencies": self.latencies,
            "median_seconds": self.median_seconds,
            "mean_seconds": self.mean_seconds,
            "std_seconds": self.std_seconds,
            "per_image_seconds": self.per_image_seconds,
            "throughput": self.throughput,
        }


def apply_affinity(spec: str):
    """Pin the process to the given core range, silently skipping on failure."""
    if not spec:
        return
    try:
        cores: set[int] = set()
        for part in spec.split(","):
            if "-" in part:
                lo, hi = part.split("-", 1)
                cores.update(range(int(lo), int(hi) + 1))
            else:
                cores.add(int(part))
        available = os.sched_getaffinity(0)
        cores &= available
        if cores:
            os.sched_setaffinity(0, cores)
    except (AttributeError, ValueError, OSError):
        pass


def bench(plan: ExecutionPlan, batch_size: int, warmup: int = 2, iters: int = 10,
          seed: int = 0) -> BenchReport:
    """Median-latency benchmark on a fixed random batch."""
    if iters < 3:
        raise ValueError("iters must be >= 3")
    apply_affinity(plan.cfg.cpu_affinity)
    s = plan.input_shape
    rng = np.random.default_rng(seed)
    batch = rng.random((batch_size, s.height, s.width, s.channels), dtype=np.float32)
    for _ in range(warmup):
        infer(plan, batch)
    latencies = []
    for _ in range(iters):
        t0 = time.perf_counter()
        infer(plan, batch)
        latencies.append(time.perf_counter() - t0)
    med = statistics.median(latencies)
    return BenchReport(
        batch_size=batch_size,
        warmup_iters=warmup,
        timed_iters=iters,
        latencies=latencies,
        median_seconds=med,
        mean_seconds=statistics.fmean(latencies),
        std_seconds=statistics.pstdev(latencies),
        per_image_seconds=med / batch_size,
        throughput=batch_size / med,
    )


def speedup(a: BenchReport, b: BenchReport) -> float:
    """How many times faster b is than a: a.per_image / b.per_image."""
    if b.per_image_seconds <= 0 or a.per_image_seconds <= 0:
        raise ValueError("latencies must be positive")
    return a.per_image_seconds / b.per_image_seconds


# --------------------------------------------------------------------------
# TDNW weights file format
# --------------------------------------------------------------------------

TDNW_MAGIC = b"TDNW"
TDNW_VERSION = 1


def save_weights(path, params: ModelParams):
    """Binary format: magic 'TDNW', u32 version, u32 tensor count; per tensor
    u16 name length, name, u8 dtype (0 = f32), u8 rank, u32 dims, payload.
    Little-endian throughout. Tensor names are '<node id>.<key>'."""
    entries = []
    for nid, t in params.tensors.items():
        for key, arr in t.items():
            entries.append((f"{nid}.{key}", np.ascontiguousarray(arr, np.float32)))
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", TDNW_MAGIC, TDNW_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != TDNW_MAGIC:
        raise ValueError(f"{path}: not a TDNW weights file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != TDNW_VERSION:
        raise ValueError(f"{path}: unsupported TDNW version {version}")
    off = 12
    tensors: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        dtype, rank = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype != 0:
            raise ValueError(f"{path}: unsupported dtype {dtype} for '{name}'")
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, np.dtype("<f4"), count=size, offset=off).reshape(dims).copy()
        off += 4 * size
        nid, _, key = name.rpartition(".")
        tensors.setdefault(nid, {})[key] = arr
    return ModelParams(tensors=tensors)
