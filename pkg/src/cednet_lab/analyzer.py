"""Static parameter / MAC / fusion-time / receptive-field analysis of ArchGraphs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional

from .graph import ArchGraph, GraphError
from .tensor import conv_output_size

REPORT_VERSION = 1


class AnalysisError(ValueError):
    pass


@dataclass
class AnalysisReport:
    total_params: int
    params_by_node: dict
    flops: int
    elementwise_ops: dict
    fusion_time_ratio: Optional[float]
    first_fusion: Optional[str]
    receptive_field: dict
    input_size: tuple
    params_by_module: dict = field(default_factory=dict)
    flops_by_module: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["receptive_field"] = {k: list(v) for k, v in self.receptive_field.items()}
        d["report_version"] = REPORT_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        d = json.loads(text)
        if d.pop("report_version", REPORT_VERSION) != REPORT_VERSION:
            raise AnalysisError("unsupported report version")
        d["input_size"] = tuple(d["input_size"])
        d["receptive_field"] = {k: tuple(v) for k, v in d["receptive_field"].items()}
        return cls(**d)

    def to_csv(self) -> str:
        """One row per top-level module (stem, stage_i, head, ...)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["module", "params", "macs"])
        for mod, p in self.params_by_module.items():
            w.writerow([mod, p, self.flops_by_module.get(mod, 0)])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [
            ("input size", f"{self.input_size[0]}x{self.input_size[1]}"),
            ("params", f"{self.total_params:,} ({self.total_params / 1e6:.2f}M)"),
            ("MACs", f"{self.flops:,} ({self.flops / 1e9:.2f}G)"),
            ("first fusion", str(self.first_fusion)),
            (
                "fusion-time ratio",
                "n/a" if self.fusion_time_ratio is None else f"{self.fusion_time_ratio:.4f}",
            ),
        ]
        for k, v in self.receptive_field.items():
            rows.append((f"RF {k}", f"{v[0]}x{v[1]}"))
        width = max(len(r[0]) for r in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        lines.append("")
        lines.append(f"{'module':<12}{'params':>14}{'MACs':>18}")
        for mod, p in self.params_by_module.items():
            lines.append(f"{mod:<12}{p:>14,}{self.flops_by_module.get(mod, 0):>18,}")
        return "\n".join(lines) + "\n"


def count_params(graph: ArchGraph) -> tuple:
    """(total, {node id: params}) over parameterized nodes."""
    by_node = {n.id: n.num_params() for n in graph.nodes if n.param_shapes()}
    return sum(by_node.values()), by_node


def infer_shapes(graph: ArchGraph, input_size: tuple) -> dict:
    """node id -> (C, H, W), or (C,) after pooling."""
    h, w = input_size
    shapes = {}
    for n in graph.nodes:
        a = n.attrs
        if n.kind == "input":
            shapes[n.id] = (n.channels, h, w)
            continue
        src = shapes[n.inputs[0]]
        if n.kind == "conv2d":
            k, s, p, d = a["kernel"], a["stride"], a["padding"], a["dilation"]
            ho = conv_output_size(src[1], k, s, p, d)
            wo = conv_output_size(src[2], k, s, p, d)
            if ho <= 0 or wo <= 0:
                raise AnalysisError(f"{n.id}: non-positive output size at input {input_size}")
            shapes[n.id] = (n.channels, ho, wo)
        elif n.kind == "upsample":
            shapes[n.id] = (n.channels, src[1] * a["scale"], src[2] * a["scale"])
        elif n.kind == "pool":
            shapes[n.id] = (n.channels,)
        elif n.kind == "add":
            other = shapes[n.inputs[1]]
            if other != src:
                raise AnalysisError(f"{n.id}: add of shapes {src} and {other}")
            shapes[n.id] = src
        else:
            shapes[n.id] = (n.channels,) + tuple(src[1:])
    return shapes


def _positions(shape: tuple) -> int:
    out = 1
    for s in shape[1:]:
        out *= s
    return out


def count_flops(graph: ArchGraph, input_size: tuple, detail: bool = False):
    """Multiply-accumulate count of conv and linear nodes at ``input_size``.

    Element-wise work (norm, GELU, add, upsample, pool) is tallied per kind
    and returned separately when ``detail`` is true.
    """
    h, w = input_size
    if h % 32 or w % 32:
        raise AnalysisError(f"input size {h}x{w} must be divisible by 32")
    shapes = infer_shapes(graph, input_size)
    macs = {}
    elementwise = {"layer_norm": 0, "gelu": 0, "add": 0, "upsample": 0, "pool": 0}
    for n in graph.nodes:
        shape = shapes[n.id]
        if n.kind == "conv2d":
            a = n.attrs
            out_elems = shape[0] * _positions(shape)
            macs[n.id] = out_elems * a["kernel"] ** 2 * (a["in_channels"] // a["groups"])
        elif n.kind == "linear":
            macs[n.id] = _positions(shape) * n.attrs["in_channels"] * n.channels
        elif n.kind == "pool":
            elementwise["pool"] += _positions(shapes[n.inputs[0]]) * n.channels
        elif n.kind in elementwise:
            elementwise[n.kind] += shape[0] * _positions(shape)
    total = sum(macs.values())
    if detail:
        return total, macs, elementwise
    return total


def pre_fusion_nodes(graph: ArchGraph) -> set:
    if graph.first_fusion is None:
        raise AnalysisError("no fusion node: graph has no multi-scale merge")
    return graph.ancestors(graph.first_fusion)


def fusion_time_ratio(graph: ArchGraph) -> float:
    """Params ancestral to the first cross-scale merge / total params."""
    total, by_node = count_params(graph)
    if total == 0:
        raise AnalysisError("graph has no parameters")
    pre = pre_fusion_nodes(graph)
    pre_params = sum(p for nid, p in by_node.items() if nid in pre)
    return pre_params / total


def receptive_fields(graph: ArchGraph) -> dict:
    """node id -> (rf, jump) along the maximal-RF path, in input pixels."""
    info = {}
    for n in graph.nodes:
        if n.kind == "input":
            info[n.id] = (1, Fraction(1))
            continue
        if n.kind == "pool":
            info[n.id] = (None, None)
            continue
        ins = [info[i] for i in n.inputs]
        if any(i[0] is None for i in ins):
            info[n.id] = (None, None)
            continue
        rf, jump = max(ins, key=lambda t: t[0])
        if n.kind == "conv2d":
            a = n.attrs
            k_eff = a["dilation"] * (a["kernel"] - 1) + 1
            rf = rf + (k_eff - 1) * jump
            jump = jump * a["stride"]
        elif n.kind == "upsample":
            # bilinear taps two neighbours per axis at the source grid
            rf = rf + jump
            jump = jump / n.attrs["scale"]
        info[n.id] = (rf, jump)
    return info


def receptive_field(graph: ArchGraph, node_id: str) -> tuple:
    """Theoretical receptive field (rf_h, rf_w) of ``node_id`` in input pixels."""
    if node_id in graph.outputs:
        node_id = graph.outputs[node_id]
    if graph.input_id not in graph.ancestors(node_id, include_self=True):
        raise GraphError(f"no path from input to {node_id}")
    rf, _ = receptive_fields(graph)[node_id]
    if rf is None:
        raise AnalysisError(f"{node_id} is globally pooled; receptive field is the whole input")
    rf = int(rf) if Fraction(rf).denominator == 1 else float(rf)
    return (rf, rf)


def emit_report(graph: ArchGraph, input_size: tuple = (224, 224)) -> AnalysisReport:
    total, by_node = count_params(graph)
    flops, macs, elementwise = count_flops(graph, input_size, detail=True)
    ratio = fusion_time_ratio(graph) if graph.first_fusion is not None else None
    rfs = {}
    for name, oid in graph.outputs.items():
        try:
            rfs[name] = receptive_field(graph, oid)
        except AnalysisError:
            continue
    by_module_p, by_module_f = {}, {}
    for n in graph.nodes:
        if n.kind in ("input", "output"):
            continue
        mod = n.module
        by_module_p[mod] = by_module_p.get(mod, 0) + by_node.get(n.id, 0)
        by_module_f[mod] = by_module_f.get(mod, 0) + macs.get(n.id, 0)
    return AnalysisReport(
        total_params=total,
        params_by_node=by_node,
        flops=flops,
        elementwise_ops=elementwise,
        fusion_time_ratio=ratio,
        first_fusion=graph.first_fusion,
        receptive_field=rfs,
        input_size=tuple(input_size),
        params_by_module=by_module_p,
        flops_by_module=by_module_f,
    )
