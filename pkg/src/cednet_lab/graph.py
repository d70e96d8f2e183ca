"""CEDNet and ConvNeXt(+FPN) as typed layer DAGs.

Graphs are built once from an :class:`ArchConfig` and then treated as
immutable; the analyzer and the executor both walk the same node list.
Node ids are dotted scope paths (``stage2.enc.s32.block1.dw``) so the
first path component names the top-level module.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional, Sequence

SCHEMA_VERSION = 1
STYLES = ("hourglass", "unet", "fpn")
MODES = ("dense", "classification")
NODE_KINDS = (
    "input",
    "conv2d",
    "layer_norm",
    "gelu",
    "linear",
    "add",
    "upsample",
    "pool",
    "output",
)


class ConfigParseError(ValueError):
    """Malformed configuration text; ``field`` names the offending entry."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        loc = []
        if field is not None:
            loc.append(f"field {field}")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.field = field
        self.line = line


class GraphError(ValueError):
    """Construction-time inconsistency (channel or shape mismatch)."""


# --------------------------------------------------------------------- config


@dataclass(frozen=True)
class ArchConfig:
    """CEDNet hyperparameters.

    ``channels`` is (c0, c1, c2, c3): stem width at stride 4 and the widths
    at strides 8/16/32.  ``blocks`` is (n0, n1, n2, n3) likewise.
    ``per_stage_override`` replaces (n1, n2, n3) stage by stage.
    """

    channels: tuple = (96, 192, 352, 512)
    blocks: tuple = (3, 2, 4, 2)
    stages: int = 3
    style: str = "fpn"
    dilation: int = 3
    mlp_ratio: int = 4
    per_stage_override: Optional[tuple] = None
    lr_block: bool = True
    num_classes: int = 1000
    mode: str = "dense"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.per_stage_override is not None:
            object.__setattr__(
                self,
                "per_stage_override",
                tuple(tuple(int(n) for n in t) for t in self.per_stage_override),
            )
        self.validate()

    def validate(self) -> None:
        if len(self.channels) != 4:
            raise ConfigParseError("C must have 4 entries", field="C")
        if len(self.blocks) != 4:
            raise ConfigParseError("B must have 4 entries", field="B")
        if any(c < 1 for c in self.channels):
            raise ConfigParseError("C entries must be >= 1", field="C")
        if any(b < 1 for b in self.blocks):
            raise ConfigParseError("B entries must be >= 1", field="B")
        if self.stages < 1:
            raise ConfigParseError("m must be >= 1", field="m")
        if self.style not in STYLES:
            raise ConfigParseError(f"style must be one of {STYLES}", field="style")
        if self.dilation < 1:
            raise ConfigParseError("r must be >= 1", field="r")
        if self.mlp_ratio < 1:
            raise ConfigParseError("mlp_ratio must be a positive int", field="mlp_ratio")
        if self.mode not in MODES:
            raise ConfigParseError(f"mode must be one of {MODES}", field="mode")
        if self.num_classes < 1:
            raise ConfigParseError("num_classes must be >= 1", field="num_classes")
        if self.per_stage_override is not None:
            if len(self.per_stage_override) != self.stages:
                raise ConfigParseError(
                    f"per_stage_override has {len(self.per_stage_override)} entries, m={self.stages}",
                    field="per_stage_override",
                )
            for t in self.per_stage_override:
                if len(t) != 3 or any(n < 1 for n in t):
                    raise ConfigParseError(
                        "per_stage_override entries must be 3 positive ints",
                        field="per_stage_override",
                    )

    def stage_blocks(self, i: int) -> tuple:
        """(n1, n2, n3) for 0-based stage ``i``."""
        if self.per_stage_override is not None:
            return self.per_stage_override[i]
        return self.blocks[1:]

    def replace(self, **changes) -> "ArchConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return ArchConfig(**kw)


CEDNET_T = ArchConfig(channels=(96, 192, 352, 512), blocks=(3, 2, 4, 2), stages=3)
CEDNET_S = ArchConfig(channels=(96, 192, 352, 512), blocks=(3, 2, 7, 2), stages=4)
CEDNET_B = ArchConfig(channels=(128, 256, 448, 704), blocks=(3, 2, 7, 2), stages=4)
VARIANTS = {"T": CEDNET_T, "S": CEDNET_S, "B": CEDNET_B}


@dataclass(frozen=True)
class ConvNeXtConfig:
    depths: tuple = (3, 3, 9, 3)
    dims: tuple = (96, 192, 384, 768)
    mode: str = "classification"  # classification | fpn | backbone
    num_classes: int = 1000
    fpn_channels: int = 256
    fpn_extra_levels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.depths) != 4:
            raise ConfigParseError("depths must have 4 entries", field="depths")
        if len(self.dims) != 4:
            raise ConfigParseError("dims must have 4 entries", field="dims")
        if self.mode not in ("classification", "fpn", "backbone"):
            raise ConfigParseError("mode must be classification, fpn or backbone", field="mode")


CONVNEXT_T = ConvNeXtConfig(depths=(3, 3, 9, 3))
CONVNEXT_S = ConvNeXtConfig(depths=(3, 3, 27, 3))
CONVNEXT_S_FPN = ConvNeXtConfig(depths=(3, 3, 27, 3), mode="fpn")


_CED_KEYS = {
    "schema_version",
    "arch",
    "C",
    "B",
    "m",
    "style",
    "r",
    "mlp_ratio",
    "per_stage_override",
    "lr_block",
    "num_classes",
    "mode",
}
_CNX_KEYS = {
    "schema_version",
    "arch",
    "depths",
    "dims",
    "mode",
    "num_classes",
    "fpn_channels",
    "fpn_extra_levels",
}


def config_to_dict(config) -> dict:
    if isinstance(config, ConvNeXtConfig):
        return {
            "schema_version": SCHEMA_VERSION,
            "arch": "convnext",
            "depths": list(config.depths),
            "dims": list(config.dims),
            "mode": config.mode,
            "num_classes": config.num_classes,
            "fpn_channels": config.fpn_channels,
            "fpn_extra_levels": config.fpn_extra_levels,
        }
    d = {
        "schema_version": SCHEMA_VERSION,
        "arch": "cednet",
        "C": list(config.channels),
        "B": list(config.blocks),
        "m": config.stages,
        "style": config.style,
        "r": config.dilation,
        "mlp_ratio": config.mlp_ratio,
        "lr_block": config.lr_block,
        "num_classes": config.num_classes,
        "mode": config.mode,
    }
    if config.per_stage_override is not None:
        d["per_stage_override"] = [list(t) for t in config.per_stage_override]
    return d


def serialize_config(config) -> str:
    return json.dumps(config_to_dict(config), indent=2) + "\n"


def _key_line(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _int_list(d: dict, key: str, text: str, n: Optional[int] = None) -> tuple:
    val = d[key]
    line = _key_line(text, key)
    if not isinstance(val, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in val):
        raise ConfigParseError(f"{key} must be a list of ints", field=key, line=line)
    if n is not None and len(val) != n:
        raise ConfigParseError(f"{key} must have {n} entries", field=key, line=line)
    return tuple(val)


def config_from_dict(d: dict, text: str = ""):
    if not isinstance(d, dict):
        raise ConfigParseError("config must be a JSON object")
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigParseError(
            f"unsupported schema_version {version!r}", field="schema_version",
            line=_key_line(text, "schema_version"),
        )
    arch = d.get("arch", "cednet")
    if arch == "convnext":
        unknown = set(d) - _CNX_KEYS
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigParseError(f"unknown field {key!r}", field=key, line=_key_line(text, key))
        kw = {}
        for key in ("depths", "dims"):
            if key in d:
                kw[key] = _int_list(d, key, text, 4)
        for key in ("mode", "num_classes", "fpn_channels", "fpn_extra_levels"):
            if key in d:
                kw[key] = d[key]
        return ConvNeXtConfig(**kw)
    if arch != "cednet":
        raise ConfigParseError(f"unknown arch {arch!r}", field="arch", line=_key_line(text, "arch"))

    unknown = set(d) - _CED_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigParseError(f"unknown field {key!r}", field=key, line=_key_line(text, key))
    for key in ("C", "B", "m"):
        if key not in d:
            raise ConfigParseError(f"missing required field {key}", field=key)
    kw = {
        "channels": _int_list(d, "C", text, 4),
        "blocks": _int_list(d, "B", text, 4),
    }
    scalar_fields = {
        "m": ("stages", int),
        "style": ("style", str),
        "r": ("dilation", int),
        "mlp_ratio": ("mlp_ratio", int),
        "lr_block": ("lr_block", bool),
        "num_classes": ("num_classes", int),
        "mode": ("mode", str),
    }
    for key, (name, typ) in scalar_fields.items():
        if key not in d:
            continue
        val = d[key]
        ok = isinstance(val, typ) and (typ is bool or not isinstance(val, bool))
        if not ok:
            raise ConfigParseError(
                f"{key} must be of type {typ.__name__}", field=key, line=_key_line(text, key)
            )
        kw[name] = val
    if d.get("per_stage_override") is not None:
        pso = d["per_stage_override"]
        line = _key_line(text, "per_stage_override")
        if not isinstance(pso, list) or not all(isinstance(t, list) for t in pso):
            raise ConfigParseError(
                "per_stage_override must be a list of [n1, n2, n3] lists",
                field="per_stage_override", line=line,
            )
        kw["per_stage_override"] = tuple(tuple(t) for t in pso)
    try:
        return ArchConfig(**kw)
    except ConfigParseError as e:
        if e.line is None and e.field is not None:
            key = e.field
            raise ConfigParseError(str(e).rsplit(" (", 1)[0], field=key, line=_key_line(text, key)) from None
        raise


def parse_config(text: str):
    """Parse JSON config text into an :class:`ArchConfig` or :class:`ConvNeXtConfig`."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigParseError(f"invalid JSON: {e.msg}", line=e.lineno) from None
    return config_from_dict(d, text)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# --------------------------------------------------------------------- graph


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    inputs: tuple = ()
    channels: int = 0
    level: Optional[int] = None
    attrs: dict = field(default_factory=dict, hash=False, compare=True)

    @property
    def scope(self) -> str:
        return self.id.rsplit(".", 1)[0] if "." in self.id else ""

    @property
    def module(self) -> str:
        return self.id.split(".", 1)[0]

    def param_shapes(self) -> dict:
        a = self.attrs
        if self.kind == "conv2d":
            k = a["kernel"]
            shapes = {"weight": (self.channels, a["in_channels"] // a["groups"], k, k)}
            if a.get("bias", True):
                shapes["bias"] = (self.channels,)
            return shapes
        if self.kind == "layer_norm":
            return {"weight": (self.channels,), "bias": (self.channels,)}
        if self.kind == "linear":
            return {"weight": (self.channels, a["in_channels"]), "bias": (self.channels,)}
        return {}

    def num_params(self) -> int:
        total = 0
        for shape in self.param_shapes().values():
            n = 1
            for s in shape:
                n *= s
            total += n
        return total

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "inputs": list(self.inputs),
            "channels": self.channels,
            "level": self.level,
            "attrs": dict(self.attrs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerNode":
        return cls(
            id=d["id"],
            kind=d["kind"],
            inputs=tuple(d.get("inputs", ())),
            channels=int(d.get("channels", 0)),
            level=d.get("level"),
            attrs=dict(d.get("attrs", {})),
        )


@dataclass(frozen=True)
class ArchGraph:
    """Topologically ordered layer nodes plus designated input/outputs."""

    nodes: tuple
    input_id: str
    outputs: dict
    first_fusion: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id) -> bool:
        return node_id in self._index

    def node(self, node_id: str) -> LayerNode:
        return self._index[node_id]

    def consumers(self) -> dict:
        out = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                if i in out:
                    out[i].append(n.id)
        return out

    def ancestors(self, node_id: str, include_self: bool = False) -> set:
        seen = set()
        stack = [node_id] if include_self else list(self.node(node_id).inputs)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self._index[nid].inputs)
        return seen

    def parameterized(self) -> list:
        return [n for n in self.nodes if n.param_shapes()]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "input": self.input_id,
            "outputs": dict(self.outputs),
            "first_fusion": self.first_fusion,
            "meta": self.meta,
            "nodes": [n.to_dict() for n in self.nodes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchGraph":
        return cls(
            nodes=tuple(LayerNode.from_dict(n) for n in d["nodes"]),
            input_id=d["input"],
            outputs=dict(d["outputs"]),
            first_fusion=d.get("first_fusion"),
            meta=dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "ArchGraph":
        return cls.from_dict(json.loads(text))


def origin_level(graph: ArchGraph, node_id: str) -> Optional[int]:
    """Scale level a feature originates at; upsampling keeps the source level."""
    n = graph.node(node_id)
    while n.kind == "upsample":
        n = graph.node(n.inputs[0])
    return n.level


def find_first_fusion(graph: ArchGraph) -> Optional[str]:
    """First ``add`` (in topological order) merging features of different origin scales."""
    for n in graph.nodes:
        if n.kind != "add":
            continue
        levels = {origin_level(graph, i) for i in n.inputs}
        if len(levels) > 1:
            return n.id
    return None


def topological_order(nodes: Sequence[LayerNode]) -> list:
    """Kahn ordering of node ids; raises :class:`GraphError` naming a node on a cycle."""
    ids = {n.id for n in nodes}
    indeg = {n.id: 0 for n in nodes}
    users = {n.id: [] for n in nodes}
    for n in nodes:
        for i in n.inputs:
            if i in ids:
                indeg[n.id] += 1
                users[i].append(n.id)
    ready = [n.id for n in nodes if indeg[n.id] == 0]
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    if len(order) != len(nodes):
        stuck = next(n.id for n in nodes if indeg[n.id] > 0)
        raise GraphError(f"cycle through node {stuck}")
    return order


def validate_graph(graph: ArchGraph) -> list:
    """Return a list of diagnostics (empty when the graph is consistent)."""
    diags = []
    index = {}
    for n in graph.nodes:
        if n.id in index:
            diags.append(f"duplicate node id {n.id}")
        index[n.id] = n
        if n.kind not in NODE_KINDS:
            diags.append(f"node {n.id}: unknown kind {n.kind!r}")
    for n in graph.nodes:
        for i in n.inputs:
            if i not in index:
                diags.append(f"node {n.id}: input {i} does not exist")
    try:
        topological_order(graph.nodes)
    except GraphError as e:
        diags.append(str(e))
        return diags
    if diags:
        return diags

    if graph.input_id not in index or index[graph.input_id].kind != "input":
        diags.append(f"designated input {graph.input_id} is not an input node")
    for name, oid in graph.outputs.items():
        if oid not in index:
            diags.append(f"output {name} refers to missing node {oid}")
        elif graph.input_id not in graph.ancestors(oid, include_self=True):
            diags.append(f"output {name} ({oid}) is not reachable from the input")

    for n in graph.nodes:
        ins = [index[i] for i in n.inputs]
        a = n.attrs
        if n.kind == "input":
            if ins:
                diags.append(f"node {n.id}: input node has inputs")
            continue
        if not ins:
            diags.append(f"node {n.id}: no inputs")
            continue
        src = ins[0]
        if n.kind == "conv2d":
            if a.get("in_channels") != src.channels:
                diags.append(
                    f"node {n.id}: in_channels {a.get('in_channels')} != producer {src.id} channels {src.channels}"
                )
            g = a.get("groups", 1)
            if src.channels % g or n.channels % g:
                diags.append(f"node {n.id}: channels not divisible by groups {g}")
            expect = src.level + _log2(a.get("stride", 1)) if src.level is not None else None
            if n.level != expect:
                diags.append(f"node {n.id}: level {n.level} inconsistent with stride (expected {expect})")
        elif n.kind == "linear":
            if a.get("in_channels") != src.channels:
                diags.append(
                    f"node {n.id}: in_channels {a.get('in_channels')} != producer {src.id} channels {src.channels}"
                )
            if n.level != src.level:
                diags.append(f"node {n.id}: level changed by a linear node")
        elif n.kind in ("layer_norm", "gelu", "output"):
            if n.channels != src.channels or n.level != src.level:
                diags.append(f"node {n.id}: must preserve channels and level of {src.id}")
        elif n.kind == "upsample":
            if n.channels != src.channels:
                diags.append(f"node {n.id}: upsample changes channels")
            if src.level is None or n.level != src.level - _log2(a.get("scale", 2)):
                diags.append(f"node {n.id}: level inconsistent with scale {a.get('scale')}")
        elif n.kind == "add":
            if len(ins) != 2:
                diags.append(f"node {n.id}: add needs 2 inputs, got {len(ins)}")
            shapes = {(i.channels, i.level) for i in ins}
            if len(shapes) != 1:
                diags.append(
                    f"node {n.id}: add inputs differ in shape: "
                    + ", ".join(f"{i.id}=(c={i.channels}, level={i.level})" for i in ins)
                )
        elif n.kind == "pool":
            if n.channels != src.channels or n.level is not None:
                diags.append(f"node {n.id}: pool must keep channels and drop the level")

    recomputed = find_first_fusion(graph)
    if recomputed != graph.first_fusion:
        diags.append(
            f"first-fusion annotation {graph.first_fusion} != recomputed {recomputed}"
        )
    return diags


def _log2(v: int) -> int:
    v = int(v)
    k = 0
    while v > 1:
        if v % 2:
            raise GraphError(f"stride/scale {v} is not a power of two")
        v //= 2
        k += 1
    return k


# --------------------------------------------------------------------- builder


class GraphBuilder:
    """Appends nodes in construction (= topological) order under a scope stack."""

    def __init__(self, in_channels: int = 3):
        self.nodes: list[LayerNode] = []
        self._index: dict[str, LayerNode] = {}
        self._scope: list[str] = []
        self.input_id = self._add("input", (), in_channels, 0, name="input")

    @contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    def _add(self, kind, inputs, channels, level, name, **attrs) -> str:
        nid = ".".join(self._scope + [name])
        if nid in self._index:
            raise GraphError(f"duplicate node id {nid}")
        node = LayerNode(nid, kind, tuple(inputs), int(channels), level, attrs)
        self.nodes.append(node)
        self._index[nid] = node
        return nid

    def node(self, nid: str) -> LayerNode:
        return self._index[nid]

    def conv(self, x, out_ch, kernel, stride=1, padding=0, dilation=1, groups=1, name="conv"):
        src = self._index[x]
        if src.channels % groups or out_ch % groups:
            raise GraphError(f"{name}: channels {src.channels}->{out_ch} not divisible by groups {groups}")
        if src.level is None:
            raise GraphError(f"{name}: conv needs a spatial input")
        return self._add(
            "conv2d", [x], out_ch, src.level + _log2(stride), name,
            in_channels=src.channels, kernel=kernel, stride=stride,
            padding=padding, dilation=dilation, groups=groups,
        )

    def norm(self, x, name="norm"):
        src = self._index[x]
        return self._add("layer_norm", [x], src.channels, src.level, name, eps=1e-6)

    def gelu(self, x, name="act"):
        src = self._index[x]
        return self._add("gelu", [x], src.channels, src.level, name)

    def linear(self, x, out_features, name="fc"):
        src = self._index[x]
        return self._add("linear", [x], out_features, src.level, name, in_channels=src.channels)

    def add(self, a, b, name="add"):
        na, nb = self._index[a], self._index[b]
        if (na.channels, na.level) != (nb.channels, nb.level):
            raise GraphError(
                f"{'.'.join(self._scope + [name])}: cannot add {a} (c={na.channels}, level={na.level}) "
                f"and {b} (c={nb.channels}, level={nb.level})"
            )
        return self._add("add", [a, b], na.channels, na.level, name)

    def upsample(self, x, scale=2, name="up"):
        src = self._index[x]
        return self._add("upsample", [x], src.channels, src.level - _log2(scale), name, scale=scale)

    def pool(self, x, name="pool"):
        src = self._index[x]
        return self._add("pool", [x], src.channels, None, name)

    def output(self, x, name):
        src = self._index[x]
        return self._add("output", [x], src.channels, src.level, name)

    def finish(self, outputs: dict, meta: Optional[dict] = None) -> ArchGraph:
        out_ids = {}
        for name, nid in outputs.items():
            with self.scope("out"):
                out_ids[name] = self.output(nid, name)
        g = ArchGraph(tuple(self.nodes), self.input_id, out_ids, None, meta or {})
        return ArchGraph(g.nodes, g.input_id, g.outputs, find_first_fusion(g), g.meta)


# --------------------------------------------------------------------- blocks


def ced_block(b: GraphBuilder, x: str, mlp_ratio: int = 4, name: str = "block") -> str:
    """7x7 depthwise mixer + LN + two-layer MLP, with a residual."""
    c = b.node(x).channels
    with b.scope(name):
        h = b.conv(x, c, 7, padding=3, groups=c, name="dw")
        h = b.norm(h, "norm")
        h = b.linear(h, mlp_ratio * c, "fc1")
        h = b.gelu(h, "act")
        h = b.linear(h, c, "fc2")
        return b.add(x, h, "residual")


def lr_ced_block(b: GraphBuilder, x: str, dilation: int = 3, mlp_ratio: int = 4, name: str = "lr_block") -> str:
    """Dilated 7x7 depthwise conv with its own residual, then a CED block."""
    c = b.node(x).channels
    with b.scope(name):
        d = b.conv(x, c, 7, padding=3 * dilation, dilation=dilation, groups=c, name="dw_dilated")
        y = b.add(x, d, "dilated_residual")
        h = b.conv(y, c, 7, padding=3, groups=c, name="dw")
        h = b.norm(h, "norm")
        h = b.linear(h, mlp_ratio * c, "fc1")
        h = b.gelu(h, "act")
        h = b.linear(h, c, "fc2")
        return b.add(y, h, "residual")


def _downsample(b: GraphBuilder, x: str, out_ch: int, name: str) -> str:
    with b.scope(name):
        h = b.norm(x, "norm")
        return b.conv(h, out_ch, 2, stride=2, name="conv")


def build_stem(b: GraphBuilder, c0: int, c1: int, n0: int, mlp_ratio: int = 4, x: Optional[str] = None) -> str:
    """Input -> c0 @ stride 4 (two 3x3 s2 convs, n0 blocks) -> c1 @ stride 8."""
    x = b.input_id if x is None else x
    with b.scope("stem"):
        h = b.conv(x, c0, 3, stride=2, padding=1, name="conv1")
        h = b.gelu(b.norm(h, "norm1"), "act1")
        h = b.conv(h, c0, 3, stride=2, padding=1, name="conv2")
        h = b.gelu(b.norm(h, "norm2"), "act2")
        for i in range(n0):
            h = ced_block(b, h, mlp_ratio, name=f"block{i}")
        return _downsample(b, h, c1, "down")


def build_encoder(b, x, channels, blocks, dilation, mlp_ratio, lr_block=True) -> dict:
    c1, c2, c3 = channels
    n1, n2, n3 = blocks
    with b.scope("enc"):
        h = x
        with b.scope("s8"):
            for i in range(n1):
                h = ced_block(b, h, mlp_ratio, name=f"block{i}")
        e8 = h
        h = _downsample(b, h, c2, "down16")
        with b.scope("s16"):
            for i in range(n2):
                h = ced_block(b, h, mlp_ratio, name=f"block{i}")
        e16 = h
        h = _downsample(b, h, c3, "down32")
        with b.scope("s32"):
            for i in range(n3):
                if lr_block:
                    h = lr_ced_block(b, h, dilation, mlp_ratio, name=f"lr_block{i}")
                else:
                    h = ced_block(b, h, mlp_ratio, name=f"block{i}")
        e32 = h
    return {"e8": e8, "e16": e16, "e32": e32}


def build_decoder(b, style, enc, channels, mlp_ratio) -> dict:
    c1, c2, c3 = channels
    e8, e16, e32 = enc["e8"], enc["e16"], enc["e32"]
    with b.scope("dec"):
        p32 = e32
        if style == "hourglass":
            e16 = ced_block(b, e16, mlp_ratio, name="lateral16")
        top = b.upsample(b.conv(p32, c2, 1, name="align32"), 2, "up32")
        p16 = b.add(e16, top, "merge16")
        if style == "unet":
            p16 = ced_block(b, p16, mlp_ratio, name="post16")
        if style == "hourglass":
            e8 = ced_block(b, e8, mlp_ratio, name="lateral8")
        top = b.upsample(b.conv(p16, c1, 1, name="align16"), 2, "up16")
        p8 = b.add(e8, top, "merge8")
        if style == "unet":
            p8 = ced_block(b, p8, mlp_ratio, name="post8")
    return {"p8": p8, "p16": p16, "p32": p32}


def build_stage(b, style, channels, blocks, dilation, mlp_ratio=4, x=None, decoder=True, lr_block=True) -> dict:
    """One encoder-decoder stage; returns p8/p16/p32 (or e* without decoder)."""
    if style not in STYLES:
        raise GraphError(f"unknown style {style!r}")
    x = b.input_id if x is None else x
    src = b.node(x)
    if src.channels != channels[0]:
        raise GraphError(f"stage input has {src.channels} channels, expected c1={channels[0]}")
    enc = build_encoder(b, x, channels, blocks, dilation, mlp_ratio, lr_block)
    if not decoder:
        return enc
    return build_decoder(b, style, enc, channels, mlp_ratio)


def classification_head(b: GraphBuilder, x: str, num_classes: int) -> str:
    with b.scope("head"):
        h = b.pool(x, "pool")
        h = b.norm(h, "norm")
        return b.linear(h, num_classes, "fc")


def build_cednet_into(b: GraphBuilder, config: ArchConfig, classification: bool = False) -> dict:
    """Append stem + m stages to ``b``; return the final feature taps."""
    c0, c1, c2, c3 = config.channels
    x = build_stem(b, c0, c1, config.blocks[0], config.mlp_ratio)
    taps = {}
    for i in range(config.stages):
        last = i == config.stages - 1
        with b.scope(f"stage{i + 1}"):
            taps = build_stage(
                b, config.style, (c1, c2, c3), config.stage_blocks(i), config.dilation,
                config.mlp_ratio, x=x, decoder=not (classification and last),
                lr_block=config.lr_block,
            )
        if not (classification and last):
            x = taps["p8"]
    return taps


def build_cednet(config: ArchConfig, mode: Optional[str] = None) -> ArchGraph:
    """Build the dense (p8/p16/p32) or classification (logits) graph."""
    mode = mode or config.mode
    if mode not in MODES:
        raise ConfigParseError(f"mode must be one of {MODES}", field="mode")
    b = GraphBuilder()
    meta = {"arch": "cednet", "mode": mode, "config": config_to_dict(config)}
    if mode == "classification":
        taps = build_cednet_into(b, config, classification=True)
        logits = classification_head(b, taps["e32"], config.num_classes)
        return b.finish({"logits": logits}, meta)
    taps = build_cednet_into(b, config)
    return b.finish({"p8": taps["p8"], "p16": taps["p16"], "p32": taps["p32"]}, meta)


def build_convnext(config: ConvNeXtConfig = CONVNEXT_S) -> ArchGraph:
    """ConvNeXt with optional RetinaNet-style FPN neck (analysis baseline)."""
    b = GraphBuilder()
    d0 = config.dims[0]
    with b.scope("stem"):
        h = b.conv(b.input_id, d0, 4, stride=4, name="patchify")
        h = b.norm(h, "norm")
    feats = []
    for i, (depth, dim) in enumerate(zip(config.depths, config.dims)):
        with b.scope(f"stage{i + 1}"):
            if i > 0:
                h = _downsample(b, h, dim, "down")
            for j in range(depth):
                h = ced_block(b, h, 4, name=f"block{j}")
        feats.append(h)
    meta = {"arch": "convnext", "mode": config.mode, "config": config_to_dict(config)}
    if config.mode == "classification":
        logits = classification_head(b, feats[-1], config.num_classes)
        return b.finish({"logits": logits}, meta)
    if config.mode == "backbone":
        return b.finish({f"c{i + 2}": f for i, f in enumerate(feats)}, meta)

    ch = config.fpn_channels
    c3, c4, c5 = feats[1], feats[2], feats[3]
    outs = {}
    with b.scope("fpn"):
        l3 = b.conv(c3, ch, 1, name="lateral3")
        l4 = b.conv(c4, ch, 1, name="lateral4")
        l5 = b.conv(c5, ch, 1, name="lateral5")
        t4 = b.add(l4, b.upsample(l5, 2, "up5"), "topdown4")
        t3 = b.add(l3, b.upsample(t4, 2, "up4"), "topdown3")
        outs["p3"] = b.conv(t3, ch, 3, padding=1, name="out3")
        outs["p4"] = b.conv(t4, ch, 3, padding=1, name="out4")
        outs["p5"] = b.conv(l5, ch, 3, padding=1, name="out5")
        src = c5
        for k in range(config.fpn_extra_levels):
            src = b.conv(src, ch, 3, stride=2, padding=1, name=f"extra{6 + k}")
            outs[f"p{6 + k}"] = src
    return b.finish(outs, meta)


def build_graph(config) -> ArchGraph:
    if isinstance(config, ConvNeXtConfig):
        return build_convnext(config)
    return build_cednet(config)


def block_scopes(graph: ArchGraph) -> list:
    """(scope, is_lr, level) for every CED / LR CED block in the graph."""
    out = []
    for n in graph.nodes:
        if n.kind == "add" and n.id.endswith(".residual"):
            out.append((n.scope, f"{n.scope}.dw_dilated" in graph, n.level))
    return out


def iter_nodes(graph: ArchGraph, prefix: str) -> Iterable[LayerNode]:
    return (n for n in graph.nodes if n.id == prefix or n.id.startswith(prefix + "."))
