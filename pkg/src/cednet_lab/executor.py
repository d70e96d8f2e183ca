"""Parameter storage, initialization, forward execution and checkpoint I/O."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .graph import ArchGraph
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"CEDCKPT\x01"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class CheckpointError(IOError):
    pass


@dataclass
class ParamStore:
    """Flat ``"{node_id}.{weight|bias}" -> Tensor`` map plus the init seed."""

    tensors: dict
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list:
        return list(self.tensors)

    def node_params(self, node_id: str) -> dict:
        pre = node_id + "."
        return {k[len(pre):]: v for k, v in self.tensors.items() if k.startswith(pre)}

    def parameters(self) -> list:
        return list(self.tensors.values())

    def num_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def requires_grad_(self, flag: bool = True) -> "ParamStore":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            self.seed,
            dict(self.meta),
        )

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            self.seed,
            dict(self.meta),
        )


def _trunc_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    # absolute truncation bounds [-2, 2], as in the ConvNeXt recipe
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_params(graph: ArchGraph, seed: int = 0, dtype=np.float32, std: float = INIT_STD) -> ParamStore:
    """Truncated-normal conv/linear weights, zero biases, unit/zero norm affine."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for node in graph.nodes:
        for pname, shape in node.param_shapes().items():
            if node.kind == "layer_norm":
                arr = np.ones(shape) if pname == "weight" else np.zeros(shape)
            elif pname == "weight":
                arr = _trunc_normal(rng, shape, std)
            else:
                arr = np.zeros(shape)
            tensors[f"{node.id}.{pname}"] = Tensor(arr.astype(dtype))
    return ParamStore(tensors, seed)


def check_store(graph: ArchGraph, store: ParamStore) -> None:
    expected = {}
    for node in graph.nodes:
        for pname, shape in node.param_shapes().items():
            expected[f"{node.id}.{pname}"] = tuple(shape)
    missing = sorted(set(expected) - set(store.tensors))
    extra = sorted(set(store.tensors) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameter store mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, shape in expected.items():
        if store.tensors[k].shape != shape:
            raise ShapeError(f"{k}: stored shape {store.tensors[k].shape} != {shape}")


def _run_node(node, params: dict, inputs: list) -> Tensor:
    a = node.attrs
    kind = node.kind
    if kind == "conv2d":
        return T.conv2d(
            inputs[0], params["weight"], params.get("bias"),
            stride=a["stride"], padding=a["padding"], dilation=a["dilation"], groups=a["groups"],
        )
    if kind == "layer_norm":
        return T.layer_norm(inputs[0], params["weight"], params["bias"], a.get("eps", 1e-6))
    if kind == "linear":
        return T.linear(inputs[0], params["weight"], params["bias"])
    if kind == "gelu":
        return T.gelu(inputs[0])
    if kind == "add":
        if inputs[0].shape != inputs[1].shape:
            raise ShapeError(f"{node.id}: add of {inputs[0].shape} and {inputs[1].shape}")
        return T.add(inputs[0], inputs[1])
    if kind == "upsample":
        return T.bilinear_upsample(inputs[0], a["scale"])
    if kind == "pool":
        return T.global_avg_pool(inputs[0])
    if kind == "output":
        return inputs[0]
    raise ValueError(f"cannot execute node kind {kind!r}")


def forward(graph: ArchGraph, store: ParamStore, x: Tensor, keep: Optional[set] = None) -> dict:
    """Evaluate ``graph`` on NCHW ``x``; returns ``{output name: Tensor}``.

    ``keep`` optionally names extra node ids whose values are returned too.
    """
    if x.ndim != 4:
        raise ShapeError(f"forward expects NCHW input, got {x.shape}")
    in_ch = graph.node(graph.input_id).channels
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, graph expects {in_ch}")
    h, w = x.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input spatial size {h}x{w} must be divisible by 32")

    # free intermediates once their last consumer has run
    last_use = {}
    for i, n in enumerate(graph.nodes):
        for src in n.inputs:
            last_use[src] = i
    wanted = set(graph.outputs.values()) | set(keep or ())
    values = {}
    for i, node in enumerate(graph.nodes):
        if node.kind == "input":
            values[node.id] = x
            continue
        ins = [values[s] for s in node.inputs]
        values[node.id] = _run_node(node, store.node_params(node.id) if node.param_shapes() else {}, ins)
        for s in node.inputs:
            if last_use.get(s) == i and s not in wanted:
                del values[s]
    out = {name: values[nid] for name, nid in graph.outputs.items()}
    for nid in keep or ():
        out[nid] = values[nid]
    return out


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(store: ParamStore, path, meta: Optional[dict] = None) -> None:
    """Write ``magic | u64 manifest length | manifest JSON | tensor dumps``.

    The manifest carries each tensor's byte range and sha256 plus a digest
    of the whole payload.
    """
    blobs, entries, offset = [], [], 0
    for name, t in store.tensors.items():
        blob = T.dumps_tensor(t)
        entries.append(
            {"name": name, "offset": offset, "nbytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()}
        )
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "seed": store.seed,
        "meta": {**store.meta, **(meta or {})},
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload)


def read_manifest(path) -> dict:
    raw = Path(path).read_bytes()
    return _split_checkpoint(raw)[0]


def _split_checkpoint(raw: bytes):
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError("checksum error: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    try:
        manifest = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("checksum error: manifest is corrupt or truncated") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    return manifest, raw[pos + hlen :]


def load_checkpoint(path) -> ParamStore:
    manifest, payload = _split_checkpoint(Path(path).read_bytes())
    if len(payload) != manifest["payload_bytes"] or hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(
            f"checksum error: payload has {len(payload)} bytes, manifest expects {manifest['payload_bytes']}"
        )
    tensors = {}
    for e in manifest["tensors"]:
        blob = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum error in tensor {e['name']}")
        if e["name"] in tensors:
            raise CheckpointError(f"duplicate tensor {e['name']}")
        tensors[e["name"]] = T.read_tensor(io.BytesIO(blob))
    return ParamStore(tensors, manifest.get("seed"), manifest.get("meta", {}))
