"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .executor import ParamStore, forward, init_params
from .graph import ArchGraph
from .tensor import Tape, Tensor

ABS_FLOOR = 1e-8


def rel_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    """|a - n| / max(|a|, |n|); compared absolutely when |a| < ``floor``."""
    if abs(analytic) < floor:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric))


def numerical_grad(f: Callable[[], float], arr: np.ndarray, idx, eps: float = 1e-5) -> float:
    old = arr[idx]
    arr[idx] = old + eps
    fp = f()
    arr[idx] = old - eps
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * eps)


def check_function(fn: Callable, inputs: list, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error over every element of every input of scalar-valued ``fn``.

    ``fn`` maps the list of Tensors to a scalar Tensor; a random linear probe
    is applied when the output is not scalar.
    """
    probe = {}

    def scalar(out: Tensor) -> Tensor:
        if out.data.size == 1:
            return out
        if "w" not in probe:
            probe["w"] = Tensor(np.random.default_rng(seed).normal(size=out.shape))
        return T.sum_all(T.mul(out, probe["w"]))

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = scalar(fn(*inputs))
    T.backward(loss)

    def value() -> float:
        return float(scalar(fn(*inputs)).data.reshape(-1)[0])

    worst = 0.0
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            num = numerical_grad(value, t.data, idx, eps)
            worst = max(worst, rel_error(float(g[idx]), num))
    return worst


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    per_tensor: dict = field(default_factory=dict)
    directional_max_rel_error: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, self.directional_max_rel_error)


def probe_loss(graph: ArchGraph, x: Tensor, seed: int = 0) -> Callable[[ParamStore], Tensor]:
    """Scalar loss = sum over outputs of <output, fixed random probe>."""
    rng = np.random.default_rng(seed)
    probes = {}

    def loss(store: ParamStore) -> Tensor:
        outs = forward(graph, store, x)
        total = None
        for name in sorted(outs):
            out = outs[name]
            if name not in probes:
                probes[name] = Tensor(rng.normal(size=out.shape).astype(out.dtype))
            term = T.sum_all(T.mul(out, probes[name]))
            total = term if total is None else T.add(total, term)
        return total

    return loss


def check_network(
    graph: ArchGraph,
    store: ParamStore,
    loss_fn: Callable[[ParamStore], Tensor],
    eps: float = 1e-5,
    samples: int = 3,
    seed: int = 0,
    names: Optional[list] = None,
) -> GradcheckReport:
    """Finite-difference check of every parameter tensor of ``store``.

    Each tensor gets ``samples`` random single-element checks (all elements
    when it is that small) plus one random-direction check that perturbs
    the whole tensor at once, so no entry goes unexercised.
    """
    rng = np.random.default_rng(seed)
    store.requires_grad_(True)
    store.zero_grad()
    with Tape():
        loss = loss_fn(store)
    T.backward(loss)
    store.requires_grad_(False)

    def value() -> float:
        return float(loss_fn(store).data)

    worst = 0.0
    worst_dir = 0.0
    checked = 0
    per_tensor = {}
    for name in names or store.names():
        t = store[name]
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if t.data.size <= samples:
            idxs = list(np.ndindex(t.shape))
        else:
            flat = rng.choice(t.data.size, size=samples, replace=False)
            idxs = [np.unravel_index(int(i), t.shape) for i in flat]
        tensor_worst = 0.0
        for idx in idxs:
            num = numerical_grad(value, t.data, idx, eps)
            tensor_worst = max(tensor_worst, rel_error(float(g[idx]), num))
            checked += 1
        direction = rng.normal(size=t.shape)
        direction /= np.linalg.norm(direction)
        base = t.data.copy()
        t.data[...] = base + eps * direction
        fp = value()
        t.data[...] = base - eps * direction
        fm = value()
        t.data[...] = base
        dir_err = rel_error(float((g * direction).sum()), (fp - fm) / (2 * eps))
        worst_dir = max(worst_dir, dir_err)
        per_tensor[name] = max(tensor_worst, dir_err)
        worst = max(worst, tensor_worst)
    store.zero_grad()
    return GradcheckReport(worst, checked, per_tensor, worst_dir)


def gradcheck_graph(
    graph: ArchGraph,
    input_size: tuple = (32, 32),
    eps: float = 1e-5,
    samples: int = 3,
    seed: int = 0,
    init_std: float = 0.2,
) -> GradcheckReport:
    """64-bit gradient check of a whole graph under a random probe loss.

    A larger-than-training init spread keeps gradients well above the
    finite-difference noise floor.
    """
    store = init_params(graph, seed=seed, dtype=np.float64, std=init_std)
    rng = np.random.default_rng(seed + 1)
    # LN affine params get perturbed too so their gradients are generic
    for name, t in store.tensors.items():
        if name.endswith(".bias") or ".norm" in name:
            t.data[...] += rng.normal(0, 0.1, size=t.shape)
    x = Tensor(rng.normal(size=(1, graph.node(graph.input_id).channels) + tuple(input_size)))
    return check_network(graph, store, probe_loss(graph, x, seed), eps, samples, seed)
