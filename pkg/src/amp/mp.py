"""Message-passing layers, soft message filters and per-layer readouts.

All layers consume a graph structure exposing ``n``, ``src``, ``dst`` and
``gcn_norm`` (a :class:`amp.graphs.GraphBatch`). Messages travel from
``src`` to ``dst``; the filter multiplies the sender's embedding.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, ShapeError, Tensor

LAYER_KINDS = ("gcn", "gin", "adgn")
FILTER_MODES = ("none", "input", "embedding")
ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "relu": ad.relu, "identity": None}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    def parameters(self) -> list[Parameter]:
        return []

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str, bias: bool = True):
        self.weight = Parameter(glorot(rng, fan_in, fan_out), f"{name}.weight")
        self.bias = Parameter(np.zeros(fan_out), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        return ad.add_bias(out, self.bias) if self.bias is not None else out

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class MLP(Module):
    """One hidden layer: ``out_act(act(x W1 + b1) W2 + b2)``."""

    def __init__(self, fan_in: int, hidden: int, fan_out: int, rng: np.random.Generator, name: str,
                 activation: str = "tanh", out_activation: str = "identity"):
        self.hidden = Linear(fan_in, hidden, rng, f"{name}.hidden")
        self.out = Linear(hidden, fan_out, rng, f"{name}.out")
        self.activation = ACTIVATIONS[activation]
        self.out_activation = ACTIVATIONS[out_activation]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.activation(self.hidden(x))
        y = self.out(h)
        return self.out_activation(y) if self.out_activation is not None else y

    def parameters(self):
        return self.hidden.parameters() + self.out.parameters()


def _check(h: Tensor, f: Tensor | None, n: int, dim: int) -> None:
    if h.shape != (n, dim):
        raise ShapeError(f"embeddings have shape {h.shape}, expected {(n, dim)}")
    if f is not None and f.shape != h.shape:
        raise ShapeError(f"filter shape {f.shape} != embedding shape {h.shape}")


def neighbor_sum(graph, h: Tensor, f: Tensor | None, weights: np.ndarray | None = None) -> Tensor:
    sent = h if f is None else ad.mul(f, h)
    return ad.propagate(sent, graph.src, graph.dst, graph.n, weights)


class GCNLayer(Module):
    """``H + tanh(H W_self + A_norm (F * H) W_nbr + b)``; the leading ``H`` is dropped when ``skip`` is off."""

    kind = "gcn"

    def __init__(self, dim: int, rng: np.random.Generator, name: str, skip: bool = True):
        self.dim = dim
        self.skip = skip
        self.w_self = Parameter(glorot(rng, dim, dim), f"{name}.w_self")
        self.w_nbr = Parameter(glorot(rng, dim, dim), f"{name}.w_nbr")
        self.bias = Parameter(np.zeros(dim), f"{name}.bias")

    def __call__(self, graph, h: Tensor, f: Tensor | None = None) -> Tensor:
        _check(h, f, graph.n, self.dim)
        agg = neighbor_sum(graph, h, f, graph.gcn_norm)
        pre = ad.add(ad.matmul(h, self.w_self), ad.matmul(agg, self.w_nbr))
        out = ad.tanh(ad.add_bias(pre, self.bias))
        return ad.add(h, out) if self.skip else out

    def parameters(self):
        return [self.w_self, self.w_nbr, self.bias]


class GINLayer(Module):
    """``MLP((1 + eps) H + sum_nbr F * H)`` with tanh activations."""

    kind = "gin"

    def __init__(self, dim: int, rng: np.random.Generator, name: str, eps: float = 0.0):
        self.dim = dim
        self.eps = eps
        self.mlp = MLP(dim, dim, dim, rng, f"{name}.mlp", "tanh", "tanh")

    def __call__(self, graph, h: Tensor, f: Tensor | None = None) -> Tensor:
        _check(h, f, graph.n, self.dim)
        agg = neighbor_sum(graph, h, f)
        own = h if self.eps == 0.0 else ad.mul(h, 1.0 + self.eps)
        return self.mlp(ad.add(own, agg))

    def parameters(self):
        return self.mlp.parameters()


class ADGNLayer(Module):
    """Antisymmetric update ``H + step * tanh(H M^T + (sum_nbr F * H) W_nbr + b)``.

    ``M = W - W^T - gamma I`` keeps the recurrent Jacobian's eigenvalues in
    the closed left half plane.
    """

    kind = "adgn"

    def __init__(self, dim: int, rng: np.random.Generator, name: str, step: float = 0.1, gamma: float = 0.1):
        self.dim = dim
        self.step = step
        self.gamma = gamma
        self.weight = Parameter(glorot(rng, dim, dim), f"{name}.weight")
        self.w_nbr = Parameter(glorot(rng, dim, dim), f"{name}.w_nbr")
        self.bias = Parameter(np.zeros(dim), f"{name}.bias")

    def recurrent_matrix(self) -> Tensor:
        return ad.sub(ad.sub(self.weight, ad.transpose(self.weight)), Tensor(self.gamma * np.eye(self.dim)))

    def __call__(self, graph, h: Tensor, f: Tensor | None = None) -> Tensor:
        _check(h, f, graph.n, self.dim)
        agg = neighbor_sum(graph, h, f)
        pre = ad.add(ad.matmul(h, ad.transpose(self.recurrent_matrix())), ad.matmul(agg, self.w_nbr))
        return ad.add(h, ad.mul(ad.tanh(ad.add_bias(pre, self.bias)), self.step))

    def parameters(self):
        return [self.weight, self.w_nbr, self.bias]


def make_layer(kind: str, dim: int, rng: np.random.Generator, name: str, **options) -> Module:
    if kind == "gcn":
        return GCNLayer(dim, rng, name, skip=options.get("gcn_skip", True))
    if kind == "gin":
        return GINLayer(dim, rng, name, eps=options.get("gin_eps", 0.0))
    if kind == "adgn":
        return ADGNLayer(dim, rng, name, step=options.get("adgn_step", 0.1), gamma=options.get("adgn_gamma", 0.1))
    raise ContractError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


class FilterFunction(Module):
    """Per-layer sigmoid MLPs producing soft gates in (0, 1).

    ``filters[i]`` gates the messages consumed by message-passing layer
    ``i + 2``. In ``input`` mode it reads the raw node features, in
    ``embedding`` mode the embeddings of the preceding layer.
    """

    def __init__(self, mode: str, input_dim: int, dim: int):
        if mode not in FILTER_MODES:
            raise ContractError(f"unknown filter mode {mode!r}; expected one of {FILTER_MODES}")
        self.mode = mode
        self.input_dim = input_dim
        self.dim = dim
        self.filters: list[MLP] = []

    def add_filter(self, rng: np.random.Generator, name: str) -> MLP | None:
        if self.mode == "none":
            return None
        fan_in = self.input_dim if self.mode == "input" else self.dim
        mlp = MLP(fan_in, self.dim, self.dim, rng, name, "tanh", "sigmoid")
        self.filters.append(mlp)
        return mlp

    def __len__(self) -> int:
        return len(self.filters)

    def __call__(self, index: int, features: Tensor, embeddings: Tensor) -> Tensor:
        n = features.shape[0]
        if self.mode == "none":
            return Tensor(np.ones((n, self.dim)))
        if not 0 <= index < len(self.filters):
            raise ContractError(f"filter {index} not instantiated ({len(self.filters)} available)")
        source = features if self.mode == "input" else embeddings
        return self.filters[index](source)

    def parameters(self):
        return [p for f in self.filters for p in f.parameters()]


class Readout(Module):
    """Node level: ``rho(H)``. Graph level: ``rho2(mean_pool(rho1(H)))``."""

    def __init__(self, level: str, dim: int, target_dim: int, rng: np.random.Generator | None, name: str,
                 identity: bool = False):
        if level not in ("node", "graph"):
            raise ContractError(f"unknown readout level {level!r}")
        self.level = level
        self.identity = identity
        if identity:
            if dim != target_dim:
                raise ShapeError("identity readout needs dim == target_dim")
            self.pre = self.post = None
        elif level == "node":
            self.pre = None
            self.post = MLP(dim, dim, target_dim, rng, f"{name}.rho")
        else:
            self.pre = MLP(dim, dim, dim, rng, f"{name}.rho1")
            self.post = MLP(dim, dim, target_dim, rng, f"{name}.rho2")

    def __call__(self, h: Tensor, node_graph: np.ndarray | None = None, num_graphs: int = 1) -> Tensor:
        if self.level == "node":
            return h if self.post is None else self.post(h)
        if node_graph is None:
            node_graph = np.zeros(h.shape[0], dtype=np.int64)
        z = h if self.pre is None else self.pre(h)
        pooled = ad.scatter_aggregate(z, node_graph, num_graphs, "mean")
        return pooled if self.post is None else self.post(pooled)

    def parameters(self):
        return [p for m in (self.pre, self.post) if m is not None for p in m.parameters()]
