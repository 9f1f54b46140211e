"""Oversmoothing and oversquashing diagnostics plus numerical checks of the analytic guarantees.

Includes Dirichlet energy, Jacobian sensitivity between layers, filter
activation statistics, an empirical check of the sensitivity upper bound
for filtered message passing, and the constructive filter assignment that
carries one node's features along a walk almost unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .distributions import DiscreteFoldedNormal, MixtureDFN, dfn_quantile_bounds, scan_quantile
from .graphs import GENERATORS, Graph, GraphBatch, generate_graph
from .model import AdaptiveModel, as_batch


# --- oversmoothing --------------------------------------------------------

def dirichlet_energy(graph, h) -> float:
    """``(1/n) * sum over directed edges (u, v) of ||h_u - h_v||^2``."""
    h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != graph.n:
        raise ad.ShapeError(f"embeddings must have {graph.n} rows, got shape {h.shape}")
    diff = h[graph.src] - h[graph.dst]
    return float(np.sum(diff * diff) / graph.n)


# --- sensitivity ----------------------------------------------------------

class _Probe:
    """Identity op that records the gradient flowing through it."""

    def __init__(self):
        self.grads: dict[int, np.ndarray] = {}

    def __call__(self, layer: int, h: Tensor) -> Tensor:
        def backward(g, layer=layer):
            prev = self.grads.get(layer)
            self.grads[layer] = g.copy() if prev is None else prev + g
            return (g,)

        return ad._record("probe", h.data.copy(), (h,), backward)

    def reset(self):
        self.grads.clear()


def layer_jacobians(model: AdaptiveModel, graph, final: int | None = None, nodes=None) -> dict[int, np.ndarray]:
    """``J[l][v, a, u, b] = d h_v^final[a] / d h_u^l[b]`` for every layer ``l <= final``.

    ``nodes`` restricts the output nodes ``v`` (all nodes by default).
    One backward pass is made per output entry with the tape kept alive.
    """
    batch = as_batch(graph)
    final = model.support if final is None else final
    if not 1 <= final <= model.instantiated:
        raise ContractError(f"final layer {final} outside 1..{model.instantiated}")
    nodes = np.arange(batch.n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    probe = _Probe()
    ad.reset_tape()
    try:
        out = model.forward_all(batch, final, tap=probe)
        h_final = out.embeddings[-1]
        n, d = h_final.shape
        jac = {layer: np.zeros((len(nodes), d, n, d)) for layer in range(1, final + 1)}
        for i, v in enumerate(nodes):
            for a in range(d):
                probe.reset()
                seed = np.zeros((n, d))
                seed[v, a] = 1.0
                ad.vjp(h_final, seed)
                for layer in range(1, final + 1):
                    g = probe.grads.get(layer)
                    if g is not None:
                        jac[layer][i, a] = g
    finally:
        ad.reset_tape()
        for p in model.all_parameters():
            p.zero_grad()
    return jac


def sensitivity_matrix(jacobian: np.ndarray) -> np.ndarray:
    """``S[v, u] = sum_ab |J[v, a, u, b]|``."""
    return np.abs(jacobian).sum(axis=(1, 3))


def sensitivity(model: AdaptiveModel, graph, source: int, layer: int, final: int | None = None) -> float:
    """``sum_v ||d h_v^final / d h_source^layer||_1`` (entrywise)."""
    final = model.support if final is None else final
    if not 1 <= layer <= final:
        raise ContractError(f"need 1 <= layer <= final, got layer={layer}, final={final}")
    jac = layer_jacobians(model, graph, final)[layer]
    return float(sensitivity_matrix(jac)[:, source].sum())


def layerwise_sensitivity(model: AdaptiveModel, graph, final: int | None = None, max_nodes: int | None = None,
                          seed: int = 0) -> np.ndarray:
    """Per layer, total sensitivity of the final embeddings averaged over output nodes."""
    batch = as_batch(graph)
    nodes = None
    if max_nodes is not None and batch.n > max_nodes:
        nodes = np.sort(np.random.default_rng(seed).choice(batch.n, max_nodes, replace=False))
    jac = layer_jacobians(model, batch, final, nodes)
    count = batch.n if nodes is None else len(nodes)
    return np.array([np.abs(jac[layer]).sum() / count for layer in sorted(jac)])


# --- filters --------------------------------------------------------------

@dataclass
class FilterStats:
    fractions: np.ndarray
    filtering: bool


def filter_stats(model: AdaptiveModel, graphs) -> FilterStats:
    """Mean filter activation per message-passing layer, averaged over graphs."""
    depth = model.support
    if model.filter.mode == "none":
        return FilterStats(np.ones(max(depth - 1, 0)), False)
    if isinstance(graphs, (Graph, GraphBatch)):
        graphs = [graphs]
    totals = np.zeros(max(depth - 1, 0))
    with ad.no_grad():
        for g in graphs:
            out = model.forward_all(g)
            for i, f in enumerate(out.filters):
                totals[i] += f.data.mean()
    return FilterStats(totals / len(graphs), True)


# --- report ---------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    energy: np.ndarray
    sensitivity: np.ndarray
    filter_fraction: np.ndarray
    filtering: bool
    bound_table: list[dict] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self.energy)):
            out.append({
                "layer": i + 1,
                "dirichlet_energy": float(self.energy[i]),
                "sensitivity": float(self.sensitivity[i]) if i < len(self.sensitivity) else math.nan,
                # layer 1 has no incoming messages
                "filter_fraction": float(self.filter_fraction[i - 1]) if i >= 1 else math.nan,
            })
        return out


def diagnose(model: AdaptiveModel, graphs: list[Graph], max_graphs: int = 16, max_nodes: int = 250,
             seed: int = 0) -> DiagnosticsReport:
    graphs = list(graphs)[:max_graphs]
    if not graphs:
        raise ContractError("need at least one graph to diagnose")
    depth = model.support
    energy = np.zeros(depth)
    sens = np.zeros(depth)
    per_graph = max(1, max_nodes // len(graphs))
    with ad.no_grad():
        for g in graphs:
            out = model.forward_all(g)
            batch = as_batch(g)
            energy += [dirichlet_energy(batch, h) for h in out.embeddings]
    for g in graphs:
        sens += layerwise_sensitivity(model, g, depth, per_graph, seed)
    stats = filter_stats(model, graphs)
    return DiagnosticsReport(energy / len(graphs), sens / len(graphs), stats.fractions, stats.filtering)


# --- sensitivity bound on linear filtered message passing -----------------

def inf_norm(matrix: np.ndarray) -> float:
    """Operator norm induced by the max norm: largest absolute row sum."""
    return float(np.abs(matrix).sum(axis=1).max())


@dataclass
class LinearFilteredMP:
    """``h' = up(rs(h) + mp(sum_u A_vu F(h_u) * h_u))`` with linear maps, row-vector form.

    Each map ``x -> x W^T`` has Jacobian ``W``; ``F(h) = sigmoid(h Wf^T + bf)``.
    """

    adjacency: np.ndarray
    up: list[np.ndarray]
    rs: list[np.ndarray]
    mp: list[np.ndarray]
    filt: list[np.ndarray]
    filt_bias: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.up)

    def run(self, h0: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        a = Tensor(self.adjacency)
        hs, fs = [h0], []
        h = h0
        for layer in range(self.depth):
            f = ad.sigmoid(ad.add_bias(ad.matmul(h, Tensor(self.filt[layer].T)), Tensor(self.filt_bias[layer])))
            agg = ad.matmul(a, ad.mul(f, h))
            inner = ad.add(ad.matmul(h, Tensor(self.rs[layer].T)), ad.matmul(agg, Tensor(self.mp[layer].T)))
            h = ad.matmul(inner, Tensor(self.up[layer].T))
            hs.append(h)
            fs.append(f)
        return hs, fs


@dataclass
class SensitivityBoundInputs:
    c_up: float
    c_rs: float
    c_mp: float
    c_f: float
    k_h: float
    k_f: float
    adjacency: np.ndarray
    layers: int
    dim: int

    def matrix(self) -> np.ndarray:
        n = self.adjacency.shape[0]
        return self.c_up * (self.c_rs * np.eye(n) + self.c_mp * (self.c_f * self.k_h + self.k_f) * self.adjacency)

    def bound(self) -> np.ndarray:
        """``B[v, u] = d * (M^m)[v, u]``."""
        return self.dim * np.linalg.matrix_power(self.matrix(), self.layers)


def sensitivity_bound(inputs: SensitivityBoundInputs, u: int, v: int) -> float:
    return float(inputs.bound()[v, u])


def measure_constants(model: LinearFilteredMP, h0: np.ndarray) -> SensitivityBoundInputs:
    with ad.no_grad():
        hs, fs = model.run(Tensor(h0))
    # sigmoid' <= 1/4, so the entrywise L1 norm of dF/dx is at most sum|Wf| / 4
    return SensitivityBoundInputs(
        c_up=max(inf_norm(w) for w in model.up),
        c_rs=max(inf_norm(w) for w in model.rs),
        c_mp=max(inf_norm(w) for w in model.mp),
        c_f=max(0.25 * float(np.abs(w).sum()) for w in model.filt),
        k_h=max(float(np.abs(h.data).max()) for h in hs[:-1]),
        k_f=max(float(np.abs(f.data).max()) for f in fs),
        adjacency=model.adjacency,
        layers=model.depth,
        dim=h0.shape[1],
    )


def input_sensitivity(model: LinearFilteredMP, h0: np.ndarray) -> np.ndarray:
    """``S[v, u] = ||d h_v^m / d h_u^0||_1`` (entrywise) by reverse mode."""
    n, d = h0.shape
    ad.reset_tape()
    leaf = Tensor(h0.copy(), requires_grad=True)
    try:
        hs, _ = model.run(leaf)
        out = hs[-1]
        sens = np.zeros((n, n))
        for v in range(n):
            for a in range(d):
                leaf.grad = None
                seed = np.zeros((n, d))
                seed[v, a] = 1.0
                ad.vjp(out, seed)
                if leaf.grad is not None:
                    sens[v] += np.abs(leaf.grad).sum(axis=1)
    finally:
        ad.reset_tape()
    return sens


@dataclass
class BoundCheck:
    n: int
    dim: int
    layers: int
    max_ratio: float
    violations: int
    table: list[dict]


def verify_bound(model: LinearFilteredMP, h0: np.ndarray, slack: float = 1e-9) -> BoundCheck:
    inputs = measure_constants(model, h0)
    bound = inputs.bound()
    emp = input_sensitivity(model, h0)
    table = []
    violations = 0
    ratio = 0.0
    n = h0.shape[0]
    for v in range(n):
        for u in range(n):
            ok = emp[v, u] <= bound[v, u] + slack
            violations += not ok
            if bound[v, u] > 0:
                ratio = max(ratio, emp[v, u] / bound[v, u])
            table.append({"v": v, "u": u, "empirical": float(emp[v, u]), "bound": float(bound[v, u]), "ok": bool(ok)})
    return BoundCheck(n, h0.shape[1], model.depth, ratio, violations, table)


def random_linear_model(rng: np.random.Generator, n: int, dim: int, layers: int,
                        adjacency: np.ndarray | None = None) -> LinearFilteredMP:
    if adjacency is None:
        kind = rng.choice(["line", "star", "cycle", "complete", "erdos_renyi"]) if n > 2 else "line"
        g = generate_graph(str(kind), n, int(rng.integers(0, 2**31 - 1)))
        adjacency = np.zeros((n, n))
        adjacency[g.dst, g.src] = 1.0

    def mats(scale):
        return [rng.normal(0.0, scale, (dim, dim)) for _ in range(layers)]

    return LinearFilteredMP(adjacency, mats(0.7), mats(0.7), mats(0.7), mats(1.0),
                            [rng.normal(0.0, 1.0, dim) for _ in range(layers)])


def sensitivity_bound_suite(seed: int = 0, trials: int = 20, slack: float = 1e-9) -> list[BoundCheck]:
    rng = np.random.default_rng([seed, 101])
    out = []
    for _ in range(trials):
        n = int(rng.integers(2, 7))
        dim = int(rng.integers(1, 4))
        layers = int(rng.integers(1, 4))
        model = random_linear_model(rng, n, dim, layers)
        out.append(verify_bound(model, rng.normal(0.0, 1.0, (n, dim)), slack))
    return out


# --- reachability construction --------------------------------------------

def filtered_sum_step(graph: Graph, h: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """``h'_v = sum over in-neighbours u of gates[u] * h_u`` (no activation)."""
    out = np.zeros_like(h)
    g = gates[:, None] if gates.ndim == 1 else gates
    np.add.at(out, graph.dst, g[graph.src] * h[graph.src])
    return out


@dataclass
class Reachability:
    distance: float
    tolerance: float
    gate_logits: list[np.ndarray]
    gates: list[np.ndarray]
    steps: list[float]

    @property
    def passed(self) -> bool:
        return self.distance <= self.tolerance


def _validate_walk(graph: Graph, walk: list[int], source: int, dest: int) -> None:
    if len(walk) < 2 or walk[0] != source or walk[-1] != dest:
        raise ContractError("walk must start at the source, end at the destination and contain an edge")
    edges = {(int(a), int(b)) for a, b in graph.edges}
    for a, b in zip(walk, walk[1:]):
        if (int(a), int(b)) not in edges:
            raise ContractError(f"({a}, {b}) is not an edge; no walk of length {len(walk) - 1} given")


def reachability_construct(graph: Graph, source: int, dest: int, walk: list[int], eps: float) -> Reachability:
    """Sigmoid gates that carry ``x_source`` along ``walk`` to ``dest``.

    At step ``l`` the walk's previous node sends with gate ``1 - e_l`` and
    every other node with ``e_l``. Each ``e_l`` is chosen from the current
    state so the step moves the carried vector by at most
    ``eps / 2**(K - l + 1)`` per component, keeping the total under ``eps``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    walk = [int(w) for w in walk]
    _validate_walk(graph, walk, source, dest)
    steps_k = len(walk) - 1
    h = graph.features.astype(np.float64).copy()
    target = h[source].copy()
    logits, gates, used = [], [], []
    in_nbrs = graph.adjacency_lists()  # symmetric, so out-lists equal in-lists
    for step in range(1, steps_k + 1):
        prev, here = walk[step - 1], walk[step]
        budget = eps / 2.0 ** (steps_k - step + 1)
        # deviation from h[prev] is -e*h[prev] + e*sum(others) in every component
        spread = np.abs(h[prev]) + sum(np.abs(h[w]) for w in in_nbrs[here] if w != prev)
        scale = float(spread.max())
        e = min(0.5, 0.5 * budget / scale) if scale > 0 else 0.5
        logit = np.full(graph.n, math.log(e) - math.log1p(-e))
        logit[prev] = math.log1p(-e) - math.log(e)
        gate = ad.sigmoid(Tensor(logit)).data
        h = filtered_sum_step(graph, h, gate)
        logits.append(logit)
        gates.append(gate)
        used.append(e)
    distance = float(np.abs(h[dest] - target).sum())
    return Reachability(distance, graph.features.shape[1] * eps, logits, gates, used)


def random_walk(graph: Graph, start: int, length: int, rng: np.random.Generator) -> list[int]:
    adj = graph.adjacency_lists()
    walk = [start]
    for _ in range(length):
        walk.append(int(rng.choice(adj[walk[-1]])))
    return walk


def reachability_suite(seed: int = 0, graphs: int = 10, eps_values=(1e-2, 1e-3), max_walk: int = 5,
                   dim: int = 3) -> list[dict]:
    rng = np.random.default_rng([seed, 202])
    results = []
    for i in range(graphs):
        kind = str(rng.choice(GENERATORS))
        n = int(rng.integers(4, 13))
        g = generate_graph(kind, n, [seed, 202, i])
        g.features = rng.normal(0.0, 1.0, (n, dim))
        for eps in eps_values:
            for k in range(1, max_walk + 1):
                v = int(rng.integers(0, n))
                walk = random_walk(g, v, k, rng)
                r = reachability_construct(g, v, walk[-1], walk, eps)
                results.append({"graph": i, "generator": kind, "n": n, "K": k, "eps": eps,
                                "distance": r.distance, "tolerance": r.tolerance, "ok": r.passed})
    return results


# --- depth distribution bounds ---------------------------------------------

def distribution_bounds_suite(seed: int = 0, n_dfn: int = 200, n_mixture: int = 100) -> list[dict]:
    """Gaussian lower bound <= scanned quantile <= Chernoff upper bound, and
    binary-search truncation equal to the linear scan."""
    rng = np.random.default_rng([seed, 303])
    results = []

    def check(kind, dist):
        c = dist.quantile
        lo, hi = dist.quantile_bounds()
        scanned = scan_quantile(dist, c)
        searched = dist._quantile()
        results.append({"kind": kind, "params": dist.describe(), "c": c, "lower": lo, "quantile": scanned,
                        "upper": hi, "search": searched,
                        "ok": lo <= scanned <= hi and searched == scanned})

    for _ in range(n_dfn):
        c = float(rng.choice([0.5, 0.9, 0.95, 0.99, 0.999])) if rng.random() < 0.5 else float(rng.uniform(0.05, 0.999))
        check("dfn", DiscreteFoldedNormal(float(rng.uniform(-20, 40)), float(np.exp(rng.uniform(-3, 3))), quantile=c))
    for _ in range(n_mixture):
        c = float(rng.uniform(0.05, 0.999))
        mus = rng.uniform(-10, 40, 2)
        sigmas = np.exp(rng.uniform(-3, 2.5, 2))
        check("mixture", MixtureDFN(tuple(mus), tuple(sigmas), logits=tuple(rng.normal(0, 1.5, 2)), quantile=c))
    return results


__all__ = [
    "dirichlet_energy", "layer_jacobians", "sensitivity", "sensitivity_matrix", "layerwise_sensitivity",
    "filter_stats", "FilterStats", "diagnose", "DiagnosticsReport", "LinearFilteredMP",
    "SensitivityBoundInputs", "sensitivity_bound", "measure_constants", "input_sensitivity", "verify_bound",
    "random_linear_model", "sensitivity_bound_suite", "reachability_construct", "random_walk", "reachability_suite",
    "distribution_bounds_suite", "dfn_quantile_bounds",
]
