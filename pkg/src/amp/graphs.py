"""Synthetic long-range graph tasks: generators, BFS targets, datasets.

Graphs are undirected and stored with both edge orientations. Targets are
exact hop distances, left unnormalized.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

GENERATORS = ("erdos_renyi", "barabasi_albert", "grid", "line", "star", "cycle", "caterpillar", "complete")
TASKS = ("diameter", "sssp", "eccentricity")
MAX_CONNECT_ATTEMPTS = 100

FULL_SIZES = (5120, 640, 1280)
DESK_SIZES = (512, 64, 128)
PRESETS = {"paper": FULL_SIZES, "desk": DESK_SIZES}


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASKS}")

    @property
    def level(self) -> str:
        return "graph" if self.kind == "diameter" else "node"

    @property
    def feature_dim(self) -> int:
        return 2 if self.kind == "sssp" else 1

    @property
    def target_dim(self) -> int:
        return 1


@dataclass
class Graph:
    n: int
    edges: np.ndarray  # (E, 2) int64, row (u, v) is a message u -> v
    features: np.ndarray  # (n, f)
    node_targets: np.ndarray | None = None  # (n, t)
    graph_target: np.ndarray | None = None  # (t,)
    generator: str = ""
    seed: int = 0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(self.n, -1)
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise ValueError("edge endpoint outside [0, n)")

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    def adjacency_lists(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[int(u)].append(int(v))
        return adj

    def is_symmetric(self) -> bool:
        fwd = {(int(u), int(v)) for u, v in self.edges}
        return all((v, u) in fwd for u, v in fwd)

    def to_json(self) -> str:
        rec = {
            "n": self.n,
            "edges": self.edges.tolist(),
            "features": self.features.tolist(),
            "targets": (
                self.node_targets.tolist() if self.node_targets is not None
                else self.graph_target.tolist() if self.graph_target is not None
                else None
            ),
            "target_level": "node" if self.node_targets is not None else "graph",
            "generator": self.generator,
            "seed": self.seed,
        }
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Graph":
        rec = json.loads(line)
        g = cls(rec["n"], np.array(rec["edges"], dtype=np.int64), np.array(rec["features"]),
                generator=rec.get("generator", ""), seed=rec.get("seed", 0))
        if rec.get("targets") is not None:
            if rec.get("target_level") == "graph":
                g.graph_target = np.array(rec["targets"], dtype=np.float64)
            else:
                g.node_targets = np.array(rec["targets"], dtype=np.float64).reshape(g.n, -1)
        return g


def from_undirected(n: int, pairs: Iterable[tuple[int, int]], features=None, **kw) -> Graph:
    seen = set()
    edges = []
    for u, v in pairs:
        u, v = int(u), int(v)
        if u == v:
            continue
        for a, b in ((u, v), (v, u)):
            if (a, b) not in seen:
                seen.add((a, b))
                edges.append((a, b))
    feats = np.zeros((n, 1)) if features is None else features
    return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), feats, **kw)


def _topology(kind: str, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    nx_seed = int(rng.integers(0, 2**31 - 1))
    if kind == "erdos_renyi":
        p = float(rng.uniform(0.1, 0.3))
        return list(nx.gnp_random_graph(n, p, seed=nx_seed).edges())
    if kind == "barabasi_albert":
        m = int(rng.choice([1, 2]))
        return list(nx.barabasi_albert_graph(n, m, seed=nx_seed).edges())
    if kind == "grid":
        rows = max(1, int(np.floor(np.sqrt(n))))
        cols = int(np.ceil(n / rows))
        pairs = []
        for i in range(n):
            r, c = divmod(i, cols)
            if c + 1 < cols and i + 1 < n:
                pairs.append((i, i + 1))
            if i + cols < n:
                pairs.append((i, i + cols))
        return pairs
    if kind == "line":
        return [(i, i + 1) for i in range(n - 1)]
    if kind == "star":
        return [(0, i) for i in range(1, n)]
    if kind == "cycle":
        return [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(0, 1)][: n - 1]
    if kind == "caterpillar":
        spine = int(rng.integers(max(2, n // 3), max(3, n // 2 + 1)))
        spine = min(spine, n)
        pairs = [(i, i + 1) for i in range(spine - 1)]
        for leaf in range(spine, n):
            pairs.append((int(rng.integers(0, spine)), leaf))
        return pairs
    if kind == "complete":
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    raise ValueError(f"unknown generator {kind!r}; expected one of {GENERATORS}")


def is_connected(g: Graph) -> bool:
    if g.n == 0:
        return True
    return int(np.max(bfs_distances(g, 0, strict=False))) < g.n


def generate_graph(kind: str, n: int, seed, task: TaskSpec | None = None) -> Graph:
    """A connected undirected graph with N(0, 1) node features.

    For SSSP a second feature column flags a uniformly chosen source.
    Random generators that produce a disconnected graph are re-drawn.
    """
    rng = np.random.default_rng(seed)
    for _ in range(MAX_CONNECT_ATTEMPTS):
        pairs = _topology(kind, n, rng)
        g = from_undirected(n, pairs, generator=kind, seed=_seed_tag(seed))
        if is_connected(g):
            break
    else:
        raise DisconnectedGraphError(f"{kind} graph with n={n} still disconnected after {MAX_CONNECT_ATTEMPTS} draws")
    feats = rng.standard_normal((n, 1))
    if task is not None and task.kind == "sssp":
        flag = np.zeros((n, 1))
        flag[int(rng.integers(0, n)), 0] = 1.0
        feats = np.hstack([feats, flag])
    g.features = feats
    return g


def _seed_tag(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def bfs_distances(g: Graph, source: int, strict: bool = True, adj=None) -> np.ndarray:
    """Hop distances from ``source``; unreachable nodes get ``n`` (or raise)."""
    adj = g.adjacency_lists() if adj is None else adj
    dist = np.full(g.n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    if np.any(dist < 0):
        if strict:
            raise DisconnectedGraphError(f"node(s) unreachable from {source}: infinite distance")
        dist[dist < 0] = g.n
    return dist


def all_pairs_distances(g: Graph) -> np.ndarray:
    adj = g.adjacency_lists()
    return np.stack([bfs_distances(g, s, adj=adj) for s in range(g.n)])


def eccentricities(g: Graph) -> np.ndarray:
    return all_pairs_distances(g).max(axis=1)


def diameter(g: Graph) -> int:
    return int(all_pairs_distances(g).max())


def sssp_source(g: Graph) -> int:
    flags = np.flatnonzero(g.features[:, -1] == 1.0)
    if g.features.shape[1] < 2 or flags.size != 1:
        raise ValueError("SSSP graphs need exactly one flagged source in the last feature column")
    return int(flags[0])


def compute_targets(g: Graph, task: TaskSpec) -> Graph:
    if task.kind == "diameter":
        g.graph_target = np.array([float(diameter(g))])
        g.node_targets = None
    elif task.kind == "eccentricity":
        g.node_targets = eccentricities(g).astype(np.float64)[:, None]
        g.graph_target = None
    else:
        g.node_targets = bfs_distances(g, sssp_source(g)).astype(np.float64)[:, None]
        g.graph_target = None
    return g


@dataclass
class Dataset:
    task: TaskSpec
    train: list[Graph]
    val: list[Graph]
    test: list[Graph]
    seed: int = 0
    generator_mix: tuple[str, ...] = GENERATORS
    n_range: tuple[int, int] = (25, 35)
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def manifest(self) -> dict:
        return {
            "task": self.task.kind,
            "sizes": {"train": len(self.train), "val": len(self.val), "test": len(self.test)},
            "seed": self.seed,
            "generator_mix": list(self.generator_mix),
            "n_range": list(self.n_range),
            # the original benchmark's exact generator mix is not published
            "generator_mix_is_stand_in": True,
            **self.meta,
        }

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for split in ("train", "val", "test"):
            with open(directory / f"{split}.jsonl", "w") as fh:
                for g in getattr(self, split):
                    fh.write(g.to_json() + "\n")
        with open(directory / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        splits = {}
        for split in ("train", "val", "test"):
            with open(directory / f"{split}.jsonl") as fh:
                splits[split] = [Graph.from_json(line) for line in fh if line.strip()]
        known = {"task", "sizes", "seed", "generator_mix", "n_range", "generator_mix_is_stand_in"}
        return cls(
            TaskSpec(manifest["task"]), splits["train"], splits["val"], splits["test"],
            seed=manifest["seed"], generator_mix=tuple(manifest["generator_mix"]),
            n_range=tuple(manifest["n_range"]),
            meta={k: v for k, v in manifest.items() if k not in known},
        )


def build_dataset(
    task: TaskSpec | str,
    sizes: Sequence[int] | str = "desk",
    generator_mix: Sequence[str] = GENERATORS,
    seed: int = 0,
    n_range: tuple[int, int] = (25, 35),
) -> Dataset:
    """Generate train/val/test splits; graph ``i`` draws from its own seeded stream."""
    task = TaskSpec(task) if isinstance(task, str) else task
    if isinstance(sizes, str):
        sizes = PRESETS[sizes]
    if len(sizes) != 3 or any(s <= 0 for s in sizes):
        raise ValueError(f"need three positive split sizes, got {sizes}")
    if not generator_mix:
        raise ValueError("generator mix is empty")
    for kind in generator_mix:
        if kind not in GENERATORS:
            raise ValueError(f"unknown generator {kind!r}")
    lo, hi = n_range
    graphs = []
    for i in range(sum(sizes)):
        rng = np.random.default_rng([seed, i])
        kind = generator_mix[int(rng.integers(0, len(generator_mix)))]
        n = int(rng.integers(lo, hi + 1))
        g = generate_graph(kind, n, [seed, i, 1], task)
        g.seed = i
        graphs.append(compute_targets(g, task))
    a, b = sizes[0], sizes[0] + sizes[1]
    return Dataset(task, graphs[:a], graphs[a:b], graphs[b:], seed=seed,
                   generator_mix=tuple(generator_mix), n_range=(lo, hi))


@dataclass
class GraphBatch:
    """Disjoint union of graphs with flat node/edge arrays."""

    n: int
    num_graphs: int
    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    targets: np.ndarray | None
    level: str
    graph_sizes: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], task: TaskSpec | None = None) -> "GraphBatch":
        if not graphs:
            raise ValueError("cannot batch an empty graph list")
        offsets = np.cumsum([0] + [g.n for g in graphs])
        src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)]).astype(np.int64)
        dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]).astype(np.int64)
        node_graph = np.concatenate([np.full(g.n, i, dtype=np.int64) for i, g in enumerate(graphs)])
        feats = np.vstack([g.features for g in graphs])
        level = task.level if task is not None else ("graph" if graphs[0].graph_target is not None else "node")
        targets = None
        if level == "graph" and all(g.graph_target is not None for g in graphs):
            targets = np.vstack([np.atleast_1d(g.graph_target) for g in graphs])
        elif level == "node" and all(g.node_targets is not None for g in graphs):
            targets = np.vstack([g.node_targets for g in graphs])
        return cls(int(offsets[-1]), len(graphs), feats, src, dst, node_graph, targets, level,
                   np.array([g.n for g in graphs]))

    @property
    def gcn_norm(self) -> np.ndarray:
        """Per-edge weight 1/sqrt((deg_u + 1)(deg_v + 1))."""
        if "gcn_norm" not in self._cache:
            deg = np.bincount(self.dst, minlength=self.n).astype(np.float64) + 1.0
            self._cache["gcn_norm"] = 1.0 / np.sqrt(deg[self.src] * deg[self.dst])
        return self._cache["gcn_norm"]

    def target_owner(self) -> np.ndarray:
        """Graph index of every target row."""
        return np.arange(self.num_graphs) if self.level == "graph" else self.node_graph
