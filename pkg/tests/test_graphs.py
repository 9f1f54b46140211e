import itertools

import networkx as nx
import numpy as np
import pytest

from amp.graphs import (
    GENERATORS,
    Dataset,
    DisconnectedGraphError,
    Graph,
    GraphBatch,
    TaskSpec,
    all_pairs_distances,
    bfs_distances,
    build_dataset,
    compute_targets,
    diameter,
    eccentricities,
    from_undirected,
    generate_graph,
    is_connected,
    sssp_source,
)


def to_nx(g: Graph) -> nx.Graph:
    G = nx.Graph()
    G.add_nodes_from(range(g.n))
    G.add_edges_from(map(tuple, g.edges.tolist()))
    return G


@pytest.mark.parametrize("kind", GENERATORS)
def test_generators_are_connected_symmetric_and_match_networkx(kind):
    for seed in range(5):
        n = 25 + seed * 2
        g = generate_graph(kind, n, [seed, 9])
        assert g.n == n and is_connected(g) and g.is_symmetric()
        assert not np.any(g.src == g.dst)
        G = to_nx(g)
        assert nx.is_connected(G)
        dist = all_pairs_distances(g)
        ref = dict(nx.all_pairs_shortest_path_length(G))
        for u in range(n):
            for v in range(n):
                assert dist[u, v] == ref[u][v]
        assert diameter(g) == nx.diameter(G)
        ecc = nx.eccentricity(G)
        np.testing.assert_array_equal(eccentricities(g), [ecc[v] for v in range(n)])


@pytest.mark.parametrize("n", range(2, 9))
def test_closed_forms_on_small_families(n):
    line = generate_graph("line", n, 0)
    assert diameter(line) == n - 1
    np.testing.assert_array_equal(bfs_distances(line, 0), np.arange(n))
    star = generate_graph("star", n, 0)
    assert diameter(star) == min(2, n - 1)
    np.testing.assert_array_equal(eccentricities(star), [1] + [min(2, n - 1)] * (n - 1))
    cycle = generate_graph("cycle", n, 0)
    assert diameter(cycle) == n // 2
    complete = generate_graph("complete", n, 0)
    assert diameter(complete) == 1
    assert len(complete.edges) == n * (n - 1)


def test_grid_layout():
    g = generate_graph("grid", 12, 0)  # 3 x 4
    assert diameter(g) == 2 + 3


def test_generation_is_deterministic():
    a = generate_graph("erdos_renyi", 30, [4, 2], TaskSpec("sssp"))
    b = generate_graph("erdos_renyi", 30, [4, 2], TaskSpec("sssp"))
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.features, b.features)
    c = generate_graph("erdos_renyi", 30, [4, 3], TaskSpec("sssp"))
    assert not np.array_equal(a.features, c.features)


def test_disconnected_inputs_are_rejected():
    g = from_undirected(4, [(0, 1), (2, 3)])
    assert not is_connected(g)
    with pytest.raises(DisconnectedGraphError):
        bfs_distances(g, 0)
    np.testing.assert_array_equal(bfs_distances(g, 0, strict=False), [0, 1, 4, 4])
    with pytest.raises(ValueError):
        Graph(2, np.array([[0, 2]]), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        TaskSpec("pagerank")


def test_sssp_targets():
    g = generate_graph("caterpillar", 20, 3, TaskSpec("sssp"))
    compute_targets(g, TaskSpec("sssp"))
    s = sssp_source(g)
    assert g.node_targets[s, 0] == 0.0
    ref = nx.single_source_shortest_path_length(to_nx(g), s)
    np.testing.assert_array_equal(g.node_targets[:, 0], [ref[v] for v in range(g.n)])


def test_dataset_protocol_and_round_trip(tmp_path):
    ds = build_dataset("eccentricity", (6, 2, 3), seed=5, n_range=(8, 10))
    assert ds.sizes == (6, 2, 3)
    for g in ds.train + ds.val + ds.test:
        assert 8 <= g.n <= 10 and is_connected(g)
    ds.save(tmp_path)
    back = Dataset.load(tmp_path)
    assert back.sizes == ds.sizes and back.task == ds.task
    for a, b in zip(ds.train, back.train):
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.node_targets, b.node_targets)
    again = build_dataset("eccentricity", (6, 2, 3), seed=5, n_range=(8, 10))
    for a, b in zip(ds.test, again.test):
        assert a.to_json() == b.to_json()


def test_dataset_argument_errors():
    with pytest.raises(ValueError):
        build_dataset("diameter", (1, 0, 1))
    with pytest.raises(ValueError):
        build_dataset("diameter", (1, 1, 1), generator_mix=["hypercube"])
    with pytest.raises(ValueError):
        build_dataset("diameter", (1, 1, 1), generator_mix=[])


def test_batch_offsets_and_gcn_norm():
    graphs = [generate_graph("line", 3, 0), generate_graph("star", 4, 0)]
    for g in graphs:
        compute_targets(g, TaskSpec("diameter"))
    b = GraphBatch.from_graphs(graphs)
    assert b.n == 7 and b.num_graphs == 2 and b.level == "graph"
    np.testing.assert_array_equal(b.node_graph, [0, 0, 0, 1, 1, 1, 1])
    assert set(map(tuple, np.stack([b.src, b.dst], 1).tolist())) >= {(3, 4), (4, 3), (0, 1)}
    np.testing.assert_array_equal(b.targets[:, 0], [2.0, 2.0])
    deg = np.array([1, 2, 1, 3, 1, 1, 1]) + 1.0
    np.testing.assert_allclose(b.gcn_norm, 1 / np.sqrt(deg[b.src] * deg[b.dst]))
    np.testing.assert_array_equal(b.target_owner(), [0, 1])


def test_all_small_connected_graphs_against_networkx():
    """Exhaustive over every labelled graph on 5 nodes."""
    pairs = list(itertools.combinations(range(5), 2))
    checked = 0
    for mask in range(1 << len(pairs)):
        chosen = [p for i, p in enumerate(pairs) if mask >> i & 1]
        g = from_undirected(5, chosen)
        G = to_nx(g)
        assert is_connected(g) == nx.is_connected(G)
        if nx.is_connected(G):
            assert diameter(g) == nx.diameter(G)
            checked += 1
    assert checked == 728
