"""Unbounded-depth message-passing model with a learnable depth distribution.

Layer 1 is a feature encoder followed by a readout. Every deeper layer
``l`` applies one message-passing step gated by the filter computed from
layer ``l - 1`` and has its own readout. The prediction is the mixture of
the per-layer readouts under the truncated, renormalized depth weights.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, Tensor
from .distributions import (
    DepthDistribution,
    GrowthCapError,
    LayerPrior,
    depth_elbo_terms,
    distribution_from_dict,
)
from .graphs import Graph, GraphBatch
from .mp import MLP, FilterFunction, Module, Readout, make_layer

CHECKPOINT_FORMAT = "amp-checkpoint/1"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, graph_index: int | None):
        super().__init__(message)
        self.graph_index = graph_index


@dataclass
class ModelSpec:
    input_dim: int
    target_dim: int = 1
    level: str = "graph"
    kind: str = "gcn"
    dim: int = 20
    filter_mode: str = "embedding"
    weight_variance: float = 10.0
    seed: int = 0
    max_layers: int = 200
    gin_eps: float = 0.0
    gcn_skip: bool = True
    adgn_step: float = 0.1
    adgn_gamma: float = 0.1


@dataclass
class ElboBreakdown:
    data: Tensor
    depth_entropy: Tensor
    depth_prior: Tensor
    weight_prior: Tensor
    total: Tensor = field(init=False)

    def __post_init__(self):
        self.total = self.data + self.depth_entropy + self.depth_prior + self.weight_prior

    def values(self) -> dict[str, float]:
        return {
            "elbo": self.total.item(),
            "data": self.data.item(),
            "depth_entropy": self.depth_entropy.item(),
            "depth_prior": self.depth_prior.item(),
            "weight_prior": self.weight_prior.item(),
        }


@dataclass
class DepthReport:
    previous: int
    current: int
    appended: list[int] = field(default_factory=list)
    reactivated: list[int] = field(default_factory=list)
    deactivated: list[int] = field(default_factory=list)

    @property
    def changed(self) -> bool:
        return self.previous != self.current

    @property
    def actions(self) -> list[str]:
        out = [f"append layer {i}" for i in self.appended]
        out += [f"reactivate layer {i}" for i in self.reactivated]
        out += [f"retain inactive layer {i}" for i in self.deactivated]
        return out


class LayerBlock(Module):
    """Parameters owned by layer ``index``: MP step, filter and readout."""

    def __init__(self, index: int, mp: Module | None, filter_mlp: MLP | None, readout: Readout):
        self.index = index
        self.mp = mp
        self.filter = filter_mlp
        self.readout = readout

    def parameters(self):
        out = []
        for part in (self.mp, self.filter, self.readout):
            if part is not None:
                out += part.parameters()
        return out


@dataclass
class ForwardResult:
    predictions: list[Tensor]
    embeddings: list[Tensor]
    filters: list[Tensor]


def as_batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, Graph):
        return GraphBatch.from_graphs([graphs])
    return GraphBatch.from_graphs(list(graphs))


class AdaptiveModel:
    def __init__(self, spec: ModelSpec, depth: DepthDistribution, prior: LayerPrior | None = None):
        self.spec = spec
        self.depth = depth
        self.prior = prior or LayerPrior()
        rng = self._layer_rng(0)
        self.encoder = MLP(spec.input_dim, spec.dim, spec.dim, rng, "encoder", "tanh", "tanh")
        self.filter = FilterFunction(spec.filter_mode, spec.input_dim, spec.dim)
        self.blocks: list[LayerBlock] = []
        self.update_depth()

    # structure -----------------------------------------------------------
    def _layer_rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.seed, index])

    def _new_block(self, index: int) -> LayerBlock:
        rng = self._layer_rng(index)
        name = f"layer{index}"
        readout = Readout(self.spec.level, self.spec.dim, self.spec.target_dim, rng, f"{name}.readout")
        if index == 1:
            return LayerBlock(1, None, None, readout)
        mp = make_layer(self.spec.kind, self.spec.dim, rng, f"{name}.mp", gin_eps=self.spec.gin_eps,
                        gcn_skip=self.spec.gcn_skip, adgn_step=self.spec.adgn_step,
                        adgn_gamma=self.spec.adgn_gamma)
        filt = self.filter.add_filter(rng, f"{name}.filter")
        return LayerBlock(index, mp, filt, readout)

    @property
    def support(self) -> int:
        return self.depth._require_support()

    @property
    def instantiated(self) -> int:
        return len(self.blocks)

    def update_depth(self) -> DepthReport:
        """Re-truncate the depth distribution and grow the layer stack if needed.

        Shrinking keeps the excess layers untouched for later reuse.
        """
        previous = self.depth.support if self.blocks else 0
        new = self.depth.truncate()
        if new > self.spec.max_layers:
            self.depth.support = previous or None
            raise GrowthCapError(f"truncated depth {new} exceeds the cap of {self.spec.max_layers} layers")
        report = DepthReport(previous, new)
        while len(self.blocks) < new:
            self.blocks.append(self._new_block(len(self.blocks) + 1))
            report.appended.append(len(self.blocks))
        if previous and new > previous:
            report.reactivated = [i for i in range(previous + 1, new + 1) if i not in report.appended]
        elif previous and new < previous:
            report.deactivated = list(range(new + 1, previous + 1))
        return report

    def layer_parameters(self, index: int) -> list[Parameter]:
        block = self.blocks[index - 1]
        own = block.parameters()
        return self.encoder.parameters() + own if index == 1 else own

    def active_parameters(self) -> list[Parameter]:
        out = []
        for i in range(1, self.support + 1):
            out += self.layer_parameters(i)
        return out + self.depth.parameters()

    def all_parameters(self) -> list[Parameter]:
        out = []
        for i in range(1, self.instantiated + 1):
            out += self.layer_parameters(i)
        return out + self.depth.parameters()

    # evaluation ----------------------------------------------------------
    def forward_all(self, graphs, depth: int | None = None, tap=None) -> ForwardResult:
        """Run layers 1..depth; ``tap(layer, h)`` may wrap each embedding."""
        batch = as_batch(graphs)
        depth = self.support if depth is None else depth
        if not 1 <= depth <= self.instantiated:
            raise ContractError(f"depth {depth} outside the {self.instantiated} instantiated layers")
        x = Tensor(batch.features)
        h = self.encoder(x)
        if tap is not None:
            h = tap(1, h)
        embeddings, predictions, filters = [h], [], []
        predictions.append(self.blocks[0].readout(h, batch.node_graph, batch.num_graphs))
        for block in self.blocks[1:depth]:
            f = None if self.filter.mode == "none" else self.filter(block.index - 2, x, h)
            if f is not None:
                filters.append(f)
            h = block.mp(batch, h, f)
            if tap is not None:
                h = tap(block.index, h)
            embeddings.append(h)
            predictions.append(block.readout(h, batch.node_graph, batch.num_graphs))
        return ForwardResult(predictions, embeddings, filters)

    def predict(self, graphs) -> tuple[np.ndarray, np.ndarray]:
        with ad.no_grad():
            out = self.forward_all(graphs)
            weights = self.depth.renormalized_weights()
            pred = np.zeros_like(out.predictions[0].data)
            for w, y in zip(weights, out.predictions):
                pred = pred + w * y.data
        return pred, weights

    def _weight_prior(self, weights: Tensor) -> Tensor:
        scale = -0.5 / self.spec.weight_variance
        total = Tensor([0.0])
        cumulative = Tensor([0.0])
        for i in range(1, self.support + 1):
            cumulative = cumulative + ad.sum_squares(self.layer_parameters(i))
            total = total + ad.gather(weights, [i - 1]) * cumulative
        return total * scale

    def elbo(self, graphs, data_scale: float = 1.0) -> ElboBreakdown:
        """Evidence lower bound at the weight means.

        ``data_scale`` rescales the likelihood term when ``graphs`` is a
        minibatch drawn from a larger training set.
        """
        batch = as_batch(graphs)
        if batch.targets is None:
            raise ContractError("elbo needs targets on every graph")
        out = self.forward_all(batch)
        weights = self.depth.layer_weights()
        target = Tensor(batch.targets)
        data = Tensor([0.0])
        for i, y in enumerate(out.predictions):
            sse = ad.square(y - target).sum()
            if not np.isfinite(sse.data[0]):
                raise NonFiniteLossError(f"non-finite loss at layer {i + 1}", self._offending_graph(batch, y.data))
            data = data + ad.gather(weights, [i]) * sse
        data = data * (-0.5 * data_scale)
        entropy, cross = depth_elbo_terms(self.depth, self.prior)
        result = ElboBreakdown(data, entropy, cross, self._weight_prior(weights))
        if not np.isfinite(result.total.data[0]):
            raise NonFiniteLossError("non-finite ELBO", self._offending_graph(batch, None))
        return result

    @staticmethod
    def _offending_graph(batch: GraphBatch, pred: np.ndarray | None) -> int | None:
        owner = batch.target_owner()
        if pred is not None:
            bad = ~np.isfinite(pred).all(axis=1)
            if bad.any():
                return int(owner[np.flatnonzero(bad)[0]])
        bad = ~np.isfinite(batch.features).all(axis=1)
        if bad.any():
            return int(batch.node_graph[np.flatnonzero(bad)[0]])
        return None

    # persistence ---------------------------------------------------------
    def to_dict(self, extra: dict | None = None) -> dict:
        params = {}
        for p in self.all_parameters():
            params[p.name] = encode_array(p.data)
        return {
            "format": CHECKPOINT_FORMAT,
            "spec": asdict(self.spec),
            "instantiated": self.instantiated,
            "depth": self.depth.to_dict(),
            "prior": self.prior.to_dict(),
            "parameters": params,
            **(extra or {}),
        }

    def save(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(extra), fh, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptiveModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"unsupported checkpoint format {d.get('format')!r}")
        depth = distribution_from_dict(d["depth"])
        support = depth.support
        model = cls(ModelSpec(**d["spec"]), depth, LayerPrior.from_dict(d["prior"]))
        while model.instantiated < d["instantiated"]:
            model.blocks.append(model._new_block(model.instantiated + 1))
        depth.support = support
        for p in model.all_parameters():
            p.data[...] = decode_array(d["parameters"][p.name])
        return model

    @classmethod
    def load(cls, path) -> "AdaptiveModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()
