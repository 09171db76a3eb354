"""Spatial-temporal sequential hypergraph forecaster built on :mod:`stshn.diffcore`.

Embeddings are laid out ``[region, slot, category, hidden]`` throughout.
Parameters live in a plain ``dict[str, np.ndarray]``:

    embed                 (C, d)       per-category embedding vectors
    spatial.{l}.{q,k,v}   (H, d/H, d)  routing projections of spatial layer l
    temporal.{l}.{q,k,v}  (H, d/H, d)  routing projections of temporal layer l
    hyper.psi             (E_h, R)     region-hyperedge incidence
    readout               (C, d)       per-category prediction vectors
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .graphs import RegionGraph, ShiftGraph, build_shift_graph

DEGREE_FLOOR = 1e-8
PROJECTIONS = ("q", "k", "v")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    d: int = 16
    heads: int = 4
    spatial_layers: int = 2
    temporal_layers: int = 7
    hyperedges: int = 128
    scale: int = 3
    window: int = 30
    hypergraph: bool = True

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.hyperedges <= 0 or self.window <= 0:
            raise ConfigError("d, heads, hyperedges and window must be positive")
        if self.spatial_layers < 0 or self.temporal_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.d % self.heads:
            raise ConfigError(f"hidden size {self.d} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


ModelParams = dict  # name -> np.ndarray


def param_shapes(hp: Hyperparams, n_regions: int, n_categories: int) -> dict[str, tuple[int, ...]]:
    shapes = {"embed": (n_categories, hp.d)}
    for stack, depth in (("spatial", hp.spatial_layers), ("temporal", hp.temporal_layers)):
        for layer in range(depth):
            for p in PROJECTIONS:
                shapes[f"{stack}.{layer}.{p}"] = (hp.heads, hp.head_dim, hp.d)
    shapes["hyper.psi"] = (hp.hyperedges, n_regions)
    shapes["readout"] = (n_categories, hp.d)
    return shapes


def init_params(hp: Hyperparams, n_regions: int, n_categories: int, seed: int = 0) -> ModelParams:
    """Glorot-uniform projections and embeddings, Psi ~ U[0, 1/sqrt(R)], zero readout."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(hp, n_regions, n_categories).items():
        if name == "hyper.psi":
            params[name] = rng.uniform(0.0, 1.0 / math.sqrt(n_regions), size=shape)
        elif name == "readout":
            params[name] = np.zeros(shape)
        else:
            fan = shape[-1] + shape[-2]
            limit = math.sqrt(6.0 / fan)
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def check_params(params: ModelParams, hp: Hyperparams, n_regions: int, n_categories: int) -> None:
    expected = param_shapes(hp, n_regions, n_categories)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter names differ from configuration (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, configuration needs {shape}")


@dataclass(frozen=True)
class EdgeList:
    """Directed message edges: target ``dst`` receives from ``src`` with ``weight``."""

    dst: np.ndarray
    src: np.ndarray
    weight: np.ndarray

    @classmethod
    def from_matrix(cls, W) -> "EdgeList":
        W = np.asarray(W, dtype=np.float64)
        dst, src = np.nonzero(W)
        return cls(dst, src, W[dst, src])


@dataclass(frozen=True)
class Topology:
    n_regions: int
    spatial: EdgeList
    temporal: EdgeList

    @classmethod
    def from_graphs(cls, region: RegionGraph, shift: ShiftGraph | None = None) -> "Topology":
        shift = shift if shift is not None else build_shift_graph(region)
        return cls(region.R, EdgeList.from_matrix(region.A_norm), EdgeList.from_matrix(shift.gamma_norm))


@dataclass
class Relevance:
    """Attention tensors and incidence captured during one forward pass.

    ``spatial[l]`` / ``temporal[l]`` have shape (edges, slots, heads, C, C).
    """

    spatial: list[np.ndarray] = field(default_factory=list)
    temporal: list[np.ndarray] = field(default_factory=list)
    spatial_edges: EdgeList | None = None
    temporal_edges: EdgeList | None = None
    incidence: np.ndarray | None = None

    @staticmethod
    def head_summary(alpha: np.ndarray) -> np.ndarray:
        """Mean attention per (head, target category, source category)."""
        if alpha.shape[0] == 0:
            return np.zeros(alpha.shape[2:])
        return alpha.mean(axis=(0, 1))


def _project(E: dc.Node, W: dc.Node) -> dc.Node:
    # (n, t, C, d) x (H, dk, d) -> (n, t, H, C, dk)
    return dc.einsum("ntcd,hkd->nthck", E, W)


def _route(q: dc.Node, k: dc.Node, v: dc.Node):
    """Attention of target categories over source categories, per head.

    Inputs are projected (pairs, slots, H, C, dk); returns concatenated-head
    messages (pairs, slots, C, H*dk) and attention (pairs, slots, H, C, C).
    """
    n, t, H, C, dk = q.shape
    score = dc.scale(dc.bmm(q, k, transpose_b=True), 1.0 / math.sqrt(dk))
    alpha = dc.softmax_lastdim(score)
    msg = dc.transpose(dc.bmm(alpha, v), (0, 1, 3, 2, 4))
    return dc.reshape(msg, (n, t, C, H * dk)), alpha


def mc_rout(e_tgt: dc.Node, e_src: dc.Node, Q: dc.Node, K: dc.Node, V: dc.Node):
    """Multi-head cross-category routing for a batch of (target, source) pairs.

    ``e_tgt`` and ``e_src`` are (pairs, slots, C, d). For each head the target
    category queries every source category; the softmax weights mix the value
    projections, and the heads are concatenated back to width d.
    Returns the messages (pairs, slots, C, d) and the attention node
    (pairs, slots, H, C, C).
    """
    d = Q.shape[-1]
    if e_tgt.shape[-1] != d or e_src.shape[-1] != d:
        raise ConfigError(f"embedding width {e_tgt.shape[-1]} does not match projections ({d})")
    return _route(_project(e_tgt, Q), _project(e_src, K), _project(e_src, V))


def _propagate(e_tgt: dc.Node, e_src: dc.Node, edges: EdgeList, n_regions: int,
               params, prefix: str):
    """ReLU of the weighted sum of routed messages arriving at each region."""
    Q, K, V = (params[f"{prefix}.{p}"] for p in PROJECTIONS)
    # project once per region, then fan out along edges
    q = dc.take_rows(_project(e_tgt, Q), edges.dst)
    k = dc.take_rows(_project(e_src, K), edges.src)
    v = dc.take_rows(_project(e_src, V), edges.src)
    msg, alpha = _route(q, k, v)
    return dc.relu(dc.scatter_rows(msg, edges.dst, n_regions, edges.weight)), alpha


def spatial_layer(E: dc.Node, topo: Topology, params, layer: int):
    """One round of neighbor aggregation, applied to every slot with shared weights."""
    return _propagate(E, E, topo.spatial, topo.n_regions, params, f"spatial.{layer}")


def normalized_incidence(psi: dc.Node) -> dc.Node:
    """D_E^-1/2 Psi D_R^-1/2 with degrees from |Psi|, floored at 1e-8."""
    mag = dc.absolute(psi)
    d_edge = dc.power(dc.clip(dc.sum_over_axis(mag, 1), DEGREE_FLOOR, np.inf), -0.5)
    d_region = dc.power(dc.clip(dc.sum_over_axis(mag, 0), DEGREE_FLOOR, np.inf), -0.5)
    return dc.einsum("e,er,r->er", d_edge, psi, d_region)


def hypergraph_layer(E: dc.Node, psi_norm: dc.Node) -> dc.Node:
    """Regions -> hyperedges -> regions, ReLU after each hop."""
    hub = dc.relu(dc.einsum("er,rtcd->etcd", psi_norm, E))
    return dc.relu(dc.einsum("er,etcd->rtcd", psi_norm, hub))


def temporal_shift_layer(E: dc.Node, topo: Topology, params, layer: int):
    """Update slot t+1 from slot t over the shift graph; slot 0 passes through."""
    T = E.shape[1]
    if T < 2:
        raise ConfigError("temporal shift needs at least 2 slots")
    later = dc.slice_axis(E, 1, T, axis=1)
    earlier = dc.slice_axis(E, 0, T - 1, axis=1)
    shifted, alpha = _propagate(later, earlier, topo.temporal, topo.n_regions, params, f"temporal.{layer}")
    return dc.concat([dc.slice_axis(E, 0, 1, axis=1), shifted], axis=1), alpha


def embed(x_window: dc.Node, category_embed: dc.Node) -> dc.Node:
    """Scale each category's embedding vector by the normalized count."""
    return dc.einsum("rtc,cd->rtcd", x_window, category_embed)


@dataclass
class ForwardResult:
    output: dc.Node  # (R, C)
    relevance: Relevance
    final_embedding: dc.Node  # (R, C, d)

    @property
    def predictions(self) -> np.ndarray:
        return self.output.value


def forward_graph(x_window, params, hp: Hyperparams, topo: Topology,
                  mode: str = "classification") -> ForwardResult:
    """Build the forward tape. ``params`` values may be arrays or nodes."""
    if mode not in ("classification", "regression"):
        raise ConfigError(f"unknown mode {mode!r}")
    nodes = {k: v if isinstance(v, dc.Node) else dc.constant(v) for k, v in params.items()}
    x = x_window if isinstance(x_window, dc.Node) else dc.constant(x_window)
    if x.value.ndim != 3 or x.shape[0] != topo.n_regions or x.shape[2] != nodes["embed"].shape[0]:
        raise ConfigError(f"window shape {x.shape} does not match {topo.n_regions} regions "
                          f"and {nodes['embed'].shape[0]} categories")
    if not np.all(np.isfinite(x.value)):
        raise ConfigError("window contains non-finite values")
    rel = Relevance(spatial_edges=topo.spatial, temporal_edges=topo.temporal,
                    incidence=nodes["hyper.psi"].value)

    E = embed(x, nodes["embed"])
    levels = [E]
    psi_norm = normalized_incidence(nodes["hyper.psi"]) if hp.hypergraph and hp.spatial_layers else None
    for layer in range(hp.spatial_layers):
        nxt, alpha = spatial_layer(E, topo, nodes, layer)
        rel.spatial.append(alpha.value)
        if psi_norm is not None:
            nxt = dc.add(nxt, hypergraph_layer(E, psi_norm))
        E = nxt
        levels.append(E)
    E = dc.add_n(levels)

    levels = [E]
    for layer in range(hp.temporal_layers):
        E, alpha = temporal_shift_layer(E, topo, nodes, layer)
        rel.temporal.append(alpha.value)
        levels.append(E)
    E = dc.add_n(levels)

    final = dc.sum_over_axis(E, 1)
    score = dc.einsum("rcd,cd->rc", final, nodes["readout"])
    out = dc.sigmoid(score) if mode == "classification" else score
    return ForwardResult(out, rel, final)


def forward(x_window, params: ModelParams, hp: Hyperparams, topo: Topology,
            mode: str = "classification") -> tuple[np.ndarray, Relevance]:
    res = forward_graph(x_window, params, hp, topo, mode)
    return res.output.value, res.relevance
