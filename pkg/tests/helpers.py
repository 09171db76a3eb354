import numpy as np

from stshn.graphs import build_region_graph, build_shift_graph, from_adjacency
from stshn.model import Hyperparams, Topology, init_params


def instance(grid=(1, 3), C=2, T=4, hp=None, seed=0, adjacency=None, random_readout=True):
    """Random window, parameters and graphs for a small model."""
    hp = hp or Hyperparams(d=4, heads=2, spatial_layers=2, temporal_layers=2, hyperedges=2, window=T)
    rng = np.random.default_rng(seed)
    region = from_adjacency(adjacency) if adjacency is not None else build_region_graph(grid, hp.scale)
    shift = build_shift_graph(region)
    R = region.R
    params = init_params(hp, R, C, seed)
    if random_readout:
        params["readout"] = rng.normal(size=params["readout"].shape)
    x = rng.normal(size=(R, T, C))
    return x, params, hp, Topology.from_graphs(region, shift), region, shift
