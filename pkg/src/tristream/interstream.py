"""Minimal invariant interaction GNN: the stream that sees both species and
positions.

A purely invariant backbone keeps the build self-contained while preserving
the contract that this stream has full access to chemistry and geometry.
Alternative backbones can be registered by name and swapped in via config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import basis, nn
from .autodiff import ParameterStore, Tensor
from .basis import CutoffBank, RadialBasisSpec
from .structdata import NeighborGraph


@dataclass
class InterStreamConfig:
    d_int: int = 128
    n_layers: int = 3
    r_cut: float = 6.0
    n_radial: int = 8
    scales: tuple = (0.5, 0.75, 1.0)
    backbone: str = "invariant_gnn"
    vocab: int = 100

    def __post_init__(self):
        if self.d_int < 1 or self.n_layers < 1:
            raise ValueError("d_int and n_layers must be positive")

    @property
    def radial_spec(self) -> RadialBasisSpec:
        return RadialBasisSpec("bessel", self.n_radial, self.r_cut)

    @property
    def cutoff_bank(self) -> CutoffBank:
        return CutoffBank(self.scales)

    @property
    def edge_width(self) -> int:
        return self.n_radial * len(self.scales)


_BACKBONES: dict[str, tuple] = {}


def register_backbone(name: str, init_fn, forward_fn) -> None:
    """Register an alternative interaction stream: any pair of functions with
    the signatures of ``init_inter_params`` / ``inter_forward``."""
    _BACKBONES[name] = (init_fn, forward_fn)


def get_backbone(name: str) -> tuple:
    if name not in _BACKBONES:
        raise KeyError(f"unknown interaction backbone {name!r}; "
                       f"registered: {sorted(_BACKBONES)}")
    return _BACKBONES[name]


def init_inter_params(store: ParameterStore, rng: np.random.Generator,
                      cfg: InterStreamConfig, prefix: str = "inter") -> None:
    d = cfg.d_int
    store.add(f"{prefix}.embed", rng.normal(scale=1.0, size=(cfg.vocab + 1, d)))
    for layer in range(cfg.n_layers):
        base = f"{prefix}.layer{layer}"
        nn.init_mlp(store, rng, f"{base}.msg", [2 * d + cfg.edge_width, d, d])
        nn.init_mlp(store, rng, f"{base}.upd", [2 * d, d, d])


def inter_forward(p: dict[str, Tensor], cfg: InterStreamConfig, species: np.ndarray,
                  positions: Tensor, graph: NeighborGraph, shift_offsets: np.ndarray,
                  prefix: str = "inter") -> Tensor:
    """Per-node embedding (n_nodes, d_int); invariant to rotations and
    translations, dependent on species. Species id 0 selects the mask row."""
    from .structstream import edge_geometry  # shared displacement computation

    n = graph.n_nodes
    h = p[f"{prefix}.embed"][np.asarray(species, dtype=np.int64)]
    _, dist, _ = edge_geometry(positions, graph, shift_offsets)
    edge_feats = basis.multiscale_features(cfg.radial_spec, cfg.cutoff_bank, dist)
    envelope = basis.eval_cutoff(cfg.r_cut, dist)
    denom = ad.segment_sum(envelope.reshape(-1, 1), graph.src, n)
    has_neighbors = (denom.data > 0.0).astype(np.float64)
    inv = Tensor(has_neighbors) / (denom + Tensor(1.0 - has_neighbors))
    for layer in range(cfg.n_layers):
        base = f"{prefix}.layer{layer}"
        msg_in = ad.concat([h[graph.src], h[graph.dst], edge_feats], axis=1)
        msg = nn.mlp(p, f"{base}.msg", msg_in, 2)
        agg = ad.segment_sum(msg * envelope.reshape(-1, 1), graph.src, n) * inv
        h = h + nn.mlp(p, f"{base}.upd", ad.concat([h, agg], axis=1), 2)
    return h


register_backbone("invariant_gnn", init_inter_params, inter_forward)
