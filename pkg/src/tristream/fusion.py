"""Stream fusion and prediction heads.

Node embeddings from the three streams are concatenated at fixed offsets; all
heads read the fused vector only through those slices, so zeroing a slice at
the fusion boundary is exactly equivalent to removing that stream's
contribution. The energy head sums per-atom contributions, which makes the
total energy size-extensive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import basis, nn
from .autodiff import ParameterStore, Tensor

N_ELEMENT_CLASSES = 100


@dataclass
class HeadConfig:
    hidden: int = 128
    n_hidden: int = 2
    mode: str = "mlp"  # "mlp" | "additive" | "one_hidden"
    one_hidden_width: int = 4  # hidden width m of the diagnostic head

    def __post_init__(self):
        if self.mode not in ("mlp", "additive", "one_hidden"):
            raise ValueError(f"unknown energy head mode: {self.mode!r}")


@dataclass
class StreamEmbeddings:
    """Per-node and pooled stream blocks plus their concatenation."""

    node_comp: Tensor
    node_struct: Tensor
    node_int: Tensor
    fused: Tensor
    pooled_comp: Tensor
    pooled_struct: Tensor
    pooled_int: Tensor
    pooled: Tensor
    offsets: dict[str, slice]

    def stream_slice(self, name: str) -> slice:
        return self.offsets[name]


def stream_offsets(d_comp: int, d_struct: int, d_int: int) -> dict[str, slice]:
    return {
        "comp": slice(0, d_comp),
        "struct": slice(d_comp, d_comp + d_struct),
        "int": slice(d_comp + d_struct, d_comp + d_struct + d_int),
    }


def init_head_params(store: ParameterStore, rng: np.random.Generator, cfg) -> None:
    """``cfg`` is the full ModelConfig (widths come from the streams)."""
    d_comp, d_struct, d_int = cfg.comp.d_comp, cfg.struct.d_struct, cfg.inter.d_int
    fused = d_comp + d_struct + d_int
    h, nh = cfg.head.hidden, cfg.head.n_hidden
    if cfg.head.mode == "mlp":
        nn.init_mlp(store, rng, "head.energy", [fused] + [h] * nh + [1])
    elif cfg.head.mode == "additive":
        nn.init_mlp(store, rng, "head.energy_geom", [d_struct + d_int] + [h] * nh + [1])
        nn.init_mlp(store, rng, "head.energy_cf", [d_comp] + [h] * nh + [1])
    else:  # one_hidden: E_i = v . silu(Wc h_comp_pooled + Wg h_geom_i + b)
        m = cfg.head.one_hidden_width
        store.add("head.oh.wc", rng.normal(scale=1.0 / np.sqrt(d_comp), size=(m, d_comp)))
        store.add("head.oh.wg", rng.normal(scale=1.0 / np.sqrt(d_struct + d_int),
                                           size=(m, d_struct + d_int)))
        store.add("head.oh.v", rng.normal(scale=1.0, size=(m,)))
        store.add("head.oh.b", rng.normal(scale=0.3, size=(m,)))
    edge_width = cfg.inter.edge_width
    nn.init_mlp(store, rng, "head.force_direct", [2 * fused + edge_width] + [h] * nh + [1])
    nn.init_mlp(store, rng, "head.noise", [2 * fused + edge_width] + [h] * nh + [1])
    nn.init_mlp(store, rng, "head.mask", [fused] + [h] * nh + [N_ELEMENT_CLASSES])


def energy(p: dict[str, Tensor], cfg, emb: StreamEmbeddings, struct_ids: np.ndarray,
           n_structures: int) -> Tensor:
    """Per-structure total energies (eV) as sums of per-atom contributions."""
    fused = emb.fused
    nh = cfg.head.n_hidden
    if cfg.head.mode == "mlp":
        per_atom = nn.mlp(p, "head.energy", fused, nh + 1)
    elif cfg.head.mode == "additive":
        geom_in = fused[:, emb.offsets["struct"].start:]
        cf_in = fused[:, emb.offsets["comp"]]
        per_atom = nn.mlp(p, "head.energy_geom", geom_in, nh + 1) \
            + nn.mlp(p, "head.energy_cf", cf_in, nh + 1)
    else:
        comp_rows = emb.pooled[:, emb.offsets["comp"]][struct_ids]
        geom_in = fused[:, emb.offsets["struct"].start:]
        a = comp_rows @ p["head.oh.wc"].transpose((1, 0)) \
            + geom_in @ p["head.oh.wg"].transpose((1, 0)) + p["head.oh.b"]
        per_atom = (ad.silu(a) * p["head.oh.v"]).sum(axis=1, keepdims=True)
    return ad.segment_sum(per_atom, struct_ids, n_structures).reshape(n_structures)


def _pairwise_directional(p: dict[str, Tensor], cfg, emb: StreamEmbeddings, graph,
                          positions: Tensor, shift_offsets: np.ndarray,
                          head_name: str) -> Tensor:
    """Sum over a node's neighborhood of scalar weights times unit directions.

    Rotation-equivariant by construction: the weight is invariant and the
    direction co-rotates. The invariant streams cannot emit vectors natively,
    so vector-valued outputs are assembled this way.
    """
    from .structstream import edge_geometry

    n = graph.n_nodes
    if graph.n_edges == 0:
        return Tensor(np.zeros((n, 3)))
    _, dist, unit = edge_geometry(positions, graph, shift_offsets)
    edge_feats = basis.multiscale_features(cfg.inter.radial_spec, cfg.inter.cutoff_bank, dist)
    pair_in = ad.concat([emb.fused[graph.src], emb.fused[graph.dst], edge_feats], axis=1)
    w = nn.mlp(p, head_name, pair_in, cfg.head.n_hidden + 1)
    return ad.segment_sum(unit * w, graph.src, n)


def forces_direct(p, cfg, emb: StreamEmbeddings, graph, positions: Tensor,
                  shift_offsets: np.ndarray) -> Tensor:
    return _pairwise_directional(p, cfg, emb, graph, positions, shift_offsets,
                                 "head.force_direct")


def predict_noise(p, cfg, emb: StreamEmbeddings, graph, positions: Tensor,
                  shift_offsets: np.ndarray) -> Tensor:
    return _pairwise_directional(p, cfg, emb, graph, positions, shift_offsets, "head.noise")


def predict_masked_elements(p, cfg, emb: StreamEmbeddings, node_idx: np.ndarray) -> Tensor:
    """Logits over the 100 element classes at the given (masked) nodes."""
    rows = emb.fused[np.asarray(node_idx, dtype=np.int64)]
    return nn.mlp(p, "head.mask", rows, cfg.head.n_hidden + 1)
