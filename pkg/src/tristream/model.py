"""Three-stream model assembly: batching, encoding, and conservative forces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import compstream, fusion, structstream
from .autodiff import ParameterStore, Tensor, grad
from .compstream import CompStreamConfig
from .fusion import HeadConfig, StreamEmbeddings, stream_offsets
from .interstream import InterStreamConfig, get_backbone
from .structdata import AtomicStructure, NeighborGraph, build_graph
from .structstream import StructStreamConfig

ALL_STREAMS = ("comp", "struct", "int")


@dataclass
class ModelConfig:
    comp: CompStreamConfig = field(default_factory=CompStreamConfig)
    struct: StructStreamConfig = field(default_factory=StructStreamConfig)
    inter: InterStreamConfig = field(default_factory=InterStreamConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    streams: tuple = ALL_STREAMS
    graph_cutoff: float = 6.0
    max_neighbors: int = 64

    def __post_init__(self):
        unknown = set(self.streams) - set(ALL_STREAMS)
        if unknown:
            raise ValueError(f"unknown streams: {sorted(unknown)}")
        self.streams = tuple(self.streams)

    @property
    def fused_width(self) -> int:
        return self.comp.d_comp + self.struct.d_struct + self.inter.d_int

    @property
    def offsets(self) -> dict[str, slice]:
        return stream_offsets(self.comp.d_comp, self.struct.d_struct, self.inter.d_int)


def init_model_params(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    store = ParameterStore(seed=seed)
    rng = np.random.default_rng(seed)
    compstream.init_comp_params(store, rng, cfg.comp)
    structstream.init_struct_params(store, rng, cfg.struct)
    init_inter, _ = get_backbone(cfg.inter.backbone)
    init_inter(store, rng, cfg.inter)
    fusion.init_head_params(store, rng, cfg)
    return store


@dataclass
class Batch:
    """Structures concatenated into one disjoint graph with node offsets."""

    structures: list[AtomicStructure]
    species: np.ndarray
    positions: np.ndarray
    struct_ids: np.ndarray
    node_counts: np.ndarray
    graph: NeighborGraph
    shift_offsets: np.ndarray
    compositions: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # numbers, counts, atom->token

    @property
    def n_structures(self) -> int:
        return len(self.structures)

    @property
    def n_nodes(self) -> int:
        return len(self.species)


def _tokenize(species: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    numbers, counts = np.unique(species, return_counts=True)
    atom_token = np.searchsorted(numbers, species)
    return numbers, counts.astype(np.int64), atom_token


def make_batch(structures: list[AtomicStructure], cfg: ModelConfig,
               graphs: list[NeighborGraph] | None = None) -> Batch:
    """Concatenate structures; never creates cross-structure edges."""
    if graphs is None:
        graphs = [build_graph(s, cfg.graph_cutoff, cfg.max_neighbors) for s in structures]
    species = np.concatenate([s.species for s in structures])
    positions = np.concatenate([s.positions for s in structures])
    node_counts = np.array([s.n_atoms for s in structures], dtype=np.int64)
    struct_ids = np.repeat(np.arange(len(structures)), node_counts)
    offsets = np.concatenate([[0], np.cumsum(node_counts)])

    src = np.concatenate([g.src + offsets[b] for b, g in enumerate(graphs)])
    dst = np.concatenate([g.dst + offsets[b] for b, g in enumerate(graphs)])
    shift = np.concatenate([g.shift for g in graphs])
    disp = np.concatenate([g.displacement for g in graphs])
    dist = np.concatenate([g.distance for g in graphs])
    shift_offsets = np.concatenate([
        g.shift_offsets(s.cell if s.periodic else None)
        for g, s in zip(graphs, structures)])
    graph = NeighborGraph(src.astype(np.int64), dst.astype(np.int64), shift, disp, dist,
                          cfg.graph_cutoff, cfg.max_neighbors, int(node_counts.sum()))
    comps = [_tokenize(s.species) for s in structures]
    return Batch(structures, species, positions, struct_ids, node_counts, graph,
                 shift_offsets, comps)


def encode(p: dict[str, Tensor], cfg: ModelConfig, batch: Batch,
           positions: Tensor | None = None, train: bool = False,
           rng: np.random.Generator | None = None,
           fused_offset: np.ndarray | None = None,
           count_pathway: bool = True) -> StreamEmbeddings:
    """Run the enabled streams and fuse. Disabled streams contribute zero
    blocks at their fixed offsets, which is the stream-ablation mechanism."""
    if positions is None:
        positions = Tensor(batch.positions)
    n, b = batch.n_nodes, batch.n_structures

    if "comp" in cfg.streams:
        node_rows, pooled_rows = [], []
        for numbers, counts, atom_token in batch.compositions:
            tokens, pooled = compstream.comp_forward(numbers, counts, p, cfg.comp,
                                                     train=train, rng=rng,
                                                     count_pathway=count_pathway)
            node_rows.append(tokens[atom_token])
            pooled_rows.append(pooled.reshape(1, cfg.comp.d_comp))
        node_comp = ad.concat(node_rows, axis=0)
        pooled_comp = ad.concat(pooled_rows, axis=0)
    else:
        node_comp = Tensor(np.zeros((n, cfg.comp.d_comp)))
        pooled_comp = Tensor(np.zeros((b, cfg.comp.d_comp)))

    inv_counts = Tensor((1.0 / batch.node_counts).reshape(-1, 1))

    if "struct" in cfg.streams:
        lat_rows = []
        for s in batch.structures:
            feats9 = structstream.lattice_features(s.cell, s.n_atoms, s.periodic)
            lat_rows.append(structstream.lattice_embedding(
                p, cfg.struct, feats9, s.periodic).reshape(1, cfg.struct.d_struct))
        lattice_per_node = ad.concat(lat_rows, axis=0)[batch.struct_ids]
        node_struct = structstream.struct_forward(p, cfg.struct, positions, batch.graph,
                                                  batch.shift_offsets, lattice_per_node)
        pooled_struct = ad.segment_sum(node_struct, batch.struct_ids, b) * inv_counts
    else:
        node_struct = Tensor(np.zeros((n, cfg.struct.d_struct)))
        pooled_struct = Tensor(np.zeros((b, cfg.struct.d_struct)))

    if "int" in cfg.streams:
        _, inter_forward = get_backbone(cfg.inter.backbone)
        node_int = inter_forward(p, cfg.inter, batch.species, positions, batch.graph,
                                 batch.shift_offsets)
        pooled_int = ad.segment_sum(node_int, batch.struct_ids, b) * inv_counts
    else:
        node_int = Tensor(np.zeros((n, cfg.inter.d_int)))
        pooled_int = Tensor(np.zeros((b, cfg.inter.d_int)))

    fused = ad.concat([node_comp, node_struct, node_int], axis=1)
    if fused_offset is not None:
        fused = fused + Tensor(fused_offset)
    pooled = ad.concat([pooled_comp, pooled_struct, pooled_int], axis=1)
    return StreamEmbeddings(node_comp, node_struct, node_int, fused,
                            pooled_comp, pooled_struct, pooled_int, pooled, cfg.offsets)


def structure_energies(p, cfg: ModelConfig, batch: Batch, emb: StreamEmbeddings) -> Tensor:
    return fusion.energy(p, cfg, emb, batch.struct_ids, batch.n_structures)


def energy_and_forces(p: dict[str, Tensor], cfg: ModelConfig, batch: Batch,
                      create_graph: bool = False, train: bool = False,
                      rng: np.random.Generator | None = None):
    """Conservative route: forces are the negative position gradient of the
    summed energy. The neighbor graph is held fixed during differentiation."""
    positions = Tensor(batch.positions, requires_grad=True)
    emb = encode(p, cfg, batch, positions=positions, train=train, rng=rng)
    energies = structure_energies(p, cfg, batch, emb)
    g = grad(energies.sum(), positions, create_graph=create_graph)
    return energies, ad.neg(g), emb
