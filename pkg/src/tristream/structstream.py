"""Type-agnostic geometric stream.

Per-node rotation-invariant descriptors are built by expanding the local
neighbor density in learnable mixed radial channels times real spherical
harmonics and contracting to the power spectrum. Periodic systems add a
lattice embedding; a few invariant message-passing layers then propagate
connectivity. Nothing in this stream reads species, so relabeling atoms at
fixed geometry leaves the output bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import basis, nn
from .autodiff import ParameterStore, Tensor
from .basis import CutoffBank, RadialBasisSpec
from .structdata import InputError, NeighborGraph


@dataclass
class StructStreamConfig:
    d_struct: int = 256
    r_cut: float = 6.0
    n_radial: int = 8
    n_channels: int = 8
    l_max: int = 4
    basis_kind: str = "bessel"
    n_mlp_layers: int = 3
    n_mp_layers: int = 2
    scales: tuple = (0.5, 0.75, 1.0)

    @property
    def radial_spec(self) -> RadialBasisSpec:
        return RadialBasisSpec(self.basis_kind, self.n_radial, self.r_cut)

    @property
    def cutoff_bank(self) -> CutoffBank:
        return CutoffBank(self.scales)

    @property
    def n_harmonics(self) -> int:
        return (self.l_max + 1) ** 2

    @property
    def n_pairs(self) -> int:
        return self.n_channels * (self.n_channels + 1) // 2

    @property
    def spectrum_width(self) -> int:
        return self.n_pairs * (self.l_max + 1)


def init_struct_params(store: ParameterStore, rng: np.random.Generator,
                       cfg: StructStreamConfig, prefix: str = "struct") -> None:
    ks = cfg.n_radial * len(cfg.scales)
    store.add(f"{prefix}.mix", rng.normal(scale=1.0 / math.sqrt(ks), size=(cfg.n_channels, ks)))
    nn.init_linear(store, rng, f"{prefix}.lattice.0", 9, cfg.d_struct)
    nn.init_linear(store, rng, f"{prefix}.lattice.1", cfg.d_struct, cfg.d_struct)
    in_dim = cfg.spectrum_width + cfg.d_struct
    nn.init_linear(store, rng, f"{prefix}.proj.0", in_dim, cfg.d_struct)
    for i in range(1, cfg.n_mlp_layers):
        nn.init_linear(store, rng, f"{prefix}.proj.{i}", cfg.d_struct, cfg.d_struct)
    d = cfg.d_struct
    for layer in range(cfg.n_mp_layers):
        base = f"{prefix}.mp{layer}"
        nn.init_linear(store, rng, f"{base}.edge", ks, d)
        nn.init_mlp(store, rng, f"{base}.msg", [2 * d, d, d])
        nn.init_mlp(store, rng, f"{base}.upd", [2 * d, d, d])


def edge_geometry(positions: Tensor, graph: NeighborGraph,
                  shift_offsets: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Displacement, distance, and unit direction per edge from tape positions.

    Topology and image shifts are fixed; only the geometry differentiates.
    """
    disp = positions[graph.dst] - positions[graph.src] + Tensor(shift_offsets)
    dist = ad.sqrt((disp * disp).sum(axis=1))
    unit = disp / dist.reshape(-1, 1)
    return disp, dist, unit


def mixed_radial(p: dict[str, Tensor], cfg: StructStreamConfig, dist: Tensor,
                 prefix: str = "struct") -> tuple[Tensor, Tensor]:
    """Multi-scale radial features and their learned K' channel mixture."""
    feats = basis.multiscale_features(cfg.radial_spec, cfg.cutoff_bank, dist)
    mixed = feats @ p[f"{prefix}.mix"].transpose((1, 0))
    return feats, mixed


def density_coefficients(mixed: Tensor, harmonics: Tensor, src: np.ndarray,
                         n_nodes: int) -> Tensor:
    """Per-node density expansion c[node, channel, lm] = sum over the node's
    neighborhood of phi~_channel(r) * Y_lm(r_hat). Isolated nodes are zero."""
    n_channels = mixed.shape[1]
    n_harm = harmonics.shape[1]
    outer = mixed.reshape(-1, n_channels, 1) * harmonics.reshape(-1, 1, n_harm)
    return ad.segment_sum(outer, src, n_nodes)


def triu_pairs(n_channels: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n_channels)


def power_spectrum(coeffs: Tensor, l_max: int) -> Tensor:
    """Rotation-invariant contraction p[node, (a,a'), l] = sum_m c_alm c_a'lm.

    Only the upper triangle a <= a' is kept; diagonal entries are sums of
    squares and therefore nonnegative.
    """
    n_channels = coeffs.shape[1]
    iu0, iu1 = triu_pairs(n_channels)
    blocks = []
    for l in range(l_max + 1):
        cl = coeffs[:, :, l * l:(l + 1) ** 2]
        gram = cl @ cl.swap_last()
        pairs = gram[:, iu0, iu1]
        blocks.append(pairs.reshape(pairs.shape + (1,)))
    return ad.concat(blocks, axis=2)


def lattice_features(cell: np.ndarray | None, n_atoms: int, periodic: bool = True) -> np.ndarray:
    """Nine scale-aware cell features; zeros for non-periodic systems.

    Lengths are normalized by the cube root of the volume, angles are mapped
    to [0, 1] by dividing by pi, and the orthogonality score is
    1 - mean |cos(angle)| so a rectangular cell scores 1. The density proxy is
    atoms per volume (unit mass per atom).
    """
    if not periodic or cell is None:
        return np.zeros(9)
    cell = np.asarray(cell, dtype=np.float64)
    volume = abs(np.linalg.det(cell))
    if volume <= 1e-8:
        raise InputError("singular cell in lattice_features")
    lengths = np.linalg.norm(cell, axis=1)
    scale = volume ** (1.0 / 3.0)
    cosines = np.array([
        np.dot(cell[1], cell[2]) / (lengths[1] * lengths[2]),
        np.dot(cell[0], cell[2]) / (lengths[0] * lengths[2]),
        np.dot(cell[0], cell[1]) / (lengths[0] * lengths[1]),
    ])
    cosines = np.clip(cosines, -1.0, 1.0)
    angles = np.arccos(cosines) / math.pi
    return np.concatenate([
        lengths / scale,
        angles,
        [math.log(volume / n_atoms), math.log(n_atoms / volume), 1.0 - np.mean(np.abs(cosines))],
    ])


def lattice_embedding(p: dict[str, Tensor], cfg: StructStreamConfig, feats9: np.ndarray,
                      periodic: bool, prefix: str = "struct") -> Tensor:
    """Two-layer embedding of the cell features; the whole component is
    disabled (zero vector) for non-periodic systems."""
    if not periodic:
        return Tensor(np.zeros(cfg.d_struct))
    h = ad.silu(nn.linear(p, f"{prefix}.lattice.0", Tensor(feats9.reshape(1, 9))))
    return nn.linear(p, f"{prefix}.lattice.1", h).reshape(cfg.d_struct)


def invariant_message_passing(p: dict[str, Tensor], cfg: StructStreamConfig, h: Tensor,
                              graph: NeighborGraph, dist: Tensor, edge_feats: Tensor,
                              prefix: str = "struct") -> Tensor:
    """Residual updates from cutoff-weighted, degree-normalized neighbor messages.

    The aggregate uses only neighbor states and scalar radial features, so the
    update is rotation-invariant by construction; isolated nodes receive a
    zero aggregate (the smooth limit of the normalized sum as s -> 0).
    """
    n = graph.n_nodes
    envelope = basis.eval_cutoff(cfg.r_cut, dist)
    denom = ad.segment_sum(envelope.reshape(-1, 1), graph.src, n)
    has_neighbors = (denom.data > 0.0).astype(np.float64)
    inv = Tensor(has_neighbors) / (denom + Tensor(1.0 - has_neighbors))
    for layer in range(cfg.n_mp_layers):
        base = f"{prefix}.mp{layer}"
        eta = nn.linear(p, f"{base}.edge", edge_feats)
        msg = nn.mlp(p, f"{base}.msg", ad.concat([h[graph.dst], eta], axis=1), 2)
        num = ad.segment_sum(msg * envelope.reshape(-1, 1), graph.src, n)
        agg = num * inv
        h = h + nn.mlp(p, f"{base}.upd", ad.concat([h, agg], axis=1), 2)
    return h


def struct_forward(p: dict[str, Tensor], cfg: StructStreamConfig, positions: Tensor,
                   graph: NeighborGraph, shift_offsets: np.ndarray,
                   lattice_rows: Tensor, prefix: str = "struct") -> Tensor:
    """Per-node geometric embedding (n_nodes, d_struct).

    ``lattice_rows`` holds one lattice embedding per node (already broadcast;
    zeros for non-periodic structures).
    """
    n = graph.n_nodes
    _, dist, unit = edge_geometry(positions, graph, shift_offsets)
    edge_feats, mixed = mixed_radial(p, cfg, dist, prefix)
    harmonics = basis.eval_sph_harm(unit, cfg.l_max)
    coeffs = density_coefficients(mixed, harmonics, graph.src, n)
    spectrum = power_spectrum(coeffs, cfg.l_max)
    spectrum_flat = spectrum.reshape(n, cfg.spectrum_width)

    h = nn.linear(p, f"{prefix}.proj.0", ad.concat([spectrum_flat, lattice_rows], axis=1))
    h = ad.silu(h)
    for i in range(1, cfg.n_mlp_layers):
        h = h + ad.silu(nn.linear(p, f"{prefix}.proj.{i}", h))

    return invariant_message_passing(p, cfg, h, graph, dist, edge_feats, prefix)
