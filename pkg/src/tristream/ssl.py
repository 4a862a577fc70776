"""Stochastic augmentation pipeline and the self-supervised objectives.

Each structure yields two corrupted views. Position noise, per-node type
masking, and rotations are always applied (rotations are free for an
invariant backbone); of the remaining augmentations (cell perturbation,
randomized graph construction) at most ``max_optional_augs`` are drawn per
view. Corruption targets are recorded exactly, so replaying a view record on
the clean structure reproduces the corrupted view bitwise.

Losses: noise regression on both views (averaged), masked-element NLL, and a
joint-embedding term per level (graph and node) that mixes a prediction
distance between the views with a characteristic-function statistic pushing
embeddings toward an isotropic Gaussian. The statistic follows the
Epps-Pulley construction: random unit projections to 1-d, empirical
characteristic function compared against the standard normal's on a fixed
quadrature grid. Projections are drawn fresh per step; node- and graph-level
terms draw independent projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fusion, nn
from .autodiff import Tensor
from .compstream import MASK_TOKEN
from .model import Batch, ModelConfig, encode, make_batch
from .structdata import AtomicStructure, NeighborGraph, build_graph


@dataclass
class AugmentationConfig:
    noise_sigma: tuple = (0.05, 0.3)
    mask_prob: float = 0.3
    rotation_max_angle: float = 180.0  # degrees
    cell_sigma: tuple = (0.01, 0.03)
    graph_radius: tuple = (4.0, 6.0)
    graph_max_neighbors: tuple = (20, 120)
    max_optional_augs: int = 3
    n_views: int = 2


@dataclass
class SSLWeights:
    denoise: float = 10.0
    mask: float = 0.1
    jepa_node: float = 0.1
    jepa_graph: float = 0.1
    isotropy: float = 0.1
    isotropy_slices: int = 1024
    isotropy_t_max: float = 3.0
    isotropy_quadrature: int = 17

    def __post_init__(self):
        weights = (self.denoise, self.mask, self.jepa_node, self.jepa_graph, self.isotropy)
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be nonnegative")


@dataclass
class View:
    structure: AtomicStructure
    graph: NeighborGraph
    noise: np.ndarray
    masked_idx: np.ndarray
    original_species: np.ndarray
    rotation: np.ndarray
    strain: np.ndarray | None
    graph_cutoff: float
    graph_max_neighbors: int


@dataclass
class ViewPair:
    clean: AtomicStructure
    views: tuple[View, View]


def _random_rotation(rng: np.random.Generator, max_angle_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, math.radians(max_angle_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _corrupt_geometry(positions: np.ndarray, cell: np.ndarray | None, rotation: np.ndarray,
                      strain: np.ndarray | None, noise: np.ndarray):
    """Rotate, strain, then add noise; shared by sampling and exact replay."""
    pos = positions @ rotation.T
    c = None if cell is None else cell @ rotation.T
    if strain is not None:
        pos = pos @ strain
        c = None if c is None else c @ strain
    return pos + noise, c


def sample_view(structure: AtomicStructure, cfg: AugmentationConfig,
                model_cfg: ModelConfig, rng: np.random.Generator) -> View:
    """One corrupted view: noise, per-node masking, and rotation are always
    applied (rotations cost nothing for an invariant backbone); of the
    remaining augmentations (cell strain, graph-parameter randomization) at
    most ``max_optional_augs`` are drawn."""
    n = structure.n_atoms
    rotation = _random_rotation(rng, cfg.rotation_max_angle)

    optional = ["graph"] + (["cell"] if structure.periodic else [])
    k = int(rng.integers(0, cfg.max_optional_augs + 1))
    chosen = set(np.array(optional)[rng.permutation(len(optional))[:min(k, len(optional))]])

    sigma = rng.uniform(*cfg.noise_sigma)
    noise = rng.normal(0.0, sigma, size=(n, 3)) if sigma > 0 else np.zeros((n, 3))

    masked_idx = np.nonzero(rng.random(n) < cfg.mask_prob)[0]

    strain = None
    if "cell" in chosen:
        cell_sigma = rng.uniform(*cfg.cell_sigma)
        raw = rng.normal(0.0, cell_sigma, size=(3, 3))
        strain = np.eye(3) + 0.5 * (raw + raw.T)

    if "graph" in chosen:
        cutoff = rng.uniform(*cfg.graph_radius)
        max_neighbors = int(rng.integers(cfg.graph_max_neighbors[0],
                                         cfg.graph_max_neighbors[1] + 1))
    else:
        cutoff = model_cfg.graph_cutoff
        max_neighbors = model_cfg.max_neighbors

    return _assemble_view(structure, rotation, strain, noise, masked_idx,
                          cutoff, max_neighbors)


def _assemble_view(structure, rotation, strain, noise, masked_idx, cutoff,
                   max_neighbors) -> View:
    pos, cell = _corrupt_geometry(structure.positions, structure.cell, rotation,
                                  strain, noise)
    species = structure.species.copy()
    species[masked_idx] = MASK_TOKEN
    corrupted = AtomicStructure.corrupted(species, pos, cell, structure.periodic)
    graph = build_graph(corrupted, cutoff, max_neighbors)
    return View(corrupted, graph, noise, masked_idx, structure.species.copy(),
                rotation, strain, cutoff, max_neighbors)


def apply_recorded(clean: AtomicStructure, view: View) -> View:
    """Replay a view's recorded corruption targets on the clean structure."""
    return _assemble_view(clean, view.rotation, view.strain, view.noise,
                          view.masked_idx, view.graph_cutoff, view.graph_max_neighbors)


def sample_views(structure: AtomicStructure, cfg: AugmentationConfig,
                 model_cfg: ModelConfig, rng: np.random.Generator) -> ViewPair:
    return ViewPair(structure, (sample_view(structure, cfg, model_cfg, rng),
                                sample_view(structure, cfg, model_cfg, rng)))


# ---------------------------------------------------------------------------
# losses

def view_batch(views: list[View], model_cfg: ModelConfig) -> Batch:
    return make_batch([v.structure for v in views], model_cfg,
                      graphs=[v.graph for v in views])


def denoise_term(pred: Tensor, views: list[View], batch: Batch) -> Tensor:
    """Mean over structures of the per-structure summed squared noise error."""
    eps = np.concatenate([v.noise for v in views])
    diff = pred - Tensor(eps)
    per_node = (diff * diff).sum(axis=1, keepdims=True)
    return ad.segment_sum(per_node, batch.struct_ids, batch.n_structures).mean()


def denoise_loss(p, model_cfg: ModelConfig, views: list[View]) -> Tensor:
    batch = view_batch(views, model_cfg)
    pos = Tensor(batch.positions)
    emb = encode(p, model_cfg, batch, positions=pos)
    pred = fusion.predict_noise(p, model_cfg, emb, batch.graph, pos, batch.shift_offsets)
    return denoise_term(pred, views, batch)


def _global_masked_indices(views: list[View], batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.concatenate([[0], np.cumsum(batch.node_counts)])
    idx, targets = [], []
    for b, v in enumerate(views):
        idx.append(v.masked_idx + offsets[b])
        targets.append(v.original_species[v.masked_idx])
    return np.concatenate(idx).astype(np.int64), np.concatenate(targets).astype(np.int64)


def mask_term(p, model_cfg: ModelConfig, emb, views: list[View], batch: Batch) -> Tensor:
    """Mean over structures of the per-structure masked-node NLL sum.

    Gradients flow only through logits at masked nodes; an empty mask set
    contributes zero.
    """
    idx, targets = _global_masked_indices(views, batch)
    if len(idx) == 0:
        return Tensor(np.array(0.0))
    logits = fusion.predict_masked_elements(p, model_cfg, emb, idx)
    logp = nn.log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(idx)), targets - 1]
    per_struct = ad.segment_sum(ad.neg(picked).reshape(-1, 1), batch.struct_ids[idx],
                                batch.n_structures)
    return per_struct.mean()


def mask_loss(p, model_cfg: ModelConfig, views: list[View]) -> Tensor:
    batch = view_batch(views, model_cfg)
    emb = encode(p, model_cfg, batch)
    return mask_term(p, model_cfg, emb, views, batch)


def isotropy_statistic(x: Tensor, weights: SSLWeights, rng: np.random.Generator) -> Tensor:
    """Epps-Pulley-style deviation of 1-d projections from a standard normal.

    Averages, over random unit slices and quadrature nodes on [0, t_max], the
    squared deviation of the empirical characteristic function from
    exp(-t^2/2).
    """
    n, dim = x.shape
    proj = rng.normal(size=(weights.isotropy_slices, dim))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    projected = x @ Tensor(proj.T)  # (n, slices)
    ts = np.linspace(0.0, weights.isotropy_t_max, weights.isotropy_quadrature)
    total = Tensor(np.zeros(weights.isotropy_slices))
    for t in ts:
        target = math.exp(-0.5 * t * t)
        re = ad.cos(projected * t).mean(axis=0)
        im = ad.sin(projected * t).mean(axis=0)
        dev = (re - target) ** 2 + im * im
        total = total + dev
    return total.mean() * (1.0 / weights.isotropy_quadrature)


def jepa_loss(emb1, emb2, batch: Batch, weights: SSLWeights,
              rng: np.random.Generator) -> tuple[Tensor, dict]:
    """Graph-level plus node-level joint-embedding terms.

    Each term mixes the isotropy statistic (weight lam) with a prediction
    distance (weight 1 - lam): the mean over structures of the pooled
    embedding distance at the graph level, of the per-structure sum of node
    distances at the node level. A single-structure batch skips the isotropy
    statistic and flags it.
    """
    b = batch.n_structures
    d_pool = emb1.pooled - emb2.pooled
    pred_g = (d_pool * d_pool).sum(axis=1).mean()
    d_node = emb1.fused - emb2.fused
    per_node = (d_node * d_node).sum(axis=1, keepdims=True)
    pred_n = ad.segment_sum(per_node, batch.struct_ids, b).mean()

    lam = weights.isotropy
    skipped = b < 2
    if skipped:
        sig_g = Tensor(np.array(0.0))
        sig_n = Tensor(np.array(0.0))
    else:
        sig_g = isotropy_statistic(ad.concat([emb1.pooled, emb2.pooled], axis=0), weights, rng)
        sig_n = isotropy_statistic(ad.concat([emb1.fused, emb2.fused], axis=0), weights, rng)
    graph_term = sig_g * lam + pred_g * (1.0 - lam)
    node_term = sig_n * lam + pred_n * (1.0 - lam)
    breakdown = {
        "jepa_graph": graph_term, "jepa_node": node_term,
        "isotropy_graph": sig_g, "isotropy_node": sig_n,
        "pred_graph": pred_g, "pred_node": pred_n,
        "isotropy_skipped": skipped,
    }
    return graph_term + node_term, breakdown


def combined_loss(p, model_cfg: ModelConfig, pairs: list[ViewPair], weights: SSLWeights,
                  rng: np.random.Generator, train: bool = False) -> tuple[Tensor, dict]:
    """Weighted sum of the three objectives with a per-term breakdown.

    Denoising and masking are computed on both views and averaged; the
    joint-embedding terms compare the two views directly.
    """
    views1 = [vp.views[0] for vp in pairs]
    views2 = [vp.views[1] for vp in pairs]
    batch1 = view_batch(views1, model_cfg)
    batch2 = view_batch(views2, model_cfg)

    terms: dict[str, Tensor] = {}
    embs = []
    denoise_parts, mask_parts = [], []
    for views, batch in ((views1, batch1), (views2, batch2)):
        pos = Tensor(batch.positions)
        emb = encode(p, model_cfg, batch, positions=pos, train=train, rng=rng)
        embs.append(emb)
        pred = fusion.predict_noise(p, model_cfg, emb, batch.graph, pos, batch.shift_offsets)
        denoise_parts.append(denoise_term(pred, views, batch))
        mask_parts.append(mask_term(p, model_cfg, emb, views, batch))

    terms["denoise"] = (denoise_parts[0] + denoise_parts[1]) * 0.5
    terms["mask"] = (mask_parts[0] + mask_parts[1]) * 0.5
    _, jep = jepa_loss(embs[0], embs[1], batch1, weights, rng)
    terms["jepa_graph"] = jep["jepa_graph"]
    terms["jepa_node"] = jep["jepa_node"]

    total = (terms["denoise"] * weights.denoise + terms["mask"] * weights.mask
             + terms["jepa_node"] * weights.jepa_node
             + terms["jepa_graph"] * weights.jepa_graph)
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown["pred_graph"] = float(jep["pred_graph"].data)
    breakdown["pred_node"] = float(jep["pred_node"].data)
    breakdown["isotropy_skipped"] = jep["isotropy_skipped"]
    breakdown["total"] = float(total.data)
    return total, breakdown
