"""Frozen-embedding extraction, decomposed retrieval, probing, and latent
metrics.

Retrieval is exact brute-force cosine ranking per stream; probes train only a
small head on frozen embeddings with the same AdamW machinery as the main
trainer.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParameterStore, Tensor, grad
from .model import ModelConfig, encode, make_batch, structure_energies
from .structdata import AtomicStructure, build_graph
from .trainer import AdamW, OptimizerConfig, lr_at

INDEX_VERSION = 1
STREAMS = ("comp", "struct", "int", "joint")


@dataclass
class EmbeddingIndex:
    """Pooled per-structure vectors for each stream plus an aligned label table."""

    vectors: dict[str, np.ndarray]
    labels: list[dict]

    def __post_init__(self):
        n = len(self.labels)
        for name in STREAMS:
            if name not in self.vectors:
                raise ValueError(f"index is missing the {name!r} space")
            if len(self.vectors[name]) != n:
                raise ValueError("vector/label record counts differ")

    @property
    def n_records(self) -> int:
        return len(self.labels)


def mean_nn_distance(structure: AtomicStructure) -> float:
    """Mean over atoms of the nearest-neighbor distance, minimum-image for
    periodic cells (found by growing the cutoff until every atom has one)."""
    if structure.n_atoms == 1 and not structure.periodic:
        return float("nan")
    cutoff = 6.0
    while cutoff <= 200.0:
        graph = build_graph(structure, cutoff, max_neighbors=1)
        if len(graph.src) == structure.n_atoms:
            per_atom = np.full(structure.n_atoms, np.inf)
            np.minimum.at(per_atom, graph.src, graph.distance)
            return float(per_atom.mean())
        cutoff *= 2.0
    raise ValueError("could not find neighbors within 200 A")


def majority_element(structure: AtomicStructure) -> int:
    """Most frequent atomic number; ties resolve to the smaller number."""
    numbers, counts = np.unique(structure.species, return_counts=True)
    return int(numbers[np.argmax(counts)])


def embed_dataset(store: ParameterStore, model_cfg: ModelConfig,
                  structures: list[AtomicStructure], chunk: int = 32) -> EmbeddingIndex:
    if not structures:
        raise ValueError("cannot embed an empty dataset")
    vecs = {name: [] for name in STREAMS}
    labels = []
    with ad.no_grad():
        for lo in range(0, len(structures), chunk):
            part = structures[lo:lo + chunk]
            batch = make_batch(part, model_cfg)
            p = store.tensors()
            emb = encode(p, model_cfg, batch)
            vecs["comp"].append(emb.pooled_comp.data)
            vecs["struct"].append(emb.pooled_struct.data)
            vecs["int"].append(emb.pooled_int.data)
            vecs["joint"].append(emb.pooled.data)
            for s in part:
                labels.append({
                    "element_set": sorted(int(z) for z in set(s.species.tolist())),
                    "space_group": s.labels.get("space_group"),
                    "crystal_system": s.labels.get("crystal_system"),
                    "formation_energy": s.labels.get("formation_energy"),
                    "mean_nn_distance": mean_nn_distance(s),
                    "majority_element": majority_element(s),
                })
    vectors = {k: np.concatenate(v).astype(np.float32) for k, v in vecs.items()}
    return EmbeddingIndex(vectors, labels)


def save_index(path, index: EmbeddingIndex) -> None:
    meta = {"version": INDEX_VERSION, "labels": index.labels}
    arrays = {f"vec/{k}": v for k, v in index.vectors.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_index(path) -> EmbeddingIndex:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index version: {meta.get('version')!r}")
        vectors = {k[len("vec/"):]: data[k] for k in data.files if k.startswith("vec/")}
    return EmbeddingIndex(vectors, meta["labels"])


def knn_retrieve(index: EmbeddingIndex, query_id: int, stream: str,
                 k: int) -> list[tuple[int, float]]:
    """Exact cosine ranking of all other records; ties break by record id.

    Zero-norm database vectors are excluded with a warning; a zero-norm query
    cannot be ranked.
    """
    if k >= index.n_records:
        raise ValueError("k must be smaller than the record count")
    x = index.vectors[stream].astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    if norms[query_id] == 0.0:
        raise ValueError("query vector has zero norm")
    dead = np.nonzero(norms == 0.0)[0]
    if len(dead):
        warnings.warn(f"excluding {len(dead)} zero-norm vectors from retrieval")
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = x / safe[:, None]
    scores = unit @ unit[query_id]
    scores[query_id] = -np.inf
    scores[dead] = -np.inf
    order = np.lexsort((np.arange(len(scores)), -scores))
    return [(int(i), float(scores[i])) for i in order[:k]]


def _target_labels(index: EmbeddingIndex, target: str) -> list:
    if target == "element_set":
        return [tuple(rec["element_set"]) for rec in index.labels]
    return [rec[target] for rec in index.labels]


def recall_at_k(index: EmbeddingIndex, stream: str, target: str, k: int) -> float:
    """Fraction of queries whose top-k share the query's label; element sets
    compare as sets, ignoring counts. Queries with no same-label record are
    excluded from the denominator."""
    labels = _target_labels(index, target)
    hits, total = 0, 0
    for q in range(index.n_records):
        positives = any(labels[i] == labels[q] for i in range(index.n_records) if i != q)
        if not positives:
            continue
        total += 1
        retrieved = knn_retrieve(index, q, stream, k)
        if any(labels[i] == labels[q] for i, _ in retrieved):
            hits += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# probing

@dataclass
class ProbeResult:
    target: str
    head: str
    metric: str
    value: float
    baseline: float
    n_train: int
    n_test: int
    warnings: list = field(default_factory=list)


CLASSIFICATION_TARGETS = {"crystal_system", "majority_element", "space_group"}
REGRESSION_TARGETS = {"formation_energy", "mean_nn_distance"}


def probe(index: EmbeddingIndex, stream: str, target, head: str = "linear",
          seed: int = 0, steps: int = 3000, lr: float = 1e-2,
          train_fraction: float = 0.8) -> ProbeResult:
    """Train a probe head on frozen embeddings and score it on a held-out split.

    ``target`` is a label name or an explicit array of values. Classification
    reports accuracy against a majority-class baseline; regression reports MAE
    against a predict-the-mean baseline.
    """
    x = index.vectors[stream].astype(np.float64)
    if isinstance(target, str):
        y = np.asarray(_target_labels(index, target))
        is_classification = target in CLASSIFICATION_TARGETS
        target_name = target
    else:
        y = np.asarray(target)
        is_classification = np.issubdtype(y.dtype, np.integer)
        target_name = "custom"

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    n_train = int(round(train_fraction * len(y)))
    tr, te = perm[:n_train], perm[n_train:]
    # PCA-whiten on train statistics: frozen embeddings are often nearly
    # collinear and raw gradient training stalls; a whitening transform is
    # affine, so the probe composed with it is still a single affine map of
    # the embeddings
    mu = x[tr].mean(axis=0)
    xc = x - mu
    _, svals, vt = np.linalg.svd(xc[tr], full_matrices=False)
    keep = svals > 1e-8 * max(svals[0], 1e-30)
    if not np.any(keep):
        # degenerate stream (all train embeddings identical): bias-only probe
        xs = np.zeros((len(x), 1))
        notes_degenerate = ["train embeddings are constant; probe reduces to a bias"]
    else:
        whiten = vt[keep].T / svals[keep] * np.sqrt(len(tr))
        xs = xc @ whiten
        notes_degenerate = []

    notes = list(notes_degenerate)
    if is_classification:
        classes = np.unique(y)
        class_of = {c: i for i, c in enumerate(classes)}
        missing = set(y[te].tolist()) - set(y[tr].tolist())
        if missing:
            notes.append(f"classes absent from the train split: {sorted(missing)}")
        yi = np.array([class_of[v] for v in y])
        out_dim = len(classes)
    else:
        y = y.astype(np.float64)
        out_dim = 1

    store = ParameterStore(seed=seed)
    hrng = np.random.default_rng(seed + 1)
    d_in = xs.shape[1]
    dims = [d_in, out_dim] if head == "linear" else [d_in, 128, 128, out_dim]
    nn.init_mlp(store, hrng, "probe", dims)
    n_layers = len(dims) - 1
    opt_cfg = OptimizerConfig(lr=lr, warmup_steps=min(100, steps // 10), steps=steps,
                              weight_decay=0.0, clip_norm=0.0)
    opt = AdamW(store, opt_cfg)
    xt = Tensor(xs[tr])
    for step in range(steps):
        p = store.tensors()
        pred = nn.mlp(p, "probe", xt, n_layers)
        if is_classification:
            logp = nn.log_softmax(pred, axis=-1)
            loss = ad.neg(logp[np.arange(len(tr)), yi[tr]].mean())
        else:
            diff = pred.reshape(len(tr)) - Tensor(y[tr])
            loss = (diff * diff).mean()
        grads = {name: g.data for name, g in zip(p, grad(loss, list(p.values())))}
        opt.step(grads, lr_at(step, opt_cfg))

    with ad.no_grad():
        p = store.tensors()
        pred = nn.mlp(p, "probe", Tensor(xs[te]), n_layers).data
    if is_classification:
        acc = float(np.mean(np.argmax(pred, axis=1) == yi[te]))
        counts = np.bincount(yi[tr], minlength=out_dim)
        baseline = float(np.mean(np.argmax(counts) == yi[te]))
        return ProbeResult(target_name, head, "accuracy", acc, baseline,
                           len(tr), len(te), notes)
    mae = float(np.mean(np.abs(pred.reshape(-1) - y[te])))
    baseline = float(np.mean(np.abs(y[tr].mean() - y[te])))
    return ProbeResult(target_name, head, "mae", mae, baseline, len(tr), len(te), notes)


# ---------------------------------------------------------------------------
# latent metrics

def uniformity(vectors: np.ndarray, chunk: int = 2048) -> float:
    """log mean over distinct pairs of exp(-2 ||x - y||^2) on normalized rows;
    lower means more spread."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    if n < 2:
        raise ValueError("uniformity needs at least two vectors")
    unit = vectors / (np.linalg.norm(vectors, axis=1, keepdims=True) + 1e-12)
    total, pairs = 0.0, 0
    for i0 in range(0, n, chunk):
        a = unit[i0:i0 + chunk]
        for j0 in range(i0, n, chunk):
            b = unit[j0:j0 + chunk]
            d2 = np.maximum(
                np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
                - 2.0 * (a @ b.T), 0.0)
            e = np.exp(-2.0 * d2)
            if i0 == j0:
                iu = np.triu_indices(len(a), k=1)
                total += float(e[iu].sum())
                pairs += len(iu[0])
            else:
                total += float(e.sum())
                pairs += e.size
    return float(np.log(total / pairs))


def stream_sensitivity(store: ParameterStore, model_cfg: ModelConfig,
                       structure: AtomicStructure, target: str = "energy",
                       fused_offset: np.ndarray | None = None):
    """Mean gradient norm of a target scalar with respect to each stream's
    node features (slices of the fused vector).

    ``force_norm_sum`` requires the conservative route and differentiates the
    force magnitudes through the position-gradient graph.
    """
    if target not in ("energy", "force_norm_sum"):
        raise ValueError(f"unknown sensitivity target: {target!r}")
    batch = make_batch([structure], model_cfg)
    p = store.tensors()
    positions = Tensor(batch.positions, requires_grad=True)
    emb = encode(p, model_cfg, batch, positions=positions, fused_offset=fused_offset)
    energies = structure_energies(p, model_cfg, batch, emb)
    if target == "energy":
        scalar = energies.sum()
    else:
        g = grad(energies.sum(), positions, create_graph=True)
        scalar = ad.sqrt((g * g).sum(axis=1) + 1e-24).sum()
    gf = grad(scalar, emb.fused).data
    sens = {}
    for name in ("comp", "struct", "int"):
        sl = emb.offsets[name]
        sens[name] = float(np.mean(np.linalg.norm(gf[:, sl], axis=1)))
    return sens, gf
