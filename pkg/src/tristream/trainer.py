"""Optimization loops for self-supervised pretraining and supervised
fine-tuning, with bit-exact reproducibility.

All randomness is derived statelessly from (seed, step) so that a run can be
resumed from any checkpoint and reproduce the uninterrupted run bit for bit.
Checkpoints are versioned npz containers holding parameters, optimizer state,
the model config, and the RNG bookkeeping.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fusion, ssl
from .autodiff import ParameterStore, Tensor, grad
from .model import ModelConfig, encode, energy_and_forces, make_batch, structure_energies
from .structdata import AtomicStructure, InputError

CHECKPOINT_VERSION = 1


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    warmup_steps: int = 500
    weight_decay: float = 0.01
    clip_norm: float = 10.0
    batch_size: int = 8
    steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    energy_weight: float = 50.0
    force_weight: float = 100.0
    loss_form: str = "mae"  # or "mse"

    def __post_init__(self):
        if self.loss_form not in ("mae", "mse"):
            raise ValueError(f"unknown loss form: {self.loss_form!r}")


def finetune_optimizer_defaults() -> OptimizerConfig:
    return OptimizerConfig(weight_decay=1e-3, clip_norm=1.0)


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero at the last step."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    total = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / total, 1.0)
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


class AdamW:
    """Adam with decoupled weight decay: a zero-gradient step multiplies a
    parameter by exactly (1 - lr * wd)."""

    def __init__(self, store: ParameterStore, cfg: OptimizerConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p = self.store[name]
            p *= 1.0 - lr * cfg.weight_decay
            p -= lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.m:
            self.m[k] = arrays[f"adam_m/{k}"].copy()
            self.v[k] = arrays[f"adam_v/{k}"].copy()


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, store: ParameterStore, model_cfg_dict: dict, step: int,
                    seed: int, opt: AdamW | None = None, extra: dict | None = None) -> None:
    rng_state = np.random.default_rng([seed, 2000 + step]).bit_generator.state
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "seed": seed,
        "opt_t": opt.t if opt is not None else 0,
        "model_config": model_cfg_dict,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in store.items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


@dataclass
class Checkpoint:
    store: ParameterStore
    model_config: dict
    step: int
    seed: int
    opt_t: int
    opt_arrays: dict
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version: {meta.get('version')!r}")
        store = ParameterStore(seed=meta["seed"])
        opt_arrays = {}
        for key in data.files:
            if key.startswith("param/"):
                store.add(key[len("param/"):], data[key])
            elif key.startswith("adam_"):
                opt_arrays[key] = data[key]
    return Checkpoint(store, meta["model_config"], meta["step"], meta["seed"],
                      meta["opt_t"], opt_arrays, meta)


# ---------------------------------------------------------------------------
# pretraining

def _batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1000 + step])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def _view_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 3000 + step, int(index)])


def _write_log(path, rows: list[dict]) -> None:
    if path is None or not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def pretrain(structures: list[AtomicStructure], model_cfg: ModelConfig,
             aug_cfg: ssl.AugmentationConfig, weights: ssl.SSLWeights,
             opt_cfg: OptimizerConfig, seed: int,
             store: ParameterStore | None = None,
             checkpoint_path=None, log_path=None,
             resume_from=None, stop_step: int | None = None,
             n_workers: int = 1) -> tuple[ParameterStore, list[dict]]:
    """Self-supervised pretraining with AdamW, clipping, and the warmup-cosine
    schedule. With a fixed seed the run, including the checkpoint, is bitwise
    reproducible; ``stop_step`` pauses a longer schedule early, and resuming
    from the checkpoint continues the uninterrupted run bit-exactly."""
    if not structures:
        raise InputError("pretraining needs a nonempty dataset")
    from .config import to_dict  # local import to avoid a module cycle

    start_step = 0
    opt = None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        store = ckpt.store
        seed = ckpt.seed
        start_step = ckpt.step
        opt = AdamW(store, opt_cfg)
        if ckpt.opt_arrays:
            opt.load_state(ckpt.opt_arrays, ckpt.opt_t)
    if store is None:
        store = init_params_for(model_cfg, seed)
    if opt is None:
        opt = AdamW(store, opt_cfg)

    end_step = opt_cfg.steps if stop_step is None else min(stop_step, opt_cfg.steps)
    rows = []
    for step in range(start_step, end_step):
        idx = _batch_indices(seed, step, len(structures), opt_cfg.batch_size)

        def sample(i, _step=step):
            return ssl.sample_views(structures[i], aug_cfg, model_cfg,
                                    _view_rng(seed, _step, i))

        if n_workers > 1:
            # per-structure rng streams are seed-derived, so parallel sampling
            # reproduces the sequential result exactly
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(n_workers) as pool:
                pairs = list(pool.map(sample, idx))
        else:
            pairs = [sample(i) for i in idx]
        step_rng = np.random.default_rng([seed, 4000 + step])
        p = store.tensors()
        loss, parts = ssl.combined_loss(p, model_cfg, pairs, weights, step_rng, train=True)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"pretraining diverged: non-finite loss at step {step}")
        grads = {name: g.data for name, g in zip(p, grad(loss, list(p.values())))}
        grads, gnorm = clip_gradients(grads, opt_cfg.clip_norm)
        lr = lr_at(step, opt_cfg)
        opt.step(grads, lr)
        rows.append({"step": step, "lr": lr, "grad_norm": gnorm,
                     **{k: v for k, v in parts.items()
                        if isinstance(v, (int, float)) and not isinstance(v, bool)}})

    _write_log(log_path, rows)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, store, to_dict(model_cfg), end_step, seed, opt)
    return store, rows


def init_params_for(model_cfg: ModelConfig, seed: int) -> ParameterStore:
    from .model import init_model_params

    return init_model_params(model_cfg, seed)


# ---------------------------------------------------------------------------
# supervised fine-tuning

def _require_labels(structures: list[AtomicStructure], need_forces: bool) -> None:
    for i, s in enumerate(structures):
        if "energy" not in s.labels:
            raise InputError(f"structure {i} is missing an energy label")
        if need_forces and "forces" not in s.labels:
            raise InputError(f"structure {i} is missing a forces label")


def _supervised_loss(p, model_cfg: ModelConfig, batch, opt_cfg: OptimizerConfig,
                     mode: str) -> Tensor:
    e_true = np.array([s.labels["energy"] for s in batch.structures])
    f_true = np.concatenate([s.labels["forces"] for s in batch.structures])
    if mode == "conservative":
        energies, forces, _ = energy_and_forces(p, model_cfg, batch, create_graph=True)
    else:
        pos = Tensor(batch.positions)
        emb = encode(p, model_cfg, batch, positions=pos)
        energies = structure_energies(p, model_cfg, batch, emb)
        forces = fusion.forces_direct(p, model_cfg, emb, batch.graph, pos,
                                      batch.shift_offsets)
    de = (energies - Tensor(e_true)) * Tensor(1.0 / batch.node_counts)
    df = forces - Tensor(f_true)
    if opt_cfg.loss_form == "mae":
        e_term = ad.absval(de).mean()
        f_term = ad.absval(df).mean()
    else:
        e_term = (de * de).mean()
        f_term = (df * df).mean()
    return e_term * opt_cfg.energy_weight + f_term * opt_cfg.force_weight


def finetune(train: list[AtomicStructure], model_cfg: ModelConfig,
             opt_cfg: OptimizerConfig, mode: str, seed: int,
             store: ParameterStore | None = None,
             val: list[AtomicStructure] | None = None,
             checkpoint_path=None, log_path=None) -> tuple[ParameterStore, dict, list[dict]]:
    """Supervised energy/force training, conservative or direct mode.

    Identical seeds see identical data order in both modes; only the force
    pathway differs.
    """
    if mode not in ("conservative", "direct"):
        raise ValueError(f"unknown training mode: {mode!r}")
    _require_labels(train, need_forces=True)
    if store is None:
        store = init_params_for(model_cfg, seed)
    opt = AdamW(store, opt_cfg)
    rows = []
    for step in range(opt_cfg.steps):
        idx = _batch_indices(seed, step, len(train), opt_cfg.batch_size)
        batch = make_batch([train[i] for i in idx], model_cfg)
        p = store.tensors()
        loss = _supervised_loss(p, model_cfg, batch, opt_cfg, mode)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"fine-tuning diverged: non-finite loss at step {step}")
        grads = {name: g.data for name, g in zip(p, grad(loss, list(p.values())))}
        grads, gnorm = clip_gradients(grads, opt_cfg.clip_norm)
        lr = lr_at(step, opt_cfg)
        opt.step(grads, lr)
        rows.append({"step": step, "lr": lr, "grad_norm": gnorm,
                     "loss": float(loss.data)})

    metrics = evaluate(store, model_cfg, val if val is not None else train, mode)
    _write_log(log_path, rows)
    if checkpoint_path is not None:
        from .config import to_dict

        save_checkpoint(checkpoint_path, store, to_dict(model_cfg), opt_cfg.steps,
                        seed, opt, extra={"mode": mode, "metrics": metrics})
    return store, metrics, rows


def evaluate(store: ParameterStore, model_cfg: ModelConfig,
             structures: list[AtomicStructure], mode: str = "conservative",
             chunk: int = 16) -> dict:
    """Energy-per-atom and force MAEs in the reporting units meV/atom, meV/A."""
    _require_labels(structures, need_forces=True)
    e_err, f_err, n_forces = 0.0, 0.0, 0
    with ad.no_grad() if mode == "direct" else _NoOp():
        for lo in range(0, len(structures), chunk):
            part = structures[lo:lo + chunk]
            batch = make_batch(part, model_cfg)
            p = store.tensors()
            if mode == "conservative":
                energies, forces, _ = energy_and_forces(p, model_cfg, batch)
            else:
                pos = Tensor(batch.positions)
                emb = encode(p, model_cfg, batch, positions=pos)
                energies = structure_energies(p, model_cfg, batch, emb)
                forces = fusion.forces_direct(p, model_cfg, emb, batch.graph, pos,
                                              batch.shift_offsets)
            e_true = np.array([s.labels["energy"] for s in part])
            f_true = np.concatenate([s.labels["forces"] for s in part])
            e_err += float(np.sum(np.abs((energies.data - e_true) / batch.node_counts)))
            f_err += float(np.sum(np.abs(forces.data - f_true)))
            n_forces += f_true.size
    return {
        "energy_mae_mev_per_atom": 1000.0 * e_err / len(structures),
        "force_mae_mev_per_angstrom": 1000.0 * f_err / n_forces,
    }


class _NoOp:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
