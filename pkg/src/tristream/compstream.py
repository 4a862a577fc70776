"""Composition transformer over unique-element tokens.

Stoichiometry enters through two log-count terms: a bias added to every
attention logit, which makes attention over the T unique tokens equal to
attention over the expanded multiset of all N atoms at O(T^2) cost, and a
learned per-token feature that keeps absolute counts visible in the output
(pure attention bias and count-weighted mean pooling are both invariant to
uniformly scaling all counts, so without the feature H2O and H4O2 would
collapse to the same embedding). Setting ``count_pathway=False`` zeroes both
terms.

Token 0 is the trainable mask-token row used when atom types are hidden.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ParameterStore, Tensor

MASK_TOKEN = 0


@dataclass
class CompStreamConfig:
    d_comp: int = 256
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int | None = None
    dropout: float = 0.1
    vocab: int = 100

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_comp
        if self.d_comp % self.n_heads != 0:
            raise ValueError("d_comp must be divisible by n_heads")


def init_comp_params(store: ParameterStore, rng: np.random.Generator,
                     cfg: CompStreamConfig, prefix: str = "comp") -> None:
    store.add(f"{prefix}.embed", rng.normal(scale=1.0, size=(cfg.vocab + 1, cfg.d_comp)))
    store.add(f"{prefix}.count_feature", rng.normal(scale=1.0 / math.sqrt(cfg.d_comp),
                                                    size=(cfg.d_comp,)))
    for layer in range(cfg.n_layers):
        base = f"{prefix}.layer{layer}"
        nn.init_layer_norm(store, f"{base}.ln1", cfg.d_comp)
        for proj in ("wq", "wk", "wv", "wo"):
            nn.init_linear(store, rng, f"{base}.{proj}", cfg.d_comp, cfg.d_comp)
        nn.init_layer_norm(store, f"{base}.ln2", cfg.d_comp)
        nn.init_linear(store, rng, f"{base}.ff1", cfg.d_comp, cfg.d_ff)
        nn.init_linear(store, rng, f"{base}.ff2", cfg.d_ff, cfg.d_comp)
    nn.init_layer_norm(store, f"{prefix}.ln_f", cfg.d_comp)


def count_weighted_attention(logits, counts: np.ndarray):
    """Row-stochastic weights: softmax_s(logit_ts + ln c_s).

    Equals softmax attention over the multiset where token s appears c_s
    times, aggregated by type.
    """
    counts = np.asarray(counts)
    if np.any(counts < 1):
        raise ValueError("counts must be positive integers")
    t = ad.as_tensor(logits)
    biased = t + Tensor(np.log(counts.astype(np.float64)))
    out = nn.softmax(biased, axis=-1)
    return out if isinstance(logits, Tensor) else out.data


def _attention_block(p, base: str, x: Tensor, counts: np.ndarray, cfg: CompStreamConfig,
                     count_pathway: bool, train: bool, rng) -> Tensor:
    T = x.shape[0]
    d_h = cfg.d_comp // cfg.n_heads
    q = nn.linear(p, f"{base}.wq", x)
    k = nn.linear(p, f"{base}.wk", x)
    v = nn.linear(p, f"{base}.wv", x)
    heads = []
    for h in range(cfg.n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        logits = (qh @ kh.transpose((1, 0))) * (1.0 / math.sqrt(d_h))
        if count_pathway:
            weights = count_weighted_attention(logits, counts)
        else:
            weights = nn.softmax(logits, axis=-1)
        heads.append(weights @ vh)
    out = nn.linear(p, f"{base}.wo", ad.concat(heads, axis=1))
    return nn.dropout(out, cfg.dropout, rng, train)


def comp_forward(numbers: np.ndarray, counts: np.ndarray, p: dict[str, Tensor],
                 cfg: CompStreamConfig, prefix: str = "comp", train: bool = False,
                 rng: np.random.Generator | None = None,
                 count_pathway: bool = True) -> tuple[Tensor, Tensor]:
    """Token embeddings (T, d_comp) and the count-weighted mean pooled vector.

    ``numbers`` are atomic numbers in canonical ascending order (0 = mask
    token); positions never enter. Cost depends on T only, not on the atom
    count.
    """
    numbers = np.asarray(numbers, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(numbers < 0) or np.any(numbers > cfg.vocab):
        raise ValueError("unknown element id in composition")
    if np.any(counts < 1):
        raise ValueError("counts must be positive integers")

    x = p[f"{prefix}.embed"][numbers]
    if count_pathway:
        logc = Tensor(np.log(counts.astype(np.float64)).reshape(-1, 1))
        x = x + logc * p[f"{prefix}.count_feature"]
    for layer in range(cfg.n_layers):
        base = f"{prefix}.layer{layer}"
        x = x + _attention_block(p, base, nn.layer_norm(p, f"{base}.ln1", x),
                                 counts, cfg, count_pathway, train, rng)
        ff = nn.linear(p, f"{base}.ff2", ad.silu(nn.linear(p, f"{base}.ff1",
                                                           nn.layer_norm(p, f"{base}.ln2", x))))
        x = x + nn.dropout(ff, cfg.dropout, rng, train)
    tokens = nn.layer_norm(p, f"{prefix}.ln_f", x)

    weights = Tensor((counts / counts.sum()).astype(np.float64).reshape(-1, 1))
    pooled = (tokens * weights).sum(axis=0)
    return tokens, pooled


def layer1_attention_maps(numbers: np.ndarray, counts: np.ndarray, p: dict[str, Tensor],
                          cfg: CompStreamConfig, prefix: str = "comp") -> np.ndarray:
    """Per-head attention weights of the first layer, for equivalence checks."""
    numbers = np.asarray(numbers, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    x = p[f"{prefix}.embed"][numbers]
    logc = Tensor(np.log(counts.astype(np.float64)).reshape(-1, 1))
    x = x + logc * p[f"{prefix}.count_feature"]
    xn = nn.layer_norm(p, f"{prefix}.layer0.ln1", x)
    d_h = cfg.d_comp // cfg.n_heads
    q = nn.linear(p, f"{prefix}.layer0.wq", xn)
    k = nn.linear(p, f"{prefix}.layer0.wk", xn)
    maps = []
    for h in range(cfg.n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        logits = (q[:, sl] @ k[:, sl].transpose((1, 0))) * (1.0 / math.sqrt(d_h))
        maps.append(count_weighted_attention(logits, counts).data)
    return np.stack(maps)


def raw_layer1_logits(numbers: np.ndarray, counts: np.ndarray, p: dict[str, Tensor],
                      cfg: CompStreamConfig, prefix: str = "comp") -> np.ndarray:
    """First-layer logits before the count bias (one array per head)."""
    numbers = np.asarray(numbers, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    x = p[f"{prefix}.embed"][numbers]
    logc = Tensor(np.log(counts.astype(np.float64)).reshape(-1, 1))
    x = x + logc * p[f"{prefix}.count_feature"]
    xn = nn.layer_norm(p, f"{prefix}.layer0.ln1", x)
    d_h = cfg.d_comp // cfg.n_heads
    q = nn.linear(p, f"{prefix}.layer0.wq", xn)
    k = nn.linear(p, f"{prefix}.layer0.wk", xn)
    out = []
    for h in range(cfg.n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        out.append(((q[:, sl] @ k[:, sl].transpose((1, 0))) * (1.0 / math.sqrt(d_h))).data)
    return np.stack(out)
