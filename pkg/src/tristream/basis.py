"""Radial bases, smooth multi-scale cutoff envelopes, and real spherical harmonics.

All functions accept either plain arrays or tape tensors and are smooth in
their geometric arguments, so gradients flow through them during force
computation. Spherical harmonics are real and orthonormal on the unit sphere
(no Condon-Shortley phase); within each degree l the order runs m = -l..l,
with positive m carrying the cosine-type and negative m the sine-type
component. They are evaluated as polynomials in the Cartesian components, so
there is no coordinate singularity at the poles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class RadialBasisSpec:
    kind: str = "bessel"
    count: int = 8
    r_cut: float = 6.0

    def __post_init__(self):
        if self.kind not in ("bessel", "gaussian"):
            raise ValueError(f"unknown radial basis kind: {self.kind!r}")
        if self.count < 1:
            raise ValueError("basis count must be at least 1")
        if self.r_cut <= 0:
            raise ValueError("r_cut must be positive")


@dataclass
class CutoffBank:
    """Cutoff radii expressed as fractions of the radial basis r_cut."""

    scales: tuple = (0.5, 0.75, 1.0)

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not all(0.0 < s <= 1.0 for s in self.scales):
            raise ValueError("cutoff scales must lie in (0, 1]")

    @property
    def n_scales(self) -> int:
        return len(self.scales)


def _wrap(r):
    """Return (tensor, was_tensor) for array-or-tensor input."""
    if isinstance(r, Tensor):
        return r, True
    return Tensor(np.asarray(r, dtype=np.float64)), False


def _unwrap(t: Tensor, was_tensor: bool):
    return t if was_tensor else t.data


def eval_radial(spec: RadialBasisSpec, r):
    """Evaluate the K radial basis functions at distances ``r > 0``.

    Bessel: sqrt(2/r_cut) * sin(k pi r / r_cut) / r, which vanishes at r_cut.
    Gaussian: unit-height bumps with centers uniform on [0, r_cut] and width
    equal to the center spacing.
    """
    t, was = _wrap(r)
    if np.any(t.data <= 0.0):
        raise ValueError("radial basis requires r > 0")
    col = t.reshape(t.shape + (1,))
    if spec.kind == "bessel":
        k = np.arange(1, spec.count + 1, dtype=np.float64)
        arg = col * Tensor(k * math.pi / spec.r_cut)
        out = ad.sin(arg) * Tensor(np.array(math.sqrt(2.0 / spec.r_cut))) / col
    else:
        centers = np.linspace(0.0, spec.r_cut, spec.count)
        width = spec.r_cut / max(spec.count - 1, 1)
        delta = col - Tensor(centers)
        out = ad.exp(delta * delta * Tensor(np.array(-0.5 / width**2)))
    return _unwrap(out, was)


def eval_cutoff(scale_radius: float, r):
    """Smooth cosine envelope: 0.5*(cos(pi r / r_c) + 1) inside r_c, zero beyond.

    Continuously differentiable at r_c because the derivative also vanishes
    there.
    """
    if scale_radius <= 0:
        raise ValueError("scale_radius must be positive")
    t, was = _wrap(r)
    inside = (t.data < scale_radius).astype(np.float64)
    env = (ad.cos(t * Tensor(np.array(math.pi / scale_radius))) + 1.0) * 0.5
    out = env * Tensor(inside)
    return _unwrap(out, was)


def multiscale_features(spec: RadialBasisSpec, bank: CutoffBank, r):
    """Concatenated per-scale radial features, scale-major: block s holds
    s_s(r) * phi_k(r) for k = 1..K. Entries with r beyond a scale radius are
    exactly zero."""
    t, was = _wrap(r)
    radial = eval_radial(spec, t)
    blocks = []
    for s in bank.scales:
        env = eval_cutoff(s * spec.r_cut, t)
        blocks.append(radial * env.reshape(env.shape + (1,)))
    out = ad.concat(blocks, axis=-1) if len(blocks) > 1 else blocks[0]
    return _unwrap(out, was)


# ---------------------------------------------------------------------------
# real spherical harmonics

def _sh_norm(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4.0 * math.pi)
                     * math.factorial(l - m) / math.factorial(l + m))


def eval_sph_harm(direction, l_max: int):
    """Real orthonormal spherical harmonics of a unit direction, l = 0..l_max.

    ``direction`` has shape (..., 3) with unit rows (checked to 1e-8). Output
    shape is (..., (l_max+1)^2) ordered by (l, m) with m = -l..l.
    """
    t, was = _wrap(direction)
    if t.shape[-1] != 3:
        raise ValueError("direction must have a trailing axis of size 3")
    norms = np.linalg.norm(t.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-8):
        raise ValueError("directions must be unit vectors (|d| = 1 within 1e-8)")

    x = t[..., 0]
    y = t[..., 1]
    z = t[..., 2]
    one = Tensor(np.ones_like(x.data))

    # C_m + i S_m = (x + i y)^m carries the sin^m(theta) factor as a polynomial
    cos_m = [one]
    sin_m = [Tensor(np.zeros_like(x.data))]
    for m in range(1, l_max + 1):
        cos_m.append(x * cos_m[m - 1] - y * sin_m[m - 1])
        sin_m.append(x * sin_m[m - 1] + y * cos_m[m - 1])

    # q[l][m]: associated Legendre part with the sin^m factor divided out
    q = [[None] * (l_max + 1) for _ in range(l_max + 1)]
    q[0][0] = one
    for m in range(1, l_max + 1):
        q[m][m] = q[m - 1][m - 1] * float(2 * m - 1)
    for m in range(l_max):
        q[m + 1][m] = z * q[m][m] * float(2 * m + 1)
    for m in range(l_max + 1):
        for l in range(m + 2, l_max + 1):
            a = float(2 * l - 1) / (l - m)
            b = float(l + m - 1) / (l - m)
            q[l][m] = z * q[l - 1][m] * a - q[l - 2][m] * b

    comps = []
    sqrt2 = math.sqrt(2.0)
    for l in range(l_max + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            k = _sh_norm(l, am)
            if m == 0:
                comps.append(q[l][0] * k)
            elif m > 0:
                comps.append(q[l][am] * cos_m[am] * (sqrt2 * k))
            else:
                comps.append(q[l][am] * sin_m[am] * (sqrt2 * k))

    cols = [c.reshape(c.shape + (1,)) for c in comps]
    out = ad.concat(cols, axis=-1)
    return _unwrap(out, was)


def lm_index(l: int, m: int) -> int:
    return l * l + l + m
