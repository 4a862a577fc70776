"""Synthetic datasets: a pair-potential corpus with exact labels and a
composition-by-geometry crossed corpus for retrieval semantics.

The pair potential is a Lennard-Jones form with species-dependent well
depths, so energies carry a strong compositional signal while forces are
purely geometric; energies and forces are computed in closed form,
independent of any model code.
"""

from __future__ import annotations

import numpy as np

from .structdata import AtomicStructure

LJ_SIGMA = 1.6  # Angstrom
LJ_SPECIES = (1, 3, 6, 8, 13, 26)


def lj_well_depth(z: int) -> float:
    return 0.05 + 0.03 * z


def lj_energy_forces(species: np.ndarray, positions: np.ndarray) -> tuple[float, np.ndarray]:
    """Closed-form energy (eV) and forces (eV/A) of the pair potential."""
    n = len(species)
    energy = 0.0
    forces = np.zeros((n, 3))
    eps = np.array([lj_well_depth(int(z)) for z in species])
    for i in range(n):
        for j in range(i + 1, n):
            d = positions[i] - positions[j]
            r = float(np.linalg.norm(d))
            e_ij = float(np.sqrt(eps[i] * eps[j]))
            sr6 = (LJ_SIGMA / r) ** 6
            energy += 4.0 * e_ij * (sr6 * sr6 - sr6)
            de_dr = 4.0 * e_ij * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r
            f = -de_dr * d / r
            forces[i] += f
            forces[j] -= f
    return energy, forces


def _cluster_positions(rng: np.random.Generator, n: int, min_dist: float,
                       spread: float) -> np.ndarray:
    while True:
        pos = rng.uniform(0.0, spread, size=(n, 3))
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        d[np.diag_indices(n)] = np.inf
        if d.min() >= min_dist:
            return pos


def lj_dataset(n_structures: int, seed: int = 0) -> list[AtomicStructure]:
    """Random small clusters labeled with exact energies and forces."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_structures):
        n = int(rng.integers(3, 8))
        species = rng.choice(LJ_SPECIES, size=n)
        positions = _cluster_positions(rng, n, min_dist=0.95 * LJ_SIGMA,
                                       spread=1.1 * n ** (1 / 3) * LJ_SIGMA + 1.0)
        energy, forces = lj_energy_forces(species, positions)
        out.append(AtomicStructure(species, positions,
                                   labels={"energy": energy, "forces": forces}))
    return out


# ---------------------------------------------------------------------------
# crossed corpus: composition family x geometry family

_BASE_SHAPES = {
    "tetrahedron": np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    / (2 * np.sqrt(2.0)),
    "square": np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float),
    "chain": np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float),
    "rectangle": np.array([[0, 0, 0], [1, 0, 0], [1, 2, 0], [0, 2, 0]], dtype=float),
    "zigzag": np.array([[0, 0, 0], [1, 0, 0], [1.5, 0.866, 0], [2.5, 0.866, 0]]),
}
_SHAPE_SCALES = (1.1, 1.45, 1.8, 2.15, 2.5)


def n_geometry_families() -> int:
    return len(_BASE_SHAPES) * len(_SHAPE_SCALES)


def geometry_family_positions(family: int, rng: np.random.Generator,
                              jitter: float = 0.02) -> np.ndarray:
    shape = list(_BASE_SHAPES.values())[family % len(_BASE_SHAPES)]
    scale = _SHAPE_SCALES[family // len(_BASE_SHAPES)]
    return shape * scale + rng.normal(scale=jitter, size=shape.shape)


def cross_corpus(n_comp_families: int = 20, seed: int = 0,
                 jitter: float = 0.02) -> list[AtomicStructure]:
    """One structure per (composition family, geometry family) cell.

    Composition family f uses the element pair (2f+1, 2f+2) with counts
    (2, 2); the geometry family id is stored as the space_group label (labels
    are ingested, never computed) and geometry family mod 7 as crystal_system.
    """
    rng = np.random.default_rng(seed)
    out = []
    for comp in range(n_comp_families):
        z1, z2 = 2 * comp + 1, 2 * comp + 2
        species = np.array([z1, z1, z2, z2])
        for geom in range(n_geometry_families()):
            positions = geometry_family_positions(geom, rng, jitter)
            labels = {
                "space_group": geom,
                "crystal_system": geom % 7,
                "formation_energy": -0.1 * comp + float(rng.normal(scale=0.01)),
            }
            out.append(AtomicStructure(species.copy(), positions, labels=labels))
    return out
