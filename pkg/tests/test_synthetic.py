from __future__ import annotations

import numpy as np

from tristream import synthetic


def test_lj_dataset_labels_present_and_finite():
    data = synthetic.lj_dataset(10, seed=0)
    assert len(data) == 10
    for s in data:
        assert np.isfinite(s.labels["energy"])
        assert s.labels["forces"].shape == (s.n_atoms, 3)
        assert np.all(np.isfinite(s.labels["forces"]))
        # net force of a pair potential is zero
        np.testing.assert_allclose(s.labels["forces"].sum(axis=0), 0.0, atol=1e-12)


def test_lj_energy_depends_on_species():
    pos = np.array([[0.0, 0, 0], [1.8, 0, 0]])
    e1, _ = synthetic.lj_energy_forces(np.array([1, 1]), pos)
    e2, _ = synthetic.lj_energy_forces(np.array([26, 26]), pos)
    assert e2 < e1 < 0  # deeper well for heavier species at this distance


def test_cross_corpus_layout():
    corpus = synthetic.cross_corpus(n_comp_families=20, seed=0)
    assert len(corpus) == 20 * synthetic.n_geometry_families() == 500
    sets = {tuple(sorted(set(s.species.tolist()))) for s in corpus}
    assert len(sets) == 20
    geoms = {s.labels["space_group"] for s in corpus}
    assert len(geoms) == synthetic.n_geometry_families()
    # exactly one record per (composition, geometry) cell
    cells = {(tuple(sorted(set(s.species.tolist()))), s.labels["space_group"])
             for s in corpus}
    assert len(cells) == 500


def test_cross_corpus_geometry_families_distinct():
    rng = np.random.default_rng(1)
    a = synthetic.geometry_family_positions(0, rng, jitter=0.0)
    b = synthetic.geometry_family_positions(7, rng, jitter=0.0)
    assert a.shape == b.shape == (4, 3)
    da = np.sort(np.linalg.norm(a[:, None] - a[None, :], axis=-1).reshape(-1))
    db = np.sort(np.linalg.norm(b[:, None] - b[None, :], axis=-1).reshape(-1))
    assert np.max(np.abs(da - db)) > 0.1
