from __future__ import annotations

import numpy as np

from tristream import theory
from tristream.model import init_model_params


def test_grad_coupling_identity_random_targets():
    rng = np.random.default_rng(0)
    cfg = theory.theory_model_config("mlp")
    store = init_model_params(cfg, seed=0)
    s = theory.random_theory_structure(rng)
    rec = theory.verify_grad_coupling(store, cfg, s, lam=0.7, rng=rng)
    assert rec.passed, rec.value
    assert rec.value <= 1e-3


def test_grad_coupling_lambda_zero_reduces_to_energy_term():
    rng = np.random.default_rng(1)
    cfg = theory.theory_model_config("mlp")
    store = init_model_params(cfg, seed=1)
    s = theory.random_theory_structure(rng)
    rec = theory.verify_grad_coupling(store, cfg, s, lam=0.0, rng=rng, threshold=1e-6)
    assert rec.passed, rec.value


def test_grad_coupling_perfect_targets_both_sides_zero():
    rng = np.random.default_rng(2)
    cfg = theory.theory_model_config("mlp")
    store = init_model_params(cfg, seed=2)
    s = theory.random_theory_structure(rng)
    rec = theory.verify_grad_coupling(store, cfg, s, lam=0.5, rng=rng, perfect_targets=True)
    assert rec.passed
    assert rec.details["grad_scale"] == 0.0


def test_mixed_partial_commutation():
    rng = np.random.default_rng(3)
    cfg = theory.theory_model_config("mlp")
    store = init_model_params(cfg, seed=3)
    s = theory.random_theory_structure(rng)
    rec = theory.verify_mixed_partial_commutation(store, cfg, s)
    assert rec.passed, rec.value


def test_additive_decoupling_and_identity_of_deltas():
    rng = np.random.default_rng(4)
    cfg = theory.theory_model_config("additive")
    store = init_model_params(cfg, seed=4)
    before = {k: v.copy() for k, v in store.items()}
    s = theory.random_theory_structure(rng)
    rec = theory.verify_additive_decoupling(store, cfg, s, rng)
    assert rec.passed
    assert rec.value <= 1e-8
    assert rec.details["energy_change"] > 1e-3
    for k, v in before.items():  # perturbations are rolled back
        np.testing.assert_allclose(store[k], v, atol=1e-15)


def test_zero_delta_changes_nothing():
    rng = np.random.default_rng(5)
    cfg = theory.theory_model_config("additive")
    store = init_model_params(cfg, seed=5)
    s = theory.random_theory_structure(rng)
    rec = theory.verify_additive_decoupling(store, cfg, s, rng, delta_norm=0.0)
    assert rec.value == 0.0
    assert rec.details["energy_change"] == 0.0
    assert not rec.passed  # degenerate perturbation is flagged, not silently ok


def test_full_head_coupling_reported_not_asserted():
    rng = np.random.default_rng(6)
    cfg = theory.theory_model_config("mlp")
    store = init_model_params(cfg, seed=6)
    s = theory.random_theory_structure(rng)
    rec = theory.report_full_head_coupling(store, cfg, s, rng)
    assert rec.passed  # observational
    assert rec.threshold is None
    assert rec.value > 0.0  # a fused head generically couples


def test_rank_bound_records():
    rng = np.random.default_rng(7)
    records = theory.verify_rank_bound(rng, trials=20)
    assert all(r.passed for r in records), [(r.name, r.value) for r in records]
    by_name = {r.name: r for r in records}
    assert by_name["rank_bound_fd_agreement"].value <= 1e-4
    assert by_name["rank_bound_linear_activation_zero"].value == 0.0


def test_silu_second_derivative_matches_fd():
    rng = np.random.default_rng(8)
    x = rng.normal(size=20) * 2
    h = 1e-5
    fd = (theory._silu(x + h) - 2 * theory._silu(x) + theory._silu(x - h)) / h**2
    np.testing.assert_allclose(theory._silu_d2(x), fd, atol=1e-5)


def test_stacked_rank_bound_and_directions():
    cfg = theory.theory_model_config("one_hidden", m=4)
    store = init_model_params(cfg, seed=9)
    s = theory.random_theory_structure(np.random.default_rng(9))
    records = theory.verify_stacked_rank(store, cfg, s, n_theta=200)
    by_name = {r.name: r for r in records}
    rank_rec = by_name["stacked_rank_bound"]
    assert rank_rec.passed
    assert rank_rec.details["dim_theta"] == 200
    assert rank_rec.details["null_dim"] >= 196
    assert by_name["null_direction_force_change"].passed
    assert by_name["top_vs_null_force_ratio"].value >= 1e3


def test_stacked_hessian_matches_fd_route():
    """Exact double-backward block vs the independent FD-of-gradient oracle."""
    from tristream.autodiff import mixed_hessian
    from tristream.model import make_batch

    cfg = theory.theory_model_config("one_hidden", m=3)
    store = init_model_params(cfg, seed=10)
    s = theory.random_theory_structure(np.random.default_rng(10), n=3)
    subset = theory.comp_parameter_subset(store, s, max_components=24)
    exact = theory.stacked_mixed_hessian_exact(store, cfg, s, subset)
    batch = make_batch([s], cfg)
    fd = mixed_hessian(theory._energy_fn(cfg, batch), store, subset, batch.positions)
    assert theory._norm_discrepancy(exact, fd.T) <= 1e-4


def test_zeroed_comp_head_rank_zero():
    cfg = theory.theory_model_config("one_hidden", m=4)
    store = init_model_params(cfg, seed=11)
    s = theory.random_theory_structure(np.random.default_rng(11))
    rec = theory.verify_zeroed_comp_rank(store, cfg, s)
    assert rec.passed
    assert rec.details["max_entry"] == 0.0


def test_suite_runs_and_serializes():
    records = theory.run_theory_suite(seed=12, n_rank_trials=5)
    assert all(r.passed for r in records), [(r.name, r.value) for r in records]
    for r in records:
        doc = r.to_json()
        assert set(doc) == {"name", "value", "threshold", "passed", "details"}
