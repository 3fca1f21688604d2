import numpy as np
import pytest

from wavecorr import verify
from wavecorr.blocks import AssetPermutation
from wavecorr.env import CommissionRates
from wavecorr.policy import PolicySpec, init_params


def test_grid_scan_matches_closed_form():
    nu = verify.grid_scan_nu(np.array([1.0, 0.0]), np.array([0.0, 1.0]), CommissionRates(0.005, 0.005))
    assert nu == pytest.approx(0.995 / 1.005, abs=2e-9)


def test_zhang_constraints_are_contradictory():
    w_bar = np.array([0.3, -0.2, 0.5, 0.9, 0.1])
    forced = verify.derive_zhang_constraints(w_bar, AssetPermutation.swap(5, 0, 1))
    assert all(v == 0.0 for tag, _, v in forced[5] if tag == "zero")
    w2 = {tag: v for tag, _, v in forced[1]}
    assert w2["e1"] == 0.9 and w2["e2"] == 0.3


def test_identity_permutation_has_a_witness():
    w_bar = np.array([0.3, -0.2, 0.5, 0.9, 0.1])
    assert verify.witness_residual(w_bar, 0.0, w_bar, AssetPermutation.identity(5)) == 0.0
    assert verify.witness_residual(w_bar, 0.0, w_bar, AssetPermutation.swap(5, 0, 1)) > 0.1


def test_finite_difference_check_flags_wrong_gradient():
    p = init_params(PolicySpec(m=2, h=29), 0)
    name = "head.bias"
    objective = lambda: float(3.0 * p.store[name].sum())
    right = {n: np.zeros_like(p.store[n]) for n in p.store}
    right[name] = np.full_like(p.store[name], 3.0)
    assert verify.finite_difference_check(p, objective, right)[0] == []
    wrong = dict(right)
    wrong[name] = np.full_like(p.store[name], 3.1)
    assert len(verify.finite_difference_check(p, objective, wrong)[0]) == 1


@pytest.mark.parametrize("name", ["bisection", "invariance", "counterexample"])
def test_quick_suites_pass(name):
    assert all(r.passed for r in verify.run_suite(name, quick=True))


def test_unknown_suite():
    with pytest.raises(KeyError):
        verify.run_suite("nope")
