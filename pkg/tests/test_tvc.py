import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wgftok import tvc
from wgftok.tvc import TabularLVM


def brute_marginal(lvm):
    out = np.zeros(lvm.nx)
    for x in range(lvm.nx):
        for z in range(lvm.nz):
            out[x] += lvm.p_lik[z, x] * lvm.p_prior[z]
    return out


def brute_aggregate(lvm):
    out = np.zeros(lvm.nz)
    for z in range(lvm.nz):
        for x in range(lvm.nx):
            out[z] += lvm.p_data[x] * lvm.q_post[x, z]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_marginal_single_latent(rng):
    lvm = tvc.random_lvm(rng, 5, 1)
    np.testing.assert_allclose(tvc.model_marginal(lvm), lvm.p_lik[0], atol=1e-15)


def test_marginal_independent_likelihood(rng):
    lvm = tvc.random_lvm(rng, 4, 3)
    lvm.p_lik[:] = lvm.p_lik[0]
    np.testing.assert_allclose(tvc.model_marginal(lvm), lvm.p_lik[0], atol=1e-15)


def test_marginal_and_aggregate_match_double_loops(rng):
    lvm = tvc.random_lvm(rng, 3, 4)
    np.testing.assert_allclose(tvc.model_marginal(lvm), brute_marginal(lvm), atol=1e-15)
    np.testing.assert_allclose(tvc.aggregate_posterior(lvm), brute_aggregate(lvm), atol=1e-15)
    assert abs(tvc.model_marginal(lvm).sum() - 1) < 1e-12
    assert abs(tvc.aggregate_posterior(lvm).sum() - 1) < 1e-12


def test_aggregate_of_deterministic_coding_is_pushforward(rng):
    f = np.array([0, 2, 2, 1, 0])
    lvm = tvc.random_lvm(rng, 5, 3)
    lvm.q_post = np.eye(3)[f]
    expected = np.array([lvm.p_data[f == z].sum() for z in range(3)])
    np.testing.assert_allclose(tvc.aggregate_posterior(lvm), expected, atol=1e-15)


def test_aggregate_uniform():
    lvm = TabularLVM(np.full(4, 0.25), np.full(3, 1 / 3), np.full((3, 4), 0.25), np.full((4, 3), 1 / 3))
    np.testing.assert_allclose(tvc.aggregate_posterior(lvm), np.full(3, 1 / 3), atol=1e-15)


def test_tvc_identity_over_random_models(rng):
    worst = 0.0
    for _ in range(100):
        lvm = tvc.random_lvm(rng, int(rng.integers(1, 9)), int(rng.integers(1, 7)))
        worst = max(worst, float(np.abs(tvc.tvc_terms(lvm).residual).max()))
    assert worst <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.05, 5.0))
def test_tvc_identity_property(nx, nz, seed, conc):
    lvm = tvc.random_lvm(np.random.default_rng(seed), nx, nz, concentration=conc)
    assert np.abs(tvc.tvc_terms(lvm).residual).max() <= 1e-10


def test_tvc_single_cell_matches_table(rng):
    lvm = tvc.random_lvm(rng, 4, 3)
    full = tvc.tvc_terms(lvm)
    cell = tvc.tvc_terms(lvm, 2, 1)
    assert cell.likelihood == full.likelihood[2, 1]
    assert cell.posterior == full.posterior[2, 1]


def test_matched_joints_give_zero_terms(rng):
    base = tvc.random_lvm(rng, 5, 4)
    lvm = TabularLVM(
        p_data=base.p_data,
        p_prior=tvc.aggregate_posterior(base),
        p_lik=tvc.variational_likelihood(base),
        q_post=base.q_post,
    )
    t = tvc.tvc_terms(lvm)
    for arr in (t.likelihood, t.prior, t.posterior):
        assert np.abs(arr).max() <= 1e-12
    np.testing.assert_allclose(tvc.model_marginal(lvm), lvm.p_data, atol=1e-15)


def test_zero_cell_rejected(rng):
    lvm = tvc.random_lvm(rng, 3, 3)
    lvm.q_post = np.eye(3)
    with pytest.raises(tvc.SupportError):
        tvc.tvc_terms(lvm)


@pytest.mark.parametrize("case", [1, 2])
def test_redundancy_cases_one_and_two(rng, case):
    for _ in range(20):
        lvm = tvc.construct_case(case, rng, int(rng.integers(2, 9)), int(rng.integers(2, 7)))
        report = tvc.redundancy_check(case, lvm)
        assert report.premises_hold
        assert report.status == "verified", report
        assert report.implied_residual <= 1e-10
        assert report.marginal_residual <= 1e-10


def test_redundancy_case_three_complete(rng):
    for nx in (2, 3, 5):
        lvm = tvc.construct_case(3, rng, nx, nx + 1)
        report = tvc.redundancy_check(3, lvm)
        assert report.complete
        assert report.status == "verified"


def test_redundancy_case_three_rank_deficient_flagged(rng):
    lvm = tvc.construct_case(3, rng, 4, 4, rank_deficient=True)
    report = tvc.redundancy_check(3, lvm)
    assert report.premises_hold
    assert not report.complete
    assert report.status == "not guaranteed"
    # and the guarantee really fails: same posterior and prior, different likelihood
    cex = tvc.case3_counterexample(lvm)
    assert cex is not None
    gaps = tvc.consistency_gaps(cex)
    assert gaps["posterior"] <= 1e-12 and gaps["prior"] <= 1e-12
    assert gaps["likelihood"] > 1e-3
    assert tvc.redundancy_check(3, cex).status == "not guaranteed"


def test_case_three_counterexample_absent_when_complete(rng):
    lvm = tvc.construct_case(3, rng, 3, 5)
    assert tvc.case3_counterexample(lvm) is None


def test_premise_violation_reported(rng):
    report = tvc.redundancy_check(1, tvc.random_lvm(rng, 4, 3))
    assert report.status == "premise violated"


def test_elbo_identity_random(rng):
    for _ in range(50):
        d = tvc.elbo_decomposition(tvc.random_lvm(rng, 6, 4))
        assert d.residual <= 1e-10
        assert d.expansion_residual <= 1e-10
        assert d.posterior_gap >= 0


def test_elbo_tight_when_encoder_is_model_posterior(rng):
    lvm = tvc.random_lvm(rng, 5, 3)
    lvm.q_post = tvc.model_posterior(lvm)
    d = tvc.elbo_decomposition(lvm)
    assert abs(d.posterior_gap) <= 1e-12
    assert abs(d.elbo - d.loglik) <= 1e-10


def test_deterministic_coding_has_zero_conditional_entropy(rng):
    lvm = tvc.random_lvm(rng, 6, 3)
    lvm.q_post = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    d = tvc.elbo_decomposition(lvm)
    assert d.conditional_entropy == 0.0
    assert d.expansion_residual <= 1e-10
    # with H(Z|X) = 0 the instance KL is H(Z) + KL(q(z)||p(z))
    qz = tvc.aggregate_posterior(lvm)
    assert abs(d.kl_expansion_lhs - (tvc.entropy(qz) + tvc.exact_kl(qz, lvm.p_prior))) <= 1e-12


def test_exact_kl_values():
    assert tvc.exact_kl([0.3, 0.7], [0.3, 0.7]) == 0.0
    # 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
    assert tvc.exact_kl([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.510826, abs=1e-4)
    assert tvc.exact_kl([0.0, 1.0], [0.5, 0.5]) == pytest.approx(np.log(2))


def test_exact_kl_support_violation():
    with pytest.raises(tvc.SupportError):
        tvc.exact_kl([0.5, 0.5], [1.0, 0.0])


def test_kl_nonnegative_and_zero_iff_equal(rng):
    for _ in range(1000):
        q = rng.dirichlet(np.ones(5))
        p = rng.dirichlet(np.ones(5))
        assert tvc.exact_kl(q, p) >= 0
    q = rng.dirichlet(np.ones(5))
    assert tvc.exact_kl(q, q) == 0.0
    p = q.copy()
    p[0] += 1e-4
    p /= p.sum()
    assert tvc.exact_kl(q, p) > 0


def test_surrogate_decomposition(rng):
    for _ in range(200):
        q, qp, p = (rng.dirichlet(np.ones(7)) for _ in range(3))
        assert tvc.surrogate_decomposition(q, qp, p).residual <= 1e-10
    q = rng.dirichlet(np.ones(7))
    p = rng.dirichlet(np.ones(7))
    d = tvc.surrogate_decomposition(q, q, p)
    assert abs(d.surrogate - tvc.exact_kl(q, p)) <= 1e-12


def test_exact_aggregate_point_mass():
    data = np.zeros((10, 3))
    q = tvc.exact_ar_aggregate(lambda x: np.tile([1, 2], (len(x), 1)), data, n=2, K=3)
    assert q[1 * 3 + 2] == 1.0 and q.sum() == 1.0


def test_exact_aggregate_first_token_histogram():
    ids = np.array([[0], [2], [2], [1], [2]])
    q = tvc.exact_ar_aggregate(lambda x: ids, np.zeros(5), n=1, K=3)
    np.testing.assert_allclose(q, [0.2, 0.2, 0.6])


def test_exact_aggregate_matches_counting():
    rng = np.random.default_rng(7)
    data = rng.integers(0, 4, size=(256, 2))  # the "encoder" reads two digits
    q = tvc.exact_ar_aggregate(lambda x: x, data, n=2, K=4)
    for a, b in itertools.product(range(4), range(4)):
        count = np.sum((data[:, 0] == a) & (data[:, 1] == b))
        assert q[a * 4 + b] == count / 256


def test_exact_aggregate_too_large():
    with pytest.raises(ValueError):
        tvc.exact_ar_aggregate(lambda x: x, np.zeros((1, 5)), n=5, K=64)
