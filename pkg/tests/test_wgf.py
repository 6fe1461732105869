import math

import numpy as np
import pytest
import torch

from wgftok.data import SyntheticSpec, gen_synthetic
from wgftok.models import ARConfig, ARModel, Tokenizer, TokenizerConfig
from wgftok.wgf import (
    JointTrainState,
    NumericalAbort,
    OptimConfig,
    dpd_train_step,
    exact_kl_rows,
    gaussian_kl_to_standard,
    gaussian_particles,
    gaussian_wgf_demo,
    inject_score_sign_error,
    logit_space_descent,
    particle_gradient,
    prior_matching_score,
    velocity_autodiff,
    velocity_closed_form,
)

K2_Q = torch.log(torch.tensor([[0.5, 0.5]], dtype=torch.float64))
K2_P = torch.log(torch.tensor([[0.9, 0.1]], dtype=torch.float64))


def test_score_vanishes_on_matched_tables():
    lp = torch.log_softmax(torch.randn(4, 6), -1)
    assert torch.equal(prior_matching_score(lp, lp.clone()), torch.zeros(4, 6))


def test_score_k2_values():
    s = prior_matching_score(K2_Q, K2_P)[0]
    assert s.tolist() == pytest.approx([math.log(0.5 / 0.9), math.log(0.5 / 0.1)], abs=1e-12)
    assert s.tolist() == pytest.approx([-0.5878, 1.6094], abs=1e-4)


def test_score_shift_invariance():
    q, p = torch.randn(3, 5, dtype=torch.float64), torch.randn(3, 5, dtype=torch.float64)
    assert torch.allclose(prior_matching_score(q + 7.0, p + 7.0), prior_matching_score(q, p), atol=1e-12)


def test_score_shape_mismatch():
    with pytest.raises(ValueError):
        prior_matching_score(torch.zeros(2, 3), torch.zeros(3, 2))


def test_particle_gradient_lambda_zero_is_reconstruction():
    r = torch.randn(2, 4, 3)
    lq, lp = torch.randn(2, 4, 3), torch.randn(2, 4, 3)
    assert torch.equal(particle_gradient(r, lq, lp, 0.0).g_z, r)


def test_particle_gradient_joint_fixed_point():
    lp = torch.log_softmax(torch.randn(4, 5), -1)
    assert torch.equal(particle_gradient(torch.zeros(4, 5), lp, lp, 0.7).g_z, torch.zeros(4, 5))


def test_descent_direction_moves_mass_toward_target():
    g = particle_gradient(torch.zeros(1, 2, dtype=torch.float64), K2_Q, K2_P, 1.0).g_z[0]
    # P puts more mass on token 0 than Q does, so -g must raise h_0 and lower h_1
    assert -g[0] > 0 and -g[1] < 0
    h = torch.tensor([0.5, 0.5], dtype=torch.float64)
    h_new = (h - 0.01 * g).clamp(min=0)
    h_new = h_new / h_new.sum()
    assert h_new[0] > 0.5


def test_sign_error_hook_flips_score():
    with inject_score_sign_error():
        s = prior_matching_score(K2_Q, K2_P)
    assert torch.equal(s, -prior_matching_score(K2_Q, K2_P))


# -- joint step


def small_state(lambda_wgf, seed=0, train_target=False):
    tc = TokenizerConfig(width=32, heads=4, enc_layers=1, dec_layers=1, codebook_size=32, n_tokens=8, tau_q=0.1)
    ac = ARConfig(vocab=32, n_tokens=8, width=32, heads=4, layers=1)
    return JointTrainState.create(
        Tokenizer(tc, seed=seed), ARModel(ac, seed=seed + 1), ARModel(ac, seed=seed + 2),
        OptimConfig(lr=3e-3), lambda_wgf=lambda_wgf, train_target=train_target,
    )


@pytest.fixture(scope="module")
def images():
    return torch.from_numpy(gen_synthetic(SyntheticSpec(size=512, seed=0)))


def batches(images, count, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    for _ in range(count):
        yield images[torch.randint(0, images.shape[0], (size,), generator=g)]


def test_target_frozen_over_100_steps(images):
    st = small_state(1e-3)
    before = {k: v.clone() for k, v in st.target.state_dict().items()}
    for x in batches(images, 100):
        rec = dpd_train_step(st, x)
    assert rec.wgf_score_norm is not None and rec.wgf_score_norm > 0
    after = st.target.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(p.grad is None for p in st.target.parameters())


def test_lambda_zero_reconstruction_moving_average_decreases(images):
    st = small_state(0.0)
    losses = [dpd_train_step(st, x).l_rec for x in batches(images, 500)]
    windows = np.asarray(losses).reshape(5, 100).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


def test_lambda_zero_skips_score_and_still_trains_proxy(images):
    st = small_state(0.0)
    p0 = [p.clone() for p in st.proxy.parameters()]
    rec = dpd_train_step(st, next(batches(images, 1)))
    assert rec.wgf_score_norm is None and rec.l_ar_proxy is not None
    assert any(not torch.equal(a, b) for a, b in zip(p0, st.proxy.parameters()))


def test_score_changes_tokenizer_update(images):
    x = next(batches(images, 1))
    a, b = small_state(0.0), small_state(10.0)
    dpd_train_step(a, x)
    dpd_train_step(b, x)
    assert not torch.equal(a.tokenizer.enc_out_w, b.tokenizer.enc_out_w)
    # the decoder sees the same reconstruction gradient either way
    assert torch.equal(a.tokenizer.dec_out_w, b.tokenizer.dec_out_w)


def test_warmup_ramps_lambda():
    st = small_state(1.0)
    st.warmup_steps = 10
    st.step = 5
    assert st.effective_lambda() == pytest.approx(0.5)
    st.step = 50
    assert st.effective_lambda() == 1.0


def test_non_finite_input_aborts_without_update(images):
    st = small_state(1e-3)
    before = {k: v.clone() for k, v in st.tokenizer.state_dict().items()}
    x = next(batches(images, 1)).clone()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalAbort):
        dpd_train_step(st, x)
    assert all(torch.equal(before[k], v) for k, v in st.tokenizer.state_dict().items())
    assert st.step == 0


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        dpd_train_step(small_state(0.0), torch.zeros(0, 16, 16, 3))


# -- Gaussian flow


def test_gaussian_fixed_point():
    tr = gaussian_wgf_demo(0.0, 1.0, steps=50, lr=0.05)
    assert max(tr.kls) < 1e-3


def test_gaussian_translation():
    z = gaussian_particles(1.0, 1.0, 10_000, seed=0)
    m, s = float(z.mean()), float(z.std())
    v = velocity_closed_form(z, 1.0, 1.0)
    assert np.allclose(v, -1.0)
    assert np.sqrt(np.mean((velocity_autodiff(z, m, s) - velocity_closed_form(z, m, s)) ** 2)) < 1e-3
    tr = gaussian_wgf_demo(1.0, 1.0, steps=10, lr=0.01)
    steps = -np.diff(tr.means)
    assert np.allclose(steps, 0.01 * np.asarray(tr.means[:-1]) / 1.0, rtol=0.05) or np.allclose(steps, 0.01, rtol=0.05)


@pytest.mark.parametrize("lr", [0.01, 0.05, 0.1])
def test_gaussian_kl_monotone(lr):
    tr = gaussian_wgf_demo(2.0, 0.5, steps=200, lr=lr)
    assert np.all(np.diff(tr.kls) <= 1e-12)
    assert max(tr.velocity_rms_gap) < 1e-3
    assert tr.kls[-1] < tr.kls[0]


def test_gaussian_kl_closed_form():
    assert gaussian_kl_to_standard(0.0, 1.0) == 0.0
    assert gaussian_kl_to_standard(1.0, 1.0) == pytest.approx(0.5)


def test_gaussian_demo_rejects_bad_args():
    with pytest.raises(ValueError):
        gaussian_wgf_demo(0.0, 0.0, 1, 0.1)


# -- logit-space descent


def test_logit_descent_contracts_kl():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal((20, 4))
    log_p = rng.standard_normal((20, 4))
    log_p -= np.log(np.exp(log_p).sum(-1, keepdims=True))
    kls = logit_space_descent(theta, log_p, lr=1e-2, steps=200)
    assert np.all(np.diff(kls, axis=0) <= 1e-15)
    assert np.all(kls[-1] < 0.1 * kls[0])


def test_exact_kl_rows_zero_on_equal():
    lp = np.log(np.full((2, 4), 0.25))
    assert np.allclose(exact_kl_rows(lp, lp), 0.0)


def test_logit_descent_rejects_unknown_route():
    with pytest.raises(ValueError):
        logit_space_descent(np.zeros((1, 2)), np.log(np.full((1, 2), 0.5)), route="nope")
