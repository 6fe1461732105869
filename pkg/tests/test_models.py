import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

import wgftok.autodiff as ad
from wgftok.models import (
    ARConfig,
    ARModel,
    Tokenizer,
    TokenizerConfig,
    ar_log_probs,
    ar_loss,
    ar_sample,
    quantize,
    reconstruction_loss,
)
from wgftok.oracles import tiny_tokenizer_config


def small_ar(vocab=8, n=6, seed=0, layers=2):
    return ARModel(ARConfig(vocab=vocab, n_tokens=n, width=32, heads=4, layers=layers), seed=seed)


# -- tokenizer


def test_encode_shape_and_determinism():
    cfg = TokenizerConfig(n_tokens=4, code_dim=16)
    x = torch.rand(2, 16, 16, 3, generator=torch.Generator().manual_seed(0))
    u1 = Tokenizer(cfg, seed=3).encode(x)
    u2 = Tokenizer(cfg, seed=3).encode(x)
    assert u1.shape == (2, 4, 16)
    assert torch.equal(u1, u2)


def test_encode_zero_projection_gives_equal_rows():
    tk = Tokenizer(TokenizerConfig(n_tokens=4), seed=1)
    with torch.no_grad():
        tk.enc_out_w.zero_()
        tk.enc_out_b.normal_()
    u = tk.encode(torch.zeros(1, 16, 16, 3))
    assert torch.equal(u[0], u[0, :1].expand_as(u[0]))


def test_encode_rejects_wrong_image_shape():
    with pytest.raises(ad.ShapeError):
        Tokenizer(TokenizerConfig()).encode(torch.zeros(1, 8, 8, 3))


def test_quantize_exact_code_wins():
    cb = torch.nn.functional.normalize(torch.randn(5, 4, generator=torch.Generator().manual_seed(2)), dim=-1)
    tok = quantize(cb[2:3] * 3.0, cb, tau_q=0.1)
    assert tok.ids.tolist() == [2]
    h = tok.h[0]
    assert h[2] > torch.cat([h[:2], h[3:]]).max()


def test_quantize_tie_breaks_to_lower_index():
    cb = torch.tensor([[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
    u = torch.tensor([[1.0, 1.0]])  # equidistant from codes 0 and 1
    assert quantize(u, cb, tau_q=1.0).ids.tolist() == [0]


def test_quantize_softmax_of_negative_distances():
    # unit u on the first axis; codes at squared distances 0, 1, 1
    s = math.sqrt(0.75)  # unit codes at cosine 0.5 sit at squared distance 1
    cb = torch.tensor([[1.0, 0.0, 0.0], [0.5, s, 0.0], [0.5, 0.0, s]], dtype=torch.float64)
    tok = quantize(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64), cb, tau_q=1.0)
    expected = torch.softmax(torch.tensor([0.0, -1.0, -1.0], dtype=torch.float64), 0)
    assert torch.allclose(tok.h[0], expected, atol=1e-12)
    assert np.allclose(tok.h[0].numpy(), [0.576, 0.212, 0.212], atol=5e-4)


def test_quantize_rejects_bad_arguments():
    with pytest.raises(ValueError):
        quantize(torch.zeros(1, 2), torch.zeros(1, 2), 1.0)
    with pytest.raises(ValueError):
        quantize(torch.zeros(1, 2), torch.zeros(3, 2), 0.0)


def test_decode_shape_and_determinism():
    cfg = TokenizerConfig(n_tokens=4)
    tk = Tokenizer(cfg, seed=0)
    ids = torch.tensor([[1, 5, 9, 2]])
    a, b = tk.decode_ids(ids), tk.decode_ids(ids)
    assert a.shape == (1, 16, 16, 3)
    assert torch.equal(a, b)


def test_decode_mask_keep_full_is_identity():
    tk = Tokenizer(TokenizerConfig(n_tokens=4), seed=0)
    ids = torch.tensor([[1, 5, 9, 2]])
    assert torch.equal(tk.decode_ids(ids), tk.decode_ids(ids, keep=torch.tensor([4])))
    assert not torch.equal(tk.decode_ids(ids), tk.decode_ids(ids, keep=torch.tensor([2])))


class _Decoder(torch.nn.Module):
    def __init__(self, tk):
        super().__init__()
        self.tk = tk

    def forward(self, z):
        return self.tk.decode(z)


def test_decoder_gradient_passes_grad_check():
    dec = _Decoder(Tokenizer(tiny_tokenizer_config(), seed=0).double())
    params = {n: p.detach().clone() for n, p in dec.named_parameters()}
    x = torch.rand(1, 4, 4, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    z = torch.nn.functional.one_hot(torch.tensor([[0, 3, 1]]), 5).double()
    inputs = {n.replace(".", "/"): v for n, v in params.items() if n.startswith("tk.dec_")}

    def f(**trainable):
        p = {**params, **{n.replace("/", "."): v for n, v in trainable.items()}}
        return ad.sum(ad.square(x - functional_call(dec, p, (z,))))

    g = ad.GraphFunction(f, {n: tuple(v.shape) for n, v in inputs.items()})
    rep = ad.grad_check(g, inputs, tol=1e-4)
    assert rep.passed, rep.max_rel_err


def test_codebook_renormalisation():
    tk = Tokenizer(TokenizerConfig(), seed=0)
    with torch.no_grad():
        tk.codebook.mul_(3.0)
    tk.renormalize_codebook()
    assert torch.allclose(tk.codebook.norm(dim=-1), torch.ones(tk.cfg.codebook_size), atol=1e-6)


def test_reconstruction_loss_values():
    x = torch.rand(2, 4, 4, 3)
    assert reconstruction_loss(x, x).item() == 0.0
    assert reconstruction_loss(x + 1.0, x).item() == pytest.approx(1.1)
    r = torch.randn_like(x)
    assert torch.allclose(reconstruction_loss(x, x + r), reconstruction_loss(x, x - r))
    assert reconstruction_loss(x + 1.0, x, reduce=False).shape == (2,)
    with pytest.raises(ad.ShapeError):
        reconstruction_loss(x, x[:1])


def test_tokenizer_config_validation():
    with pytest.raises(ValueError):
        TokenizerConfig(codebook_size=1).validate()
    with pytest.raises(ValueError):
        TokenizerConfig(patch=5).validate()


# -- autoregressive model


def test_zeroed_head_is_uniform():
    m = small_ar(vocab=8)
    m.zero_head()
    ids = torch.randint(0, 8, (3, 6), generator=torch.Generator().manual_seed(0))
    assert torch.allclose(ar_log_probs(m, ids), torch.full((3, 6, 8), -math.log(8)))
    assert ar_loss(m, ids).item() == pytest.approx(math.log(8))


def test_first_row_ignores_ids_and_causality():
    m = small_ar()
    ids = torch.tensor([[1, 2, 3, 4, 5, 6]])
    base = ar_log_probs(m, ids)
    other = ar_log_probs(m, torch.tensor([[7, 0, 7, 0, 7, 0]]))
    assert torch.equal(base[0, 0], other[0, 0])
    for t in range(1, 6):
        changed = ids.clone()
        changed[0, t] = (changed[0, t] + 3) % 8
        lp = ar_log_probs(m, changed)
        assert torch.equal(lp[0, : t + 1], base[0, : t + 1])
        if t < 5:
            assert not torch.allclose(lp[0, t + 1 :], base[0, t + 1 :])


def test_ar_loss_is_mean_negative_gathered_log_prob():
    m = small_ar()
    ids = torch.randint(0, 8, (4, 6), generator=torch.Generator().manual_seed(1))
    lp = ar_log_probs(m, ids)
    manual = -lp.gather(-1, ids.unsqueeze(-1)).mean()
    assert ar_loss(m, ids).item() == pytest.approx(manual.item(), rel=1e-6)


def test_ar_rejects_out_of_range_ids():
    with pytest.raises(ValueError):
        ar_log_probs(small_ar(), torch.tensor([[8, 0]]))


def test_memorising_single_sequence():
    torch.manual_seed(0)
    m = small_ar(vocab=16, n=8, layers=2)
    ids = torch.tensor([[3, 14, 1, 5, 9, 2, 6, 5]])
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    for _ in range(2000):
        opt.zero_grad()
        loss = ar_loss(m, ids)
        loss.backward()
        opt.step()
    assert ar_loss(m, ids).item() < 0.01


def test_temperature_zero_is_greedy():
    m = small_ar()
    ids = ar_sample(m, 6, 0.0, seed=0, batch=2)
    assert torch.equal(ids[0], ids[1])
    for t in range(6):
        assert ids[0, t].item() == int(m.logits(ids[:, : t + 1])[0, t].argmax())


def test_zeroed_head_sampling_reproducible():
    m = small_ar()
    m.zero_head()
    a = ar_sample(m, 6, 1.0, seed=5, batch=4)
    assert torch.equal(a, ar_sample(m, 6, 1.0, seed=5, batch=4))
    assert not torch.equal(a, ar_sample(m, 6, 1.0, seed=6, batch=4))


def test_sample_unigram_within_three_sigma():
    m = ARModel(ARConfig(vocab=5, n_tokens=1, width=16, heads=2, layers=1), seed=0)
    with torch.no_grad():
        m.head_b.copy_(torch.tensor([1.0, 0.0, -1.0, 0.5, -0.3]))
    p = torch.softmax(m.logits(torch.zeros(1, 1, dtype=torch.long))[0, 0].detach().double(), 0).numpy()
    N = 100_000
    ids = ar_sample(m, 1, 1.0, seed=11, batch=N)[:, 0].numpy()
    freq = np.bincount(ids, minlength=5)
    sigma = np.sqrt(N * p * (1 - p))
    assert np.all(np.abs(freq - N * p) <= 3 * sigma)
