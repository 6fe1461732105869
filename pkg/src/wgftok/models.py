"""1D image tokenizer (query encoder, L2-normalised VQ, decoder) and AR priors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .rng import Xoshiro256

Tensor = torch.Tensor

NORM_EPS = 1e-8


@dataclass
class TokenizerConfig:
    image_size: int = 16
    channels: int = 3
    patch: int = 4
    n_tokens: int = 16
    codebook_size: int = 64
    code_dim: int = 16
    width: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    mlp_ratio: int = 4
    tau_q: float = 0.1

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ValueError("codebook_size (K) must be >= 2")
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if self.tau_q <= 0:
            raise ValueError("tau_q must be positive")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class ARConfig:
    vocab: int = 64
    n_tokens: int = 16
    width: int = 64
    heads: int = 4
    layers: int = 3
    mlp_ratio: int = 4
    temperature: float = 1.0

    def validate(self) -> None:
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


def _normal(shape, std, gen) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen) * std)


class Block(nn.Module):
    """Pre-norm transformer block: RMSNorm, attention, RMSNorm, GEGLU."""

    def __init__(self, width: int, heads: int, mlp_ratio: int, causal: bool, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        self.causal = causal
        hidden = mlp_ratio * width // 2
        std = 0.02
        self.norm1 = nn.Parameter(torch.ones(width))
        self.w_qkv = _normal((width, 3 * width), std, gen)
        self.w_o = _normal((width, width), std, gen)
        self.norm2 = nn.Parameter(torch.ones(width))
        self.w_in = _normal((width, 2 * hidden), std, gen)
        self.w_out = _normal((hidden, width), std, gen)

    def forward(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        H = self.heads
        h = ad.rms_norm(x, self.norm1)
        qkv = ad.matmul(h, self.w_qkv)
        qkv = ad.transpose(ad.reshape(qkv, B, T, 3 * H, D // H), 1, 2)
        q, k, v = qkv.split(H, dim=1)
        a = ad.attention(q, k, v, causal=self.causal)
        a = ad.reshape(ad.transpose(a, 1, 2), B, T, D)
        x = ad.add(x, ad.matmul(a, self.w_o))
        h = ad.rms_norm(x, self.norm2)
        return ad.add(x, ad.geglu(h, self.w_in, self.w_out))


@dataclass
class TokenSequence:
    """Quantizer output for a batch: ids ``(B, n)``, one-hot ``z`` and simplex ``h``.

    ``z`` carries the straight-through gradient path into ``h``.
    """

    ids: Tensor
    z: Tensor
    h: Tensor
    logits: Tensor

    @property
    def n(self) -> int:
        return self.ids.shape[-1]


def quantize(u: Tensor, codebook: Tensor, tau_q: float) -> TokenSequence:
    """Nearest unit-norm code with probability-STE.

    ``logits_k = -|u/|u| - c_k|^2 / tau_q``, ``h = softmax(logits)``,
    ``ids = argmax h`` (lowest index on ties) and ``z = onehot(ids)`` with
    backward ``dz/dh = I``.
    """
    K = codebook.shape[0]
    if K < 2:
        raise ValueError("codebook needs at least 2 entries")
    if tau_q <= 0:
        raise ValueError("tau_q must be positive")
    norm = torch.sqrt(ad.sum(ad.square(u), dim=-1, keepdim=True))
    u_hat = u / (norm + NORM_EPS)
    d2 = (
        ad.sum(ad.square(u_hat), dim=-1, keepdim=True)
        + ad.sum(ad.square(codebook), dim=-1)
        - 2.0 * ad.matmul(u_hat, ad.transpose(codebook, 0, 1))
    )
    logits = ad.mul(d2, -1.0 / tau_q)
    h = ad.softmax(logits)
    z = ad.ste_onehot(h)
    ids = ad.first_argmax(h)
    return TokenSequence(ids=ids, z=z, h=h, logits=logits)


class Tokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        D, P, n = cfg.width, cfg.n_patches, cfg.n_tokens
        std = 0.02
        # encoder
        self.enc_patch_w = _normal((cfg.patch_dim, D), 1.0 / math.sqrt(cfg.patch_dim), gen)
        self.enc_patch_b = nn.Parameter(torch.zeros(D))
        self.enc_pos = _normal((P, D), std, gen)
        self.queries = _normal((n, D), 1.0, gen)
        self.enc_blocks = nn.ModuleList(
            Block(D, cfg.heads, cfg.mlp_ratio, False, gen) for _ in range(cfg.enc_layers)
        )
        self.enc_norm = nn.Parameter(torch.ones(D))
        self.enc_out_w = _normal((D, cfg.code_dim), 1.0 / math.sqrt(D), gen)
        self.enc_out_b = nn.Parameter(torch.zeros(cfg.code_dim))
        # codebook
        cb = torch.randn(cfg.codebook_size, cfg.code_dim, generator=gen)
        self.codebook = nn.Parameter(cb / cb.norm(dim=-1, keepdim=True))
        # decoder
        self.dec_in_w = _normal((cfg.code_dim, D), 1.0 / math.sqrt(cfg.code_dim), gen)
        self.dec_tok_pos = _normal((n, D), std, gen)
        self.mask_emb = _normal((D,), 1.0, gen)
        self.dec_queries = _normal((P, D), 1.0, gen)
        self.dec_blocks = nn.ModuleList(
            Block(D, cfg.heads, cfg.mlp_ratio, False, gen) for _ in range(cfg.dec_layers)
        )
        self.dec_norm = nn.Parameter(torch.ones(D))
        self.dec_out_w = _normal((D, cfg.patch_dim), std, gen)
        self.dec_out_b = nn.Parameter(torch.full((cfg.patch_dim,), 0.5))

    # -- image <-> patches
    def _patchify(self, x: Tensor) -> Tensor:
        c = self.cfg
        g = c.image_size // c.patch
        B = x.shape[0]
        x = x.reshape(B, g, c.patch, g, c.patch, c.channels).transpose(2, 3)
        return x.reshape(B, g * g, c.patch_dim)

    def _unpatchify(self, p: Tensor) -> Tensor:
        c = self.cfg
        g = c.image_size // c.patch
        B = p.shape[0]
        x = p.reshape(B, g, g, c.patch, c.patch, c.channels).transpose(2, 3)
        return x.reshape(B, c.image_size, c.image_size, c.channels)

    def encode(self, x: Tensor) -> Tensor:
        """Images ``(B, H, W, C)`` -> latents ``(B, n, code_dim)``."""
        c = self.cfg
        if tuple(x.shape[1:]) != (c.image_size, c.image_size, c.channels):
            raise ad.ShapeError(
                f"image shape {tuple(x.shape[1:])} != configured "
                f"{(c.image_size, c.image_size, c.channels)}"
            )
        B = x.shape[0]
        p = ad.add(ad.add(ad.matmul(self._patchify(x), self.enc_patch_w), self.enc_patch_b), self.enc_pos)
        q = self.queries.expand(B, -1, -1)
        h = torch.cat([p, q], dim=1)
        for blk in self.enc_blocks:
            h = blk(h)
        h = ad.rms_norm(h[:, -c.n_tokens:], self.enc_norm)
        return ad.add(ad.matmul(h, self.enc_out_w), self.enc_out_b)

    def quantize(self, u: Tensor) -> TokenSequence:
        return quantize(u, self.codebook, self.cfg.tau_q)

    def decode(self, z: Tensor, keep: Tensor | None = None) -> Tensor:
        """One-hot tokens ``(B, n, K)`` -> images.

        ``keep`` (``(B,)`` prefix lengths) replaces positions ``>= keep[b]``
        with the learned mask embedding.
        """
        c = self.cfg
        B, n, _ = z.shape
        e = ad.matmul(ad.matmul(z, self.codebook), self.dec_in_w)
        if keep is not None:
            pos = torch.arange(n, device=z.device)
            masked = (pos[None, :] >= keep[:, None]).unsqueeze(-1)
            e = torch.where(masked, self.mask_emb.expand_as(e), e)
        e = ad.add(e, self.dec_tok_pos)
        h = torch.cat([e, self.dec_queries.expand(B, -1, -1)], dim=1)
        for blk in self.dec_blocks:
            h = blk(h)
        h = ad.rms_norm(h[:, n:], self.dec_norm)
        return self._unpatchify(ad.add(ad.matmul(h, self.dec_out_w), self.dec_out_b))

    def decode_ids(self, ids: Tensor, keep: Tensor | None = None) -> Tensor:
        z = torch.nn.functional.one_hot(ids, self.cfg.codebook_size).to(self.codebook.dtype)
        return self.decode(z, keep)

    def forward(self, x: Tensor) -> tuple[Tensor, TokenSequence]:
        tok = self.quantize(self.encode(x))
        return self.decode(tok.z), tok

    @torch.no_grad()
    def renormalize_codebook(self) -> None:
        self.codebook.div_(self.codebook.norm(dim=-1, keepdim=True) + NORM_EPS)

    @torch.no_grad()
    def tokenize(self, x: Tensor, batch_size: int = 256) -> Tensor:
        out = [self.quantize(self.encode(x[i : i + batch_size])).ids for i in range(0, x.shape[0], batch_size)]
        return torch.cat(out)


def reconstruction_loss(x: Tensor, x_hat: Tensor, reduce: bool = True) -> Tensor:
    """``0.1 * mean|x - x_hat| + 1.0 * mean (x - x_hat)^2`` (per sample if not ``reduce``)."""
    if x.shape != x_hat.shape:
        raise ad.ShapeError(f"reconstruction shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    r = x - x_hat
    if reduce:
        return 0.1 * ad.mean(r.abs()) + 1.0 * ad.mean(ad.square(r))
    dims = tuple(range(1, r.dim()))
    return 0.1 * r.abs().mean(dim=dims) + 1.0 * ad.square(r).mean(dim=dims)


class ARModel(nn.Module):
    """Causal transformer over token ids; position t predicts token t from ids < t."""

    def __init__(self, cfg: ARConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        D = cfg.width
        self.tok_emb = _normal((cfg.vocab, D), 1.0, gen)
        self.sos = _normal((D,), 1.0, gen)
        self.pos = _normal((cfg.n_tokens, D), 0.1, gen)
        self.blocks = nn.ModuleList(
            Block(D, cfg.heads, cfg.mlp_ratio, True, gen) for _ in range(cfg.layers)
        )
        self.norm = nn.Parameter(torch.ones(D))
        self.head_w = _normal((D, cfg.vocab), 1.0 / math.sqrt(D), gen)
        self.head_b = nn.Parameter(torch.zeros(cfg.vocab))

    def logits(self, ids: Tensor) -> Tensor:
        B, T = ids.shape
        if T > self.cfg.n_tokens:
            raise ValueError(f"sequence length {T} exceeds context {self.cfg.n_tokens}")
        if T and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab):
            raise ValueError("token id out of range")
        prev = ad.gather(self.tok_emb, ids[:, : T - 1]) if T > 1 else self.tok_emb[:0].expand(B, 0, -1)
        x = torch.cat([self.sos.expand(B, 1, -1), prev], dim=1)
        x = ad.add(x, self.pos[:T])
        for blk in self.blocks:
            x = blk(x)
        x = ad.rms_norm(x, self.norm)
        return ad.add(ad.matmul(x, self.head_w), self.head_b)

    def log_probs(self, ids: Tensor) -> Tensor:
        return ad.log_softmax(ad.mul(self.logits(ids), 1.0 / self.cfg.temperature))

    @torch.no_grad()
    def zero_head(self) -> None:
        self.head_w.zero_()
        self.head_b.zero_()


def ar_log_probs(model: ARModel, ids: Tensor) -> Tensor:
    """``(B, n, K)`` table of ``log p(. | ids_<t)``; single pass, no tape."""
    with torch.no_grad():
        return model.log_probs(ids)


def ar_loss(model: ARModel, ids: Tensor, reduce: bool = True) -> Tensor:
    """Per-token mean teacher-forced cross-entropy."""
    lp = model.log_probs(ids)
    nll = -lp.gather(-1, ids.unsqueeze(-1)).squeeze(-1).mean(dim=-1)
    return nll.mean() if reduce else nll


@torch.no_grad()
def ar_sample(model: ARModel, n: int, temperature: float, seed: int, batch: int = 1) -> Tensor:
    """Ancestral sampling from ``softmax(logits / temperature)``.

    ``temperature == 0`` is the greedy limit. Uniform draws come from the
    seeded xoshiro256** stream, so results do not depend on torch's RNG.
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    rng = Xoshiro256(seed)
    ids = torch.zeros(batch, 0, dtype=torch.long)
    for t in range(n):
        logits = model.logits(torch.cat([ids, torch.zeros(batch, 1, dtype=torch.long)], 1))[:, t]
        if temperature == 0:
            nxt = ad.first_argmax(logits)
        else:
            p = torch.softmax(logits.double() / temperature, dim=-1).numpy()
            cdf = np.cumsum(p, axis=-1)
            draws = [rng.uniform() * cdf[b, -1] for b in range(batch)]
            nxt = torch.tensor(
                [min(int(np.searchsorted(cdf[b], draws[b], side="right")), p.shape[-1] - 1) for b in range(batch)]
            )
        ids = torch.cat([ids, nxt.view(batch, 1)], dim=1)
    return ids


def config_dict(cfg) -> dict:
    return asdict(cfg)
