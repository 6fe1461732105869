"""Comparators that share the model code: two-stage training and tail dropout.

Stage I trains the tokenizer on reconstruction alone (optionally from random
token prefixes); Stage II fits a fresh AR prior to the frozen token ids. The
held-out cross-entropy of that prior is the eval AR loss reported for every
method, wAR-Tok included.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import MetricsRecord
from .models import ARConfig, ARModel, Tokenizer, TokenSequence, ar_loss, reconstruction_loss
from .rng import Xoshiro256
from .wgf import OptimConfig, make_adamw, tokenizer_backward

Tensor = torch.Tensor


@dataclass
class TailDropoutSchedule:
    """Per-sample prefix length ``k``: with ``enable_prob`` uniform over
    ``{0..n-1}``, otherwise ``n`` (no dropout)."""

    n: int
    enable_prob: float = 0.5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.enable_prob <= 1.0:
            raise ValueError("enable_prob must lie in [0, 1]")

    def probabilities(self) -> np.ndarray:
        p = np.full(self.n + 1, self.enable_prob / self.n)
        p[self.n] = 1.0 - self.enable_prob
        return p

    def sample(self, rng: Xoshiro256) -> int:
        if self.enable_prob > 0 and rng.uniform() < self.enable_prob:
            return rng.below(self.n)
        return self.n

    def sample_batch(self, rng: Xoshiro256, batch: int) -> Tensor:
        return torch.tensor([self.sample(rng) for _ in range(batch)], dtype=torch.long)


def tail_dropout_loss(
    tokenizer: Tokenizer,
    tok: TokenSequence,
    x: Tensor,
    schedule: TailDropoutSchedule,
    seed: int | Xoshiro256,
) -> tuple[Tensor, Tensor]:
    """Reconstruction loss from a random prefix of each sample's tokens.

    Positions at or beyond the sampled cutoff see the learned mask embedding.
    Returns ``(loss, keep)``.
    """
    rng = seed if isinstance(seed, Xoshiro256) else Xoshiro256(seed)
    keep = schedule.sample_batch(rng, x.shape[0])
    return reconstruction_loss(x, tokenizer.decode(tok.z, keep)), keep


# ---------------------------------------------------------------------------
# Stage I


@dataclass
class StageOneState:
    tokenizer: Tokenizer
    opt: torch.optim.Optimizer
    schedule: TailDropoutSchedule | None = None
    rng: Xoshiro256 | None = None
    step: int = 0

    @classmethod
    def create(
        cls,
        tokenizer: Tokenizer,
        optim: OptimConfig | None = None,
        tail_dropout_prob: float = 0.0,
        seed: int = 0,
    ) -> "StageOneState":
        oc = optim or OptimConfig()
        schedule = None
        rng = None
        if tail_dropout_prob > 0:
            schedule = TailDropoutSchedule(tokenizer.cfg.n_tokens, tail_dropout_prob)
            rng = Xoshiro256(seed)
        return cls(tokenizer, make_adamw(tokenizer.parameters(), oc.lr, oc), schedule, rng)


def stage1_step(state: StageOneState, x: Tensor) -> MetricsRecord:
    """Reconstruction-only tokenizer update.

    Gradients go through the same decode/STE route as the joint step with the
    score switched off, so at ``lambda_wgf = 0`` both updates agree bit for bit.
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    tk = state.tokenizer
    state.opt.zero_grad(set_to_none=True)
    keep = None
    if state.schedule is not None:
        keep = state.schedule.sample_batch(state.rng, x.shape[0])
    loss, _, _ = tokenizer_backward(tk, x, keep=keep)
    state.opt.step()
    tk.renormalize_codebook()
    state.step += 1
    rec = MetricsRecord(step=state.step, l_rec=float(loss.detach()))
    rec.wall_ms = (time.perf_counter() - t0) * 1000.0
    return rec


# ---------------------------------------------------------------------------
# Stage II and the eval AR loss


@dataclass
class PriorFitConfig:
    layers: int = 3
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    lr: float = 2e-3
    steps: int = 800
    batch_size: int = 64
    weight_decay: float = 0.03


def fit_prior(ids: Tensor, vocab: int, pc: PriorFitConfig, seed: int = 0) -> tuple[ARModel, list[float]]:
    """Train a fresh AR prior by teacher-forced cross-entropy on frozen ids."""
    if ids.dim() != 2 or ids.shape[0] == 0:
        raise ValueError("ids must be a non-empty (N, n) table")
    rng = Xoshiro256(seed)
    cfg = ARConfig(vocab=vocab, n_tokens=ids.shape[1], width=pc.width, heads=pc.heads,
                   layers=pc.layers, mlp_ratio=pc.mlp_ratio)
    model = ARModel(cfg, seed=rng.spawn() & 0x7FFFFFFF)
    opt = torch.optim.AdamW(model.parameters(), lr=pc.lr, weight_decay=pc.weight_decay)
    ids = ids.detach()
    losses = []
    for _ in range(pc.steps):
        idx = torch.tensor(rng.choice_indices(ids.shape[0], pc.batch_size))
        loss = ar_loss(model, ids[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return model, losses


@torch.no_grad()
def eval_ar_loss(model: ARModel, ids: Tensor, batch_size: int = 512) -> float:
    total = 0.0
    for i in range(0, ids.shape[0], batch_size):
        chunk = ids[i : i + batch_size]
        total += float(ar_loss(model, chunk, reduce=False).sum())
    return total / ids.shape[0]


def token_statistics(ids: Tensor, vocab: int) -> dict:
    """Codebook usage and unigram entropy (nats) of a token table."""
    counts = torch.bincount(ids.reshape(-1), minlength=vocab).double()
    p = counts / counts.sum()
    nz = p[p > 0]
    return {
        "codes_used": int((counts > 0).sum()),
        "unigram_entropy": float(-(nz * nz.log()).sum()),
        "unique_sequences": int(torch.unique(ids, dim=0).shape[0]),
    }


def two_stage_train(cfg, out_dir=None, **kw):
    """Stage I then Stage II for a ``two_stage`` or ``tail_dropout`` config."""
    from .harness import run_experiment

    if cfg.mode not in ("two_stage", "tail_dropout"):
        raise ValueError(f"two_stage_train needs a two-stage mode, got {cfg.mode!r}")
    return run_experiment(cfg, out_dir, **kw)


def matched_comparison(cfgs, out_dir=None, **kw):
    from .harness import compare

    return compare(cfgs, out_dir, **kw)
