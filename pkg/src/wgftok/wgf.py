"""Forward-pass-only prior matching for discrete tokenizers.

The encoder receives, per token, the particle gradient

    g_z = dL_rec/dz + lambda * (log Q_proxy - log P_target)

where both log-probability tables come from teacher-forced AR forward passes
with no tape, and ``g_z`` reaches the encoder through the straight-through
quantizer (dz/dh = I).
"""

from __future__ import annotations

import contextlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import MetricsRecord
from .models import ARModel, Tokenizer, TokenSequence, ar_log_probs, ar_loss, reconstruction_loss
from .rng import Xoshiro256

log = logging.getLogger(__name__)

Tensor = torch.Tensor

_score_sign = 1.0


@contextlib.contextmanager
def inject_score_sign_error():
    """Test hook: flips the sign of the prior-matching score."""
    global _score_sign
    _score_sign = -1.0
    try:
        yield
    finally:
        _score_sign = 1.0


class NumericalAbort(FloatingPointError):
    """A training step produced a non-finite loss; no parameters were touched."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def prior_matching_score(log_q, log_p):
    """Elementwise ``log_q - log_p`` for ``(..., K)`` log-probability tables."""
    if tuple(log_q.shape) != tuple(log_p.shape):
        raise ValueError(f"score tables differ in shape: {tuple(log_q.shape)} vs {tuple(log_p.shape)}")
    return _score_sign * (log_q - log_p)


@dataclass
class ParticleGradient:
    g_z: Tensor
    recon: Tensor
    prior_matching: Tensor


def particle_gradient(recon_grad_z: Tensor, log_q: Tensor, log_p: Tensor, lambda_wgf: float) -> ParticleGradient:
    score = prior_matching_score(log_q, log_p)
    if tuple(recon_grad_z.shape) != tuple(score.shape):
        raise ValueError("recon gradient and score tables differ in shape")
    return ParticleGradient(g_z=recon_grad_z + lambda_wgf * score, recon=recon_grad_z, prior_matching=score)


# ---------------------------------------------------------------------------
# joint training


@dataclass
class OptimConfig:
    lr: float = 1e-3
    proxy_lr: float = 1e-3
    target_lr: float = 1e-3
    weight_decay: float = 0.03
    betas: tuple[float, float] = (0.9, 0.99)


def make_adamw(params, lr: float, oc: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params), lr=lr, betas=oc.betas, weight_decay=oc.weight_decay)


@dataclass
class JointTrainState:
    tokenizer: Tokenizer
    target: ARModel
    proxy: ARModel
    tok_opt: torch.optim.Optimizer
    proxy_opt: torch.optim.Optimizer
    lambda_wgf: float = 0.25
    warmup_steps: int = 0
    lambda_rec: float = 1.0
    train_target: bool = False
    target_opt: torch.optim.Optimizer | None = None
    step: int = 0

    @classmethod
    def create(
        cls,
        tokenizer: Tokenizer,
        target: ARModel,
        proxy: ARModel,
        optim: OptimConfig | None = None,
        lambda_wgf: float = 0.25,
        warmup_steps: int = 0,
        train_target: bool = False,
    ) -> "JointTrainState":
        oc = optim or OptimConfig()
        target_opt = None
        if train_target:
            target_opt = make_adamw(target.parameters(), oc.target_lr, oc)
        else:
            target.requires_grad_(False)
        return cls(
            tokenizer=tokenizer,
            target=target,
            proxy=proxy,
            tok_opt=make_adamw(tokenizer.parameters(), oc.lr, oc),
            proxy_opt=make_adamw(proxy.parameters(), oc.proxy_lr, oc),
            lambda_wgf=lambda_wgf,
            warmup_steps=warmup_steps,
            train_target=train_target,
            target_opt=target_opt,
        )

    def effective_lambda(self) -> float:
        if self.warmup_steps <= 0:
            return self.lambda_wgf
        return self.lambda_wgf * min(1.0, self.step / self.warmup_steps)


def tokenizer_backward(
    tokenizer: Tokenizer,
    x: Tensor,
    tables_fn=None,
    keep: Tensor | None = None,
) -> tuple[Tensor, TokenSequence, ParticleGradient | None]:
    """Accumulate tokenizer gradients for one batch via the particle gradient.

    The decoder runs on a detached copy of the one-hot tokens so its backward
    pass yields ``dL_rec/dz`` explicitly. ``tables_fn(ids)`` may return
    ``(log_q, log_p, weight)``; the resulting ``g_z`` is then pushed through the
    straight-through quantizer. Returns ``(l_rec, tokens, particle_grad)``.
    """
    u = tokenizer.encode(x)
    if not bool(torch.isfinite(u).all()):
        raise NumericalAbort("non-finite encoder output", {"nonfinite": int((~torch.isfinite(u)).sum())})
    tok = tokenizer.quantize(u)
    z_in = tok.z.detach().requires_grad_(True)
    x_hat = tokenizer.decode(z_in, keep)
    l_rec = reconstruction_loss(x, x_hat)
    if not torch.isfinite(l_rec):
        raise NumericalAbort("non-finite reconstruction loss", {"l_rec": float(l_rec)})
    l_rec.backward()
    pg = None
    g_z = z_in.grad
    if tables_fn is not None:
        log_q, log_p, weight = tables_fn(tok.ids)
        # l_rec is a batch mean, so every sample's score shares the same 1/B
        pg = particle_gradient(g_z, log_q, log_p, weight / x.shape[0])
        g_z = pg.g_z
    tok.z.backward(g_z)
    return l_rec.detach(), tok, pg


def dpd_train_step(state: JointTrainState, x: Tensor) -> MetricsRecord:
    """One joint step: tokenizer via particle gradient, proxy by cross-entropy."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    tk, proxy, target = state.tokenizer, state.proxy, state.target
    state.tok_opt.zero_grad(set_to_none=True)
    state.proxy_opt.zero_grad(set_to_none=True)
    if state.target_opt is not None:
        state.target_opt.zero_grad(set_to_none=True)

    lam = state.effective_lambda()

    def tables(ids):
        # score forward passes: no tape through either AR model
        return ar_log_probs(proxy, ids), ar_log_probs(target, ids), lam

    use_score = state.lambda_wgf != 0.0
    l_rec, tok, pg = tokenizer_backward(tk, x, tables if use_score else None)

    ids = tok.ids.detach()
    l_proxy = ar_loss(proxy, ids)
    if not torch.isfinite(l_proxy):
        state.tok_opt.zero_grad(set_to_none=True)
        raise NumericalAbort("non-finite proxy loss", {"l_ar_proxy": float(l_proxy), "step": state.step})
    l_proxy.backward()
    if state.train_target:
        ar_loss(target, ids).backward()

    state.tok_opt.step()
    tk.renormalize_codebook()
    state.proxy_opt.step()
    if state.target_opt is not None:
        state.target_opt.step()
    state.step += 1

    rec = MetricsRecord(step=state.step, l_rec=float(l_rec), l_ar_proxy=float(l_proxy.detach()))
    if pg is not None:
        rec.wgf_score_norm = float(pg.prior_matching.norm(dim=-1).mean())
    rec.wall_ms = (time.perf_counter() - t0) * 1000.0
    return rec


# ---------------------------------------------------------------------------
# continuous check: Gaussian particle flow towards N(0, 1)


def gaussian_kl_to_standard(m: float, s: float) -> float:
    return 0.5 * (s * s + m * m - 1.0 - math.log(s * s))


def gaussian_particles(m0: float, s0: float, count: int, seed: int) -> np.ndarray:
    """Box-Muller over the xoshiro256** stream."""
    rng = Xoshiro256(seed)
    u1 = np.array([1.0 - rng.uniform() for _ in range(count)])
    u2 = np.array([rng.uniform() for _ in range(count)])
    return m0 + s0 * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def velocity_closed_form(z: np.ndarray, m: float, s: float) -> np.ndarray:
    """``-(d/dz log q - d/dz log p)`` for ``q = N(m, s^2)``, ``p = N(0, 1)``."""
    return (z - m) / (s * s) - z


def velocity_autodiff(z: np.ndarray, m: float, s: float) -> np.ndarray:
    """Negative gradient of the first variation ``log(q/p) + 1`` by reverse mode."""
    zt = torch.tensor(z, dtype=torch.float64, requires_grad=True)
    log_q = -0.5 * ((zt - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * zt**2 - 0.5 * math.log(2 * math.pi)
    first_variation = log_q - log_p + 1.0
    (g,) = torch.autograd.grad(first_variation.sum(), zt)
    return -g.numpy()


@dataclass
class GaussianFlowTrajectory:
    means: list[float] = field(default_factory=list)
    stds: list[float] = field(default_factory=list)
    kls: list[float] = field(default_factory=list)
    velocity_rms_gap: list[float] = field(default_factory=list)


def gaussian_wgf_demo(
    m0: float, s0: float, steps: int, lr: float, count: int = 10_000, seed: int = 0
) -> GaussianFlowTrajectory:
    """Move particles along ``v(z) = -(grad log q_hat - grad log p)``.

    ``q_hat`` is the moment-matched Gaussian of the current cloud. Each step
    also records the RMS gap between the autodiff velocity and the closed form.
    """
    if s0 <= 0 or lr <= 0:
        raise ValueError("need s0 > 0 and lr > 0")
    z = gaussian_particles(m0, s0, count, seed)
    traj = GaussianFlowTrajectory()
    for i in range(steps + 1):
        m, s = float(z.mean()), float(z.std())
        if not s > 1e-12:
            raise FloatingPointError("particle cloud collapsed (s -> 0)")
        traj.means.append(m)
        traj.stds.append(s)
        traj.kls.append(gaussian_kl_to_standard(m, s))
        v = velocity_autodiff(z, m, s)
        traj.velocity_rms_gap.append(float(np.sqrt(np.mean((v - velocity_closed_form(z, m, s)) ** 2))))
        if i == steps:
            break
        z = z + lr * v
    return traj


# ---------------------------------------------------------------------------
# logit-space oracle: q given by free logits over K outcomes (n = 1)


def _log_softmax(theta: np.ndarray) -> np.ndarray:
    t = theta - theta.max(axis=-1, keepdims=True)
    return t - np.log(np.exp(t).sum(axis=-1, keepdims=True))


def exact_kl_rows(log_q: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    return (np.exp(log_q) * (log_q - log_p)).sum(axis=-1)


def logit_space_descent(
    theta0: np.ndarray, log_p: np.ndarray, lr: float = 1e-2, steps: int = 200, route: str = "particle"
) -> np.ndarray:
    """Exact expected particle update on free logits; returns the KL trace.

    ``route="particle"`` moves the logits by ``-lr * E_{z~q}[g_z]`` with
    ``g_z = log q - log p`` (the proxy equals the exact ``q``).
    ``route="ste"`` first routes ``g_z`` through the softmax Jacobian, which
    is plain gradient descent on ``KL(q || p)``.
    """
    theta = np.array(theta0, dtype=np.float64)
    kls = []
    for i in range(steps + 1):
        log_q = _log_softmax(theta)
        kls.append(exact_kl_rows(log_q, log_p))
        if i == steps:
            break
        g = np.asarray(prior_matching_score(log_q, log_p))
        if route == "ste":
            q = np.exp(log_q)
            g = q * (g - (q * g).sum(axis=-1, keepdims=True))
        elif route != "particle":
            raise ValueError(f"unknown route {route!r}")
        theta = theta - lr * g
    return np.array(kls)
