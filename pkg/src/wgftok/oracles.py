"""Exact-oracle checks for the numerical core.

``oracle_suite()`` runs every identity, gradient, fixed-point and descent
check and returns a report; any failed check makes the CLI exit with 2.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from . import tvc
from .models import ARConfig, ARModel, Tokenizer, TokenizerConfig, ar_log_probs, reconstruction_loss
from .wgf import (
    gaussian_wgf_demo,
    logit_space_descent,
    particle_gradient,
    prior_matching_score,
)

Tensor = torch.Tensor


@dataclass
class CheckResult:
    name: str
    tolerance: float
    observed: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""


@dataclass
class OracleReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}

    def table(self) -> str:
        rows = [f"{'check':<36}{'tol':>10}{'observed':>13}  result"]
        for c in self.checks:
            rows.append(f"{c.name:<36}{c.tolerance:>10.1e}{c.observed:>13.3e}  {'PASS' if c.passed else 'FAIL'}"
                        + (f"  ({c.detail})" if c.detail else ""))
        return "\n".join(rows)


# ---------------------------------------------------------------------------
# gradient oracles


def _rand(gen: torch.Generator, *shape, dtype=torch.float64) -> Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64).to(dtype)


def op_cases(dtype=torch.float64) -> dict[str, Callable[[torch.Generator], tuple[ad.GraphFunction, dict]]]:
    """Per-op graph functions and random-input builders for ``grad_check``.

    Each function is composed with a fixed random cotangent so the checked
    scalar exercises every output coordinate.
    """

    def case(fn, shapes, ints=None, constant=()):
        def build(gen):
            inputs = {k: _rand(gen, *s, dtype=dtype) for k, s in shapes.items()}
            for k, (hi, s) in (ints or {}).items():
                inputs[k] = torch.randint(0, hi, s, generator=gen)
            sig = {k: tuple(v.shape) for k, v in inputs.items()}
            return ad.GraphFunction(fn, sig, frozenset(constant)), inputs
        return build

    return {
        "add": case(lambda a, b: ad.add(a, b), {"a": (3, 4), "b": (4,)}),
        "mul": case(lambda a, b: ad.mul(a, b), {"a": (3, 4), "b": (3, 4)}),
        "matmul": case(lambda a, b: ad.matmul(a, b), {"a": (3, 4), "b": (4, 2)}),
        "transpose": case(lambda a: ad.transpose(a) * torch.arange(12.0, dtype=dtype).reshape(4, 3), {"a": (3, 4)}),
        "reshape": case(lambda a: ad.reshape(a, 2, 6) * torch.arange(12.0, dtype=dtype).reshape(2, 6), {"a": (3, 4)}),
        "gather": case(lambda t, i: ad.gather(t, i) * torch.linspace(-1, 1, 3, dtype=dtype), {"t": (5, 3)},
                       {"i": (5, (4,))}),
        "softmax": case(lambda a: ad.softmax(a) * torch.arange(1.0, 5.0, dtype=dtype), {"a": (3, 4)}),
        "log_softmax": case(lambda a: ad.log_softmax(a) * torch.arange(1.0, 5.0, dtype=dtype), {"a": (3, 4)}),
        "log": case(lambda a: ad.log(ad.exp(a) + 0.5), {"a": (3, 4)}),
        "exp": case(lambda a: ad.exp(a), {"a": (3, 4)}),
        "square": case(lambda a: ad.square(a), {"a": (3, 4)}),
        "mean": case(lambda a: ad.mean(ad.square(a), dim=-1), {"a": (3, 4)}),
        "sum": case(lambda a: ad.sum(ad.square(a), dim=0), {"a": (3, 4)}),
        "rms_norm": case(lambda a, w: ad.rms_norm(a, w) * torch.arange(1.0, 5.0, dtype=dtype), {"a": (3, 4), "w": (4,)}),
        "attention": case(lambda q, k, v: ad.attention(q, k, v, causal=True) * torch.arange(1.0, 5.0, dtype=dtype),
                          {"q": (2, 3, 4), "k": (2, 3, 4), "v": (2, 3, 4)}),
        "attention_bidirectional": case(lambda q, k, v: ad.attention(q, k, v, causal=False),
                                        {"q": (3, 4), "k": (3, 4), "v": (3, 4)}),
        "geglu": case(lambda x, w_in, w_out: ad.geglu(x, w_in, w_out), {"x": (3, 4), "w_in": (4, 6), "w_out": (3, 4)}),
        "reconstruction_loss": case(lambda x, y: reconstruction_loss(x, y + 0.05), {"x": (2, 3, 3), "y": (2, 3, 3)},
                                    constant=("x",)),
    }


def check_ops(points: int = 10, dtype=torch.float64, tol: float | None = None, seed: int = 0) -> dict[str, float]:
    """Worst ``grad_check`` error per op over ``points`` random inputs."""
    tol = tol if tol is not None else (1e-6 if dtype == torch.float64 else 1e-4)
    gen = torch.Generator().manual_seed(seed)
    worst = {}
    for name, build in op_cases(dtype).items():
        w = 0.0
        for _ in range(points):
            f, inputs = build(gen)
            w = max(w, ad.grad_check(f, inputs, tol=tol).max_rel_err)
        worst[name] = w
    return worst


def tiny_tokenizer_config() -> TokenizerConfig:
    return TokenizerConfig(image_size=4, channels=3, patch=2, n_tokens=3, codebook_size=5, code_dim=3, width=8,
                           heads=2, enc_layers=1, dec_layers=1, mlp_ratio=2, tau_q=0.5)


def ste_chain_check(
    points: int = 10,
    dtype=torch.float64,
    coords: int = 24,
    eps: float = 1e-5,
    seed: int = 0,
    cfg: TokenizerConfig | None = None,
) -> float:
    """encode -> quantize (STE) -> decode -> loss against central differences.

    The oracle differentiates ``L(decode(h(theta) + c0))`` with the offset
    ``c0 = onehot - h`` frozen at the base point; its forward equals the hard
    chain and its exact gradient is the straight-through gradient. ``coords``
    parameter coordinates are sampled per point. Returns the worst
    ``|AD - FD| / max(1, |FD|)``.
    """
    cfg = cfg or tiny_tokenizer_config()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p in range(points):
        tk = Tokenizer(cfg, seed=seed * 1000 + p).to(dtype)
        x = torch.rand(2, cfg.image_size, cfg.image_size, cfg.channels, generator=gen, dtype=torch.float64).to(dtype)
        tk.zero_grad()
        tok = tk.quantize(tk.encode(x))
        reconstruction_loss(x, tk.decode(tok.z)).backward()
        params = dict(tk.named_parameters())

        ref = copy.deepcopy(tk).double()
        rparams = dict(ref.named_parameters())
        with torch.no_grad():
            t0 = ref.quantize(ref.encode(x.double()))
            offset = t0.z - t0.h
            if not torch.equal(t0.ids, tok.ids):
                raise RuntimeError("float64 reference picked different codes; move the base point")

        def surrogate() -> float:
            with torch.no_grad():
                h = ref.quantize(ref.encode(x.double())).h
                return float(reconstruction_loss(x.double(), ref.decode(h + offset)))

        names = list(params)
        for _ in range(coords):
            name = names[int(torch.randint(len(names), (1,), generator=gen))]
            flat = rparams[name].data.view(-1)
            i = int(torch.randint(flat.numel(), (1,), generator=gen))
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
                fp = surrogate()
                flat[i] = orig - eps
                fm = surrogate()
                flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            g = params[name].grad
            g_ad = 0.0 if g is None else float(g.reshape(-1)[i])
            worst = max(worst, abs(g_ad - fd) / max(1.0, abs(fd)))
    return worst


# ---------------------------------------------------------------------------
# suite


def _timed(name, tol, fn, detail="") -> CheckResult:
    t0 = time.perf_counter()
    try:
        observed, ok, extra = fn()
    except Exception as exc:  # a crashing check is a failing check
        return CheckResult(name, tol, float("nan"), False, time.perf_counter() - t0, f"error: {exc}")
    return CheckResult(name, tol, float(observed), bool(ok), time.perf_counter() - t0, extra or detail)


def oracle_suite(seed: int = 0, quick: bool = False) -> OracleReport:
    rng = np.random.default_rng(seed)
    rep = OracleReport()
    add = rep.checks.append

    def tvc_identity():
        worst = max(
            float(np.abs(tvc.tvc_terms(tvc.random_lvm(rng, int(rng.integers(1, 9)), int(rng.integers(1, 7)))).residual).max())
            for _ in range(100)
        )
        return worst, worst <= 1e-10, "100 random LVMs, |X|<=8, |Z|<=6"

    add(_timed("tvc_identity", 1e-10, tvc_identity))

    for case in (1, 2):
        def redundancy(case=case):
            reps = [tvc.redundancy_check(case, tvc.construct_case(case, rng, int(rng.integers(2, 9)),
                                                                   int(rng.integers(2, 7)))) for _ in range(20)]
            worst = max(max(r.implied_residual, r.marginal_residual) for r in reps)
            return worst, all(r.status == "verified" for r in reps) and worst <= 1e-10, "20 constructions"
        add(_timed(f"redundancy_case{case}", 1e-10, redundancy))

    def case3_full():
        reps = [tvc.redundancy_check(3, tvc.construct_case(3, rng, nx, nx + 1)) for nx in (2, 3, 4, 5, 6)]
        worst = max(max(r.implied_residual, r.marginal_residual) for r in reps)
        return worst, all(r.status == "verified" for r in reps), "full-rank likelihood"

    add(_timed("redundancy_case3_complete", 1e-10, case3_full))

    def case3_deficient():
        lvm = tvc.construct_case(3, rng, 4, 4, rank_deficient=True)
        flagged = tvc.redundancy_check(3, lvm).status == "not guaranteed"
        cex = tvc.case3_counterexample(lvm)
        gap = tvc.consistency_gaps(cex)["likelihood"] if cex is not None else 0.0
        return gap, flagged and gap > 1e-3, "rank-deficient control must be flagged; observed = likelihood gap"

    add(_timed("redundancy_case3_rank_deficient", 1e-3, case3_deficient))

    def elbo():
        ds = [tvc.elbo_decomposition(tvc.random_lvm(rng, 6, 4)) for _ in range(50)]
        return max(d.residual for d in ds), max(d.residual for d in ds) <= 1e-10, ""

    add(_timed("elbo_identity", 1e-10, elbo))

    def expansion():
        worst = 0.0
        for _ in range(50):
            lvm = tvc.random_lvm(rng, 6, 4)
            if rng.random() < 0.5:  # deterministic coding
                lvm.q_post = np.eye(4)[rng.integers(0, 4, size=6)]
            worst = max(worst, tvc.elbo_decomposition(lvm).expansion_residual)
        return worst, worst <= 1e-10, "half with deterministic coding"

    add(_timed("aggregate_kl_expansion", 1e-10, expansion))

    def posterior_gap():
        lvm = tvc.random_lvm(rng, 5, 3)
        lvm.q_post = tvc.model_posterior(lvm)
        g = abs(tvc.elbo_decomposition(lvm).posterior_gap)
        return g, g <= 1e-12, "q_post := p_post"

    add(_timed("posterior_gap_zero", 1e-12, posterior_gap))

    def surrogate():
        worst = max(tvc.surrogate_decomposition(*(rng.dirichlet(np.ones(7)) for _ in range(3))).residual
                    for _ in range(200))
        return worst, worst <= 1e-10, "200 triples"

    add(_timed("surrogate_decomposition", 1e-10, surrogate))

    def kl_nonneg():
        lo = min(tvc.exact_kl(rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))) for _ in range(1000))
        return max(0.0, -lo), lo >= 0, "1000 pairs; observed = max negativity"

    add(_timed("kl_nonnegative", 0.0, kl_nonneg))

    def fixed_point():
        target = ARModel(ARConfig(vocab=16, n_tokens=6, width=32, heads=2, layers=2, temperature=0.5), seed=seed + 1)
        proxy = copy.deepcopy(target)
        ids = torch.from_numpy(rng.integers(0, 16, size=(8, 6)))
        score = prior_matching_score(ar_log_probs(proxy, ids), ar_log_probs(target, ids))
        pg = particle_gradient(torch.zeros_like(score), ar_log_probs(proxy, ids), ar_log_probs(target, ids), 0.25)
        obs = max(float(score.abs().max()), float(pg.g_z.abs().max()))
        return obs, obs == 0.0, "matched proxy/target tables"

    add(_timed("fixed_point_zero_score", 0.0, fixed_point))

    def kl_descent():
        worst, monotone = 0.0, True
        for _ in range(100):
            # standard-normal logits for both q and p
            theta = rng.normal(size=4)
            theta_p = rng.normal(size=4)
            log_p = theta_p - np.logaddexp.reduce(theta_p)
            kls = logit_space_descent(theta, log_p, lr=1e-2, steps=200)
            worst = max(worst, kls[-1] / kls[0])
            monotone = monotone and bool(np.all(np.diff(kls) <= 0))
        return worst, worst < 0.1 and monotone, \
            f"100 pairs, K=4, 200 steps at lr 1e-2; observed = worst KL_T/KL_0; monotone={monotone}"

    add(_timed("kl_descent_logit_space", 0.1, kl_descent))

    count = 2000 if quick else 10_000
    traj_holder = {}

    def velocity():
        traj = gaussian_wgf_demo(2.0, 0.5, steps=200, lr=0.05, count=count, seed=seed)
        traj_holder["t"] = traj
        w = max(traj.velocity_rms_gap)
        return w, w <= 1e-3, f"{count} particles; autodiff vs closed form"

    add(_timed("gaussian_velocity_field", 1e-3, velocity))

    def kl_monotone():
        worst = 0.0
        for lr in (0.01, 0.05, 0.1):
            traj = traj_holder["t"] if lr == 0.05 and "t" in traj_holder else \
                gaussian_wgf_demo(2.0, 0.5, steps=200, lr=lr, count=count, seed=seed)
            worst = max(worst, float(np.max(np.diff(traj.kls))))
        return max(worst, 0.0), worst <= 1e-12, "lr in {0.01, 0.05, 0.1}; observed = largest KL increase"

    add(_timed("gaussian_kl_monotone", 1e-12, kl_monotone))

    def ste_identity():
        h = torch.tensor([[0.2, 0.5, 0.3], [0.4, 0.4, 0.2]], requires_grad=True)
        z = ad.ste_onehot(h)
        cot = torch.tensor([[1.0, -2.0, 3.0], [0.5, 0.25, -1.0]])
        z.backward(cot)
        exact = torch.equal(h.grad, cot) and torch.equal(z.detach(), torch.tensor([[0.0, 1, 0], [1, 0, 0]]))
        return float((h.grad - cot).abs().max()), exact, "dz/dh = I; ties resolve to the lowest index"

    add(_timed("ste_backward_identity", 0.0, ste_identity))

    pts = 3 if quick else 10

    def ops64():
        worst = check_ops(points=pts, dtype=torch.float64, seed=seed)
        name = max(worst, key=worst.get)
        return worst[name], worst[name] <= 1e-6, f"{len(worst)} ops x {pts} points; worst {name}"

    add(_timed("grad_check_ops_f64", 1e-6, ops64))

    def ops32():
        worst = check_ops(points=pts, dtype=torch.float32, seed=seed + 1)
        name = max(worst, key=worst.get)
        return worst[name], worst[name] <= 1e-4, f"{len(worst)} ops x {pts} points; worst {name}"

    add(_timed("grad_check_ops_f32", 1e-4, ops32))

    def chain64():
        w = ste_chain_check(points=pts, dtype=torch.float64, seed=seed)
        return w, w <= 1e-6, "encode -> quantize(STE) -> decode -> loss"

    add(_timed("grad_check_ste_chain_f64", 1e-6, chain64))

    def chain32():
        w = ste_chain_check(points=pts, dtype=torch.float32, seed=seed + 7, eps=1e-5)
        return w, w <= 1e-4, "float32 AD vs float64 differences"

    add(_timed("grad_check_ste_chain_f32", 1e-4, chain32))

    def aggregate():
        data = rng.integers(0, 3, size=(300, 2))
        q = tvc.exact_ar_aggregate(lambda x: x, data, n=2, K=3)
        brute = np.zeros(9)
        for a, b in data:
            brute[a * 3 + b] += 1 / 300
        err = float(np.abs(q - brute).max())
        return err, err <= 1e-12, "enumerated K^n table vs counting"

    add(_timed("exact_aggregate_posterior", 1e-12, aggregate))

    def composition():
        g = torch.Generator().manual_seed(seed)
        rec = torch.randn(4, 3, 5, generator=g, dtype=torch.float64)
        lq = torch.log_softmax(torch.randn(4, 3, 5, generator=g, dtype=torch.float64), -1)
        lp = torch.log_softmax(torch.randn(4, 3, 5, generator=g, dtype=torch.float64), -1)
        pg = particle_gradient(rec, lq, lp, 0.25)
        err = float((pg.g_z - (rec + 0.25 * (lq - lp))).abs().max())
        return err, err <= 1e-15, "g_z = dL/dz + lambda (log Q - log P)"

    add(_timed("particle_gradient_composition", 1e-15, composition))
    return rep
