"""Exact enumeration on tabular latent-variable models.

Array conventions (all float64):

* ``p_data[x]``, ``p_prior[z]``
* ``p_lik[z, x]`` is ``p(x | z)``; rows sum to 1
* ``q_post[x, z]`` is ``q(z | x)``; rows sum to 1
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import xlogy

FLOOR = 1e-12
ROW_TOL = 1e-12


class SupportError(ValueError):
    pass


@dataclass
class TabularLVM:
    p_data: np.ndarray
    p_prior: np.ndarray
    p_lik: np.ndarray
    q_post: np.ndarray

    def __post_init__(self):
        for name in ("p_data", "p_prior", "p_lik", "q_post"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def nx(self) -> int:
        return self.p_data.shape[0]

    @property
    def nz(self) -> int:
        return self.p_prior.shape[0]

    def validate(self, full_support: bool = True) -> None:
        X, Z = self.nx, self.nz
        if self.p_lik.shape != (Z, X) or self.q_post.shape != (X, Z):
            raise ValueError("table shapes inconsistent")
        for name, t, axis in (
            ("p_data", self.p_data, None),
            ("p_prior", self.p_prior, None),
            ("p_lik", self.p_lik, 1),
            ("q_post", self.q_post, 1),
        ):
            s = t.sum() if axis is None else t.sum(axis=axis)
            if np.max(np.abs(s - 1.0)) > ROW_TOL:
                raise ValueError(f"{name} does not sum to 1 (max dev {np.max(np.abs(s - 1.0)):.3g})")
            if full_support and t.min() < FLOOR:
                raise SupportError(f"{name} has entries below the support floor {FLOOR}")
            if t.min() < 0:
                raise ValueError(f"{name} has negative entries")


def _normalize(a: np.ndarray, axis=None) -> np.ndarray:
    a = np.maximum(a, FLOOR)
    return a / (a.sum() if axis is None else a.sum(axis=axis, keepdims=True))


def random_lvm(rng: np.random.Generator, nx: int, nz: int, concentration: float = 1.0) -> TabularLVM:
    """Dirichlet-random full-support tables."""
    d = lambda *shape: _normalize(rng.gamma(concentration, size=shape), axis=-1)  # noqa: E731
    return TabularLVM(
        p_data=d(nx), p_prior=d(nz), p_lik=d(nz, nx), q_post=d(nx, nz)
    )


# ---------------------------------------------------------------------------
# derived tables


def model_marginal(lvm: TabularLVM) -> np.ndarray:
    """``p(x) = sum_z p(x|z) p(z)``."""
    return lvm.p_prior @ lvm.p_lik


def aggregate_posterior(lvm: TabularLVM) -> np.ndarray:
    """``q(z) = sum_x p_data(x) q(z|x)``."""
    return lvm.p_data @ lvm.q_post


def model_posterior(lvm: TabularLVM) -> np.ndarray:
    """``p(z|x)`` as an ``(X, Z)`` table."""
    joint = (lvm.p_prior[:, None] * lvm.p_lik).T
    return joint / model_marginal(lvm)[:, None]


def variational_likelihood(lvm: TabularLVM) -> np.ndarray:
    """``q(x|z)`` as a ``(Z, X)`` table, from the data-anchored joint."""
    joint = (lvm.p_data[:, None] * lvm.q_post).T
    return joint / aggregate_posterior(lvm)[:, None]


@dataclass
class TVCTerms:
    likelihood: np.ndarray
    prior: np.ndarray
    posterior: np.ndarray
    residual: np.ndarray


def tvc_terms(lvm: TabularLVM, x=None, z=None) -> TVCTerms:
    """Likelihood, prior and posterior consistency terms and the residual of
    ``log p(x) = L + P - Post + log p_data(x)``.

    With ``x``/``z`` omitted every ``(x, z)`` cell is returned as an ``(X, Z)``
    array.
    """
    lvm.validate(full_support=True)
    q_lik = variational_likelihood(lvm).T  # (X, Z)
    p_lik = lvm.p_lik.T
    p_post = model_posterior(lvm)
    like = np.log(p_lik) - np.log(q_lik)
    prior = np.broadcast_to(np.log(lvm.p_prior) - np.log(aggregate_posterior(lvm)), like.shape)
    post = np.log(p_post) - np.log(lvm.q_post)
    log_px = np.log(model_marginal(lvm))[:, None]
    resid = log_px - (like + prior - post + np.log(lvm.p_data)[:, None])
    terms = TVCTerms(likelihood=like, prior=np.array(prior), posterior=post, residual=resid)
    if x is None and z is None:
        return terms
    sel = (slice(None) if x is None else x, slice(None) if z is None else z)
    return TVCTerms(*(getattr(terms, f)[sel] for f in ("likelihood", "prior", "posterior", "residual")))


# ---------------------------------------------------------------------------
# constraint redundancy


def is_complete(q_lik: np.ndarray, tol: float = 1e-10) -> bool:
    """Completeness of the family ``{q(.|z)}_z`` on a finite space.

    ``sum_x q(x|z) g(x) = 0`` for all ``z`` must force ``g = 0``, i.e. the
    ``(Z, X)`` table has full column rank ``X``.
    """
    s = np.linalg.svd(q_lik, compute_uv=False)
    return int(np.sum(s > tol * s.max())) == q_lik.shape[1]


@dataclass
class RedundancyReport:
    case: int
    premises_hold: bool
    complete: bool | None
    implied_residual: float
    marginal_residual: float
    status: str
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "verified"


def consistency_gaps(lvm: TabularLVM) -> dict[str, float]:
    return {
        "likelihood": float(np.max(np.abs(lvm.p_lik - variational_likelihood(lvm)))),
        "prior": float(np.max(np.abs(lvm.p_prior - aggregate_posterior(lvm)))),
        "posterior": float(np.max(np.abs(model_posterior(lvm) - lvm.q_post))),
    }


_CASES = {
    1: (("likelihood", "prior"), "posterior"),
    2: (("likelihood", "posterior"), "prior"),
    3: (("posterior", "prior"), "likelihood"),
}


def redundancy_check(
    case: int, lvm: TabularLVM, premise_tol: float = 1e-12, tol: float = 1e-10
) -> RedundancyReport:
    """Check that the case's two consistency premises imply the third and
    ``p(x) = p_data(x)``. Case 3 additionally requires completeness; without
    it the report says ``"not guaranteed"``."""
    if case not in _CASES:
        raise ValueError("case must be 1, 2 or 3")
    premises, implied = _CASES[case]
    gaps = consistency_gaps(lvm)
    ok = all(gaps[p] <= premise_tol for p in premises)
    marginal = float(np.max(np.abs(model_marginal(lvm) - lvm.p_data)))
    complete = is_complete(variational_likelihood(lvm)) if case == 3 else None
    if not ok:
        status = "premise violated"
    elif case == 3 and not complete:
        status = "not guaranteed"
    elif gaps[implied] <= tol and marginal <= tol:
        status = "verified"
    else:
        status = "failed"
    return RedundancyReport(
        case=case,
        premises_hold=ok,
        complete=complete,
        implied_residual=gaps[implied],
        marginal_residual=marginal,
        status=status,
        details=gaps,
    )


def construct_case(case: int, rng: np.random.Generator, nx: int, nz: int, rank_deficient: bool = False) -> TabularLVM:
    """Build an LVM satisfying the two premises of ``case`` by construction."""
    base = random_lvm(rng, nx, nz)
    if case == 1:
        # model likelihood and prior copied from the data-anchored joint
        return TabularLVM(
            p_data=base.p_data,
            p_prior=aggregate_posterior(base),
            p_lik=variational_likelihood(base),
            q_post=base.q_post,
        )
    if case == 2:
        # data := model marginal, encoder := model posterior
        pd = model_marginal(base)
        return TabularLVM(p_data=pd, p_prior=base.p_prior, p_lik=base.p_lik, q_post=model_posterior(base))
    if case == 3:
        q_post = base.q_post
        if rank_deficient:
            # proportional encoder columns give latents 0 and 1 the same q(.|z)
            q_post = q_post.copy()
            q_post[:, 1] = q_post[:, 0]
            q_post /= q_post.sum(axis=1, keepdims=True)
        q = TabularLVM(p_data=base.p_data, p_prior=base.p_prior, p_lik=base.p_lik, q_post=q_post)
        # p(z|x) := q(z|x) and p(z) := q(z) force p(x|z) = q(x|z) r(x) / sum,
        # with r the ratio p(x)/p_data(x); r = 1 is always admissible.
        return TabularLVM(
            p_data=q.p_data,
            p_prior=aggregate_posterior(q),
            p_lik=variational_likelihood(q),
            q_post=q.q_post,
        )
    raise ValueError("case must be 1, 2 or 3")


def case3_counterexample(lvm: TabularLVM, scale: float = 0.5) -> TabularLVM | None:
    """For an incomplete family, perturb the likelihood along the null space.

    Returns an LVM with the same posterior and prior but ``p(x|z) != q(x|z)``,
    or ``None`` if the family is complete.
    """
    q_lik = variational_likelihood(lvm)
    _, s, vt = np.linalg.svd(q_lik)
    rank = int(np.sum(s > 1e-10 * s.max()))
    if rank == q_lik.shape[1]:
        return None
    g = vt[rank]
    # r = 1 + eps g keeps sum_x q(x|z) r(x) = 1 and stays positive
    eps = scale / np.max(np.abs(g))
    r = 1.0 + eps * g
    p_x = lvm.p_data * r
    p_lik = q_lik * r[None, :]
    return TabularLVM(
        p_data=lvm.p_data,
        p_prior=aggregate_posterior(lvm),
        p_lik=p_lik / p_lik.sum(axis=1, keepdims=True),
        q_post=lvm.q_post,
    ) if np.all(p_x > 0) else None


# ---------------------------------------------------------------------------
# ELBO and the aggregate-posterior expansion


def exact_kl(q: np.ndarray, p: np.ndarray, axis=None) -> np.ndarray | float:
    """``sum q log(q/p)`` with ``0 log 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError("KL arguments differ in shape")
    if np.any((q > 0) & (p <= 0)):
        raise SupportError("q puts mass where p has none")
    safe_p = np.where(q > 0, p, 1.0)
    out = np.sum(xlogy(q, q) - xlogy(q, safe_p), axis=axis)
    return float(out) if axis is None else out


def entropy(p: np.ndarray, axis=None):
    return -np.sum(xlogy(p, p), axis=axis)


@dataclass
class ElboDecomposition:
    elbo: float
    posterior_gap: float
    loglik: float
    residual: float
    kl_expansion_lhs: float
    kl_expansion_rhs: float
    conditional_entropy: float

    @property
    def expansion_residual(self) -> float:
        return abs(self.kl_expansion_lhs - self.kl_expansion_rhs)


def elbo_decomposition(lvm: TabularLVM) -> ElboDecomposition:
    """``E log p(x) = ELBO + E_x KL(q(z|x) || p(z|x))`` and
    ``E_x KL(q(z|x) || p(z)) = H(Z) - H(Z|X) + KL(q(z) || p(z))``.

    ``q_post`` may contain exact zeros (deterministic coding); every other
    table must have full support.
    """
    lvm.validate(full_support=False)
    pd, qp = lvm.p_data, lvm.q_post
    loglik = float(pd @ np.log(model_marginal(lvm)))
    recon = float(np.sum(pd[:, None] * qp * np.log(lvm.p_lik.T)))
    kl_prior_rows = exact_kl(qp, np.broadcast_to(lvm.p_prior, qp.shape), axis=1)
    inst_kl = float(pd @ kl_prior_rows)
    elbo = recon - inst_kl
    gap = float(pd @ exact_kl(qp, model_posterior(lvm), axis=1))
    q_z = aggregate_posterior(lvm)
    h_z = float(entropy(q_z))
    h_zx = float(pd @ entropy(qp, axis=1))
    rhs = h_z - h_zx + exact_kl(q_z, lvm.p_prior)
    return ElboDecomposition(
        elbo=elbo,
        posterior_gap=gap,
        loglik=loglik,
        residual=abs(loglik - (elbo + gap)),
        kl_expansion_lhs=inst_kl,
        kl_expansion_rhs=rhs,
        conditional_entropy=h_zx,
    )


# ---------------------------------------------------------------------------
# proxy/target surrogate on enumerable latents


@dataclass
class SurrogateDecomposition:
    surrogate: float
    kl_target: float
    kl_proxy: float

    @property
    def residual(self) -> float:
        return abs(self.surrogate - (self.kl_target - self.kl_proxy))


def surrogate_decomposition(q: np.ndarray, q_proxy: np.ndarray, p: np.ndarray) -> SurrogateDecomposition:
    """``E_q[log q_proxy - log p]`` against ``KL(q||p) - KL(q||q_proxy)``."""
    q = np.asarray(q, dtype=np.float64)
    surrogate = float(np.sum(q * (np.log(q_proxy) - np.log(p))))
    return SurrogateDecomposition(surrogate=surrogate, kl_target=exact_kl(q, p), kl_proxy=exact_kl(q, q_proxy))


# ---------------------------------------------------------------------------
# exact aggregate posterior of a deterministic tokenizer

MAX_STATES = 10**6


def sequence_index(ids: np.ndarray, K: int) -> np.ndarray:
    """Row-major index of each length-n id sequence in the ``K**n`` table."""
    ids = np.asarray(ids, dtype=np.int64)
    weights = K ** np.arange(ids.shape[-1] - 1, -1, -1, dtype=np.int64)
    return ids @ weights


def exact_ar_aggregate(
    encode_ids: Callable[[np.ndarray], np.ndarray] | object, dataset, n: int, K: int
) -> np.ndarray:
    """Exact ``q(z)`` over all ``K**n`` sequences for a deterministic encoder
    and a uniform empirical data distribution."""
    if K**n > MAX_STATES:
        raise ValueError(f"state space K**n = {K**n} exceeds {MAX_STATES}")
    fn = encode_ids.tokenize if hasattr(encode_ids, "tokenize") else encode_ids
    ids = np.asarray(fn(dataset))
    if ids.ndim != 2 or ids.shape[1] != n:
        raise ValueError(f"encoder returned shape {ids.shape}, expected (N, {n})")
    counts = np.bincount(sequence_index(ids, K), minlength=K**n).astype(np.float64)
    return counts / counts.sum()
