"""Reverse-mode differentiation over dense tensors.

Tensors are ``torch.Tensor``; the recorded reverse pass is torch's autograd
tape. This module fixes the op set the models are allowed to use, adds a
checked mode that rejects non-finite values at op boundaries, and provides an
independent central-difference oracle plus ``grad_check``.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_CHECKED: contextvars.ContextVar[bool] = contextvars.ContextVar("wgftok_checked", default=False)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDifferentiableError(RuntimeError):
    pass


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Within this block every op verifies its output is finite."""
    token = _CHECKED.set(enabled)
    try:
        yield
    finally:
        _CHECKED.reset(token)


def is_checked() -> bool:
    return _CHECKED.get()


def _guard(name: str, out: Tensor) -> Tensor:
    if _CHECKED.get() and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"non-finite value produced by {name}")
    return out


def _check_trailing(name: str, a: Tensor, b) -> None:
    if not isinstance(b, Tensor) or b.shape == a.shape:
        return
    if b.dim() <= a.dim() and tuple(a.shape[a.dim() - b.dim():]) == tuple(b.shape):
        return
    raise ShapeError(
        f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} only broadcast over "
        "trailing dimensions; reshape explicitly"
    )


# ---------------------------------------------------------------------------
# op set


def add(a: Tensor, b) -> Tensor:
    _check_trailing("add", a, b)
    return _guard("add", a + b)


def mul(a: Tensor, b) -> Tensor:
    _check_trailing("mul", a, b)
    return _guard("mul", a * b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: inner dims {tuple(a.shape)} @ {tuple(b.shape)}")
    return _guard("matmul", a @ b)


def transpose(x: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    return x.transpose(dim0, dim1)


def reshape(x: Tensor, *shape: int) -> Tensor:
    return x.reshape(*shape)


def gather(table: Tensor, ids: Tensor) -> Tensor:
    """Row lookup: ``table[ids]`` for a 2-D table."""
    if table.dim() != 2:
        raise ShapeError("gather expects a 2-D table")
    return _guard("gather", F.embedding(ids, table))


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return _guard("softmax", torch.softmax(x, dim=dim))


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    """Fused ``log(softmax(x))``; avoids underflow in the log."""
    return _guard("log_softmax", torch.log_softmax(x, dim=dim))


def log(x: Tensor) -> Tensor:
    return _guard("log", torch.log(x))


def exp(x: Tensor) -> Tensor:
    return _guard("exp", torch.exp(x))


def square(x: Tensor) -> Tensor:
    return _guard("square", x * x)


def mean(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:
    return _guard("mean", x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim))


def sum(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:  # noqa: A001
    return _guard("sum", x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    scale = torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps)
    return _guard("rms_norm", x * scale * weight)


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Scaled dot-product attention over ``(..., T, d)`` inputs."""
    T = q.shape[-2]
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if causal:
        mask = torch.ones(T, k.shape[-2], dtype=torch.bool, device=q.device).tril()
        scores = scores.masked_fill(~mask, float("-inf"))
    return _guard("attention", torch.softmax(scores, dim=-1) @ v)


def geglu(x: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    """``(gelu(x W_a) * x W_b) W_out`` with ``w_in = [W_a | W_b]``."""
    a, b = (x @ w_in).chunk(2, dim=-1)
    return _guard("geglu", (F.gelu(a) * b) @ w_out)


class _ArgmaxOneHot(torch.autograd.Function):
    @staticmethod
    def forward(ctx, h):
        return F.one_hot(first_argmax(h), h.shape[-1]).to(h.dtype)

    @staticmethod
    def backward(ctx, grad):
        raise NonDifferentiableError(
            "argmax has no gradient; use ste_onehot for a straight-through path"
        )


class _SteOneHot(torch.autograd.Function):
    @staticmethod
    def forward(ctx, h):
        return F.one_hot(first_argmax(h), h.shape[-1]).to(h.dtype)

    @staticmethod
    def backward(ctx, grad):
        # straight-through: dz/dh = I
        return grad


def first_argmax(h: Tensor) -> Tensor:
    """Argmax over the last axis; ties resolve to the lowest index."""
    # torch.argmax does not document its tie-break, so make it explicit
    is_max = h == h.max(dim=-1, keepdim=True).values
    idx = torch.arange(h.shape[-1], device=h.device).expand_as(h)
    return torch.where(is_max, idx, h.shape[-1]).min(dim=-1).values


def argmax_onehot(h: Tensor) -> Tensor:
    """Hard one-hot; requesting a gradient through it raises."""
    return _ArgmaxOneHot.apply(h)


def ste_onehot(h: Tensor) -> Tensor:
    """Hard one-hot whose backward treats the Jacobian as identity."""
    return _SteOneHot.apply(h)


OP_SET = (
    "add", "mul", "matmul", "transpose", "reshape", "gather", "softmax",
    "log_softmax", "log", "exp", "square", "mean", "sum", "rms_norm",
    "attention", "geglu",
)


# ---------------------------------------------------------------------------
# graph functions


@dataclass
class GraphFunction:
    """A named-input, named-output function built from the op set.

    ``signature`` maps input names to expected shapes. ``fn`` receives the
    inputs as keyword arguments and returns a tensor or a dict of tensors.
    """

    fn: Callable[..., Tensor | Mapping[str, Tensor]]
    signature: dict[str, tuple[int, ...]]
    constant: frozenset[str] = field(default_factory=frozenset)

    def check_inputs(self, inputs: Mapping[str, Tensor]) -> None:
        missing = set(self.signature) - set(inputs)
        if missing:
            raise ShapeError(f"missing inputs: {sorted(missing)}")
        for name, shape in self.signature.items():
            got = tuple(inputs[name].shape)
            if got != tuple(shape):
                raise ShapeError(f"input {name!r}: expected shape {tuple(shape)}, got {got}")

    def __call__(self, **inputs: Tensor) -> dict[str, Tensor]:
        out = self.fn(**inputs)
        if isinstance(out, Tensor):
            return {"out": out}
        return dict(out)


def forward(f: GraphFunction, inputs: Mapping[str, Tensor], check: bool = True) -> dict[str, Tensor]:
    f.check_inputs(inputs)
    with checked(check), torch.no_grad():
        return f(**inputs)


def grad(
    f: GraphFunction,
    inputs: Mapping[str, Tensor],
    cotangent: Tensor | Mapping[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """Gradient of ``<cotangent, f(inputs)>`` with respect to every float input."""
    f.check_inputs(inputs)
    leaves = {}
    for name, t in inputs.items():
        if name in f.constant or not t.is_floating_point():
            leaves[name] = t
        else:
            leaves[name] = t.detach().clone().requires_grad_(True)
    outs = f(**leaves)
    if cotangent is None:
        cot = {k: torch.ones_like(v) for k, v in outs.items()}
    elif isinstance(cotangent, Tensor):
        if len(outs) != 1:
            raise ValueError("multi-output function needs a named cotangent")
        cot = {next(iter(outs)): cotangent}
    else:
        cot = dict(cotangent)
    total = None
    for k, v in outs.items():
        if k in cot:
            term = (v * cot[k]).sum()
            total = term if total is None else total + term
    diff = [n for n, t in leaves.items() if isinstance(t, Tensor) and t.requires_grad]
    if total is None or not diff or not total.requires_grad:
        return {n: torch.zeros_like(leaves[n]) for n in diff}
    gs = torch.autograd.grad(total, [leaves[n] for n in diff], allow_unused=True)
    return {n: (torch.zeros_like(leaves[n]) if g is None else g) for n, g in zip(diff, gs)}


def _scalar(f: GraphFunction, cotangent, **inputs) -> Tensor:
    outs = f(**inputs)
    if cotangent is None:
        (only,) = outs.values()
        return only.sum()
    if isinstance(cotangent, Tensor):
        (only,) = outs.values()
        return (only * cotangent.to(only.dtype)).sum()
    return torch.stack([(outs[k] * c.to(outs[k].dtype)).sum() for k, c in cotangent.items()]).sum()


def finite_difference_grad(
    f: GraphFunction,
    inputs: Mapping[str, Tensor],
    eps: float = 1e-5,
    cotangent=None,
    dtype: torch.dtype | None = torch.float64,
) -> dict[str, Tensor]:
    """Central differences ``(f(x+eps e) - f(x-eps e)) / 2 eps`` per coordinate.

    Evaluated in ``dtype`` (float64 by default) regardless of the input dtype.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {}
    for n, t in inputs.items():
        base[n] = t.detach().to(dtype) if (dtype is not None and t.is_floating_point()) else t.detach()
    cot = cotangent
    if isinstance(cot, Tensor) and dtype is not None:
        cot = cot.to(dtype)
    out = {}
    with torch.no_grad():
        for name, t in base.items():
            if name in f.constant or not t.is_floating_point():
                continue
            g = torch.zeros_like(t)
            flat = t.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = _scalar(f, cot, **base).item()
                flat[i] = orig - eps
                fm = _scalar(f, cot, **base).item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            out[name] = g
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_input: dict[str, float] = field(default_factory=dict)


def grad_check(
    f: GraphFunction,
    inputs: Mapping[str, Tensor],
    tol: float,
    eps: float = 1e-5,
    cotangent=None,
) -> GradCheckReport:
    """Compare ``grad`` with float64 central differences.

    Passes iff ``max |AD - FD| / max(1, |FD|) <= tol`` over all coordinates.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    ad = grad(f, inputs, cotangent)
    fd = finite_difference_grad(f, inputs, eps=eps, cotangent=cotangent)
    per = {}
    for name, g_fd in fd.items():
        g_ad = ad[name].detach().to(torch.float64)
        err = (g_ad - g_fd).abs() / g_fd.abs().clamp(min=1.0)
        per[name] = float(err.max()) if err.numel() else 0.0
    worst = max(per.values(), default=0.0)
    return GradCheckReport(max_rel_err=worst, passed=worst <= tol, per_input=per)
