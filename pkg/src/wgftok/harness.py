"""Experiment driver: training runs, checkpoints, evaluation, sampling and
matched-reconstruction comparisons.

A run directory holds::

    config.yaml        resolved config snapshot
    metrics.jsonl      one record per training step
    checkpoints/       step_XXXXXXX.wgft (model, optimizer and rng state)
    prior.wgft         Stage II prior fitted on the final tokens
    report.json        final evaluation
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .baselines import StageOneState, eval_ar_loss, fit_prior, stage1_step, token_statistics
from .config import RunConfig, dump_config, from_dict
from .data import (
    MetricsRecord,
    gen_synthetic,
    load_checkpoint,
    load_cifar10,
    pack_u64s,
    save_checkpoint,
    unpack_u64s,
    write_metrics,
)
from .models import ARConfig, ARModel, Tokenizer, ar_sample, reconstruction_loss
from .rng import Xoshiro256
from .wgf import JointTrainState, NumericalAbort, dpd_train_step

log = logging.getLogger(__name__)

Tensor = torch.Tensor


def load_dataset(cfg: RunConfig) -> tuple[Tensor, Tensor]:
    """``(train, test)`` float32 image tensors; the test split is held out."""
    d = cfg.data
    if d.source == "synthetic":
        arr = gen_synthetic(cfg.synthetic_spec())
        train, test = arr[: d.train_size], arr[d.train_size :]
    else:
        # test_batch.bin, when present, comes last and supplies the held-out split
        arr, _ = load_cifar10(d.cifar_dir, downsample=d.downsample, include_test=True)
        if arr.shape[0] < d.train_size + d.test_size:
            raise ValueError(f"{d.cifar_dir}: {arr.shape[0]} images, need {d.train_size + d.test_size}")
        train, test = arr[: d.train_size], arr[arr.shape[0] - d.test_size :]
    return torch.from_numpy(np.ascontiguousarray(train)), torch.from_numpy(np.ascontiguousarray(test))


# ---------------------------------------------------------------------------
# run state


class Run:
    """Models, optimizers and rng streams of one experiment."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        seeds = Xoshiro256(cfg.seed)
        tok_seed, target_seed, proxy_seed = seeds.spawn(), seeds.spawn(), seeds.spawn()
        self.data_rng = Xoshiro256(seeds.spawn())
        aux_seed = seeds.spawn()
        self.prior_seed = seeds.spawn()
        self.tokenizer = Tokenizer(cfg.tokenizer_config(), seed=tok_seed)
        oc = cfg.optim_config()
        if cfg.mode == "wartok":
            self.state = JointTrainState.create(
                self.tokenizer,
                ARModel(cfg.ar_config(cfg.target), seed=target_seed),
                ARModel(cfg.ar_config(cfg.proxy), seed=proxy_seed),
                optim=oc,
                lambda_wgf=cfg.train.lambda_wgf,
                warmup_steps=cfg.warmup_steps(),
                train_target=cfg.train.train_target,
            )
        else:
            prob = cfg.train.tail_dropout_prob if cfg.mode == "tail_dropout" else 0.0
            self.state = StageOneState.create(self.tokenizer, oc, tail_dropout_prob=prob, seed=aux_seed)

    @property
    def step(self) -> int:
        return self.state.step

    def train_step(self, x: Tensor) -> MetricsRecord:
        if isinstance(self.state, JointTrainState):
            return dpd_train_step(self.state, x)
        return stage1_step(self.state, x)

    def next_batch(self, train: Tensor) -> Tensor:
        idx = self.data_rng.choice_indices(train.shape[0], self.cfg.train.batch_size)
        return train[torch.tensor(idx)]

    # -- persistence
    def _modules(self) -> dict[str, torch.nn.Module]:
        out = {"tok": self.tokenizer}
        if isinstance(self.state, JointTrainState):
            out["target"] = self.state.target
            out["proxy"] = self.state.proxy
        return out

    def _optimizers(self) -> dict[str, torch.optim.Optimizer]:
        if isinstance(self.state, JointTrainState):
            out = {"tok": self.state.tok_opt, "proxy": self.state.proxy_opt}
            if self.state.target_opt is not None:
                out["target"] = self.state.target_opt
            return out
        return {"tok": self.state.opt}

    def _rngs(self) -> dict[str, Xoshiro256]:
        out = {"data": self.data_rng}
        if isinstance(self.state, StageOneState) and self.state.rng is not None:
            out["tail"] = self.state.rng
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        t: dict[str, np.ndarray] = {}
        for mname, mod in self._modules().items():
            for pname, p in mod.state_dict().items():
                t[f"{mname}/{pname}"] = p.detach().cpu().numpy()
        for oname, opt in self._optimizers().items():
            for idx, slots in opt.state_dict()["state"].items():
                for slot, v in slots.items():
                    t[f"opt.{oname}/{idx}/{slot}"] = torch.as_tensor(v).detach().cpu().numpy()
        for rname, r in self._rngs().items():
            t[f"rng/{rname}"] = pack_u64s(r.get_state())
        return t

    def load_tensors(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for mname, mod in self._modules().items():
            sd = {k.split("/", 1)[1]: torch.from_numpy(v.copy()) for k, v in tensors.items()
                  if k.startswith(mname + "/")}
            mod.load_state_dict(sd, strict=True)
        for oname, opt in self._optimizers().items():
            sd = opt.state_dict()
            state: dict[int, dict] = {}
            prefix = f"opt.{oname}/"
            for k, v in tensors.items():
                if k.startswith(prefix):
                    idx, slot = k[len(prefix):].split("/")
                    state.setdefault(int(idx), {})[slot] = torch.from_numpy(v.copy())
            sd["state"] = state
            opt.load_state_dict(sd)
        for rname, r in self._rngs().items():
            r.set_state(unpack_u64s(tensors[f"rng/{rname}"]))
        self.state.step = step


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def eval_reconstruction(tokenizer: Tokenizer, images: Tensor) -> tuple[float, Tensor]:
    ids = tokenizer.tokenize(images)
    total = 0.0
    for i in range(0, images.shape[0], 256):
        x = images[i : i + 256]
        total += float(reconstruction_loss(x, tokenizer.decode_ids(ids[i : i + 256]), reduce=False).sum())
    return total / images.shape[0], ids


def evaluate_tokenizer(tokenizer: Tokenizer, train: Tensor, test: Tensor, cfg: RunConfig, seed: int):
    """Held-out recon loss plus the eval AR loss of a freshly fitted prior.

    The prior sees train-split ids only; the loss is measured on test ids.
    """
    rec, test_ids = eval_reconstruction(tokenizer, test)
    train_ids = tokenizer.tokenize(train)
    prior, curve = fit_prior(train_ids, cfg.tokenizer.codebook_size, cfg.prior, seed=seed)
    report = {
        "eval_l_rec": rec,
        "eval_ar_loss": eval_ar_loss(prior, test_ids),
        "prior_train_loss": float(np.mean(curve[-50:])),
        "test_tokens": token_statistics(test_ids, cfg.tokenizer.codebook_size),
    }
    return report, prior


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    out_dir: Path | None
    metrics: list[MetricsRecord]
    report: dict = field(default_factory=dict)
    tokenizer: Tokenizer | None = None
    prior: ARModel | None = None


def _ckpt_dir(out: Path) -> Path:
    return out / "checkpoints"


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    d = _ckpt_dir(Path(out_dir))
    found = sorted(d.glob("step_*.wgft")) if d.exists() else []
    return found[-1] if found else None


def save_run_checkpoint(run: Run, out: Path) -> Path:
    d = _ckpt_dir(out)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"step_{run.step:07d}.wgft"
    save_checkpoint(path, run.state_tensors(), run.cfg.to_dict(), run.step)
    return path


def restore_run(path: str | Path, cfg: RunConfig | None = None) -> Run:
    ck = load_checkpoint(path)
    ck_cfg = from_dict(ck.config)
    if cfg is not None and cfg.to_dict() != ck_cfg.to_dict():
        raise ValueError(f"{path}: checkpoint was written under a different config")
    run = Run(ck_cfg)
    run.load_tensors(ck.tensors, ck.step)
    return run


def run_experiment(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    *,
    resume: bool = False,
    steps: int | None = None,
    eval_every: int | None = None,
    on_eval: Callable[[Run, MetricsRecord], bool] | None = None,
    final_eval: bool = True,
    data: tuple[Tensor, Tensor] | None = None,
) -> RunResult:
    """Train one config; optional ``out_dir`` receives the run artifacts.

    ``on_eval(run, record)`` is called at every eval step and may return True
    to stop early. On a non-finite loss the last good checkpoint is kept and
    :class:`NumericalAbort` propagates.
    """
    out = Path(out_dir) if out_dir is not None else None
    total = steps if steps is not None else cfg.train.steps
    every = eval_every or cfg.train.eval_every
    train, test = data if data is not None else load_dataset(cfg)

    run = Run(cfg)
    sink = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (ck := latest_checkpoint(out)) is not None:
            run = restore_run(ck, cfg)
            _truncate_metrics(out / "metrics.jsonl", run.step)
            log.info("resumed from %s at step %d", ck, run.step)
        else:
            (out / "metrics.jsonl").unlink(missing_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
        sink = open(out / "metrics.jsonl", "a", encoding="ascii")

    metrics: list[MetricsRecord] = []
    try:
        while run.step < total:
            x = run.next_batch(train)
            try:
                rec = run.train_step(x)
            except NumericalAbort as e:
                if out is not None:
                    _write_json(out / "abort.json", {"step": run.step, "error": str(e), **e.diagnostics})
                raise
            if rec.step % every == 0 or rec.step == cfg.train.steps:
                rec.eval_l_rec, _ = eval_reconstruction(run.tokenizer, test)
            metrics.append(rec)
            if sink is not None:
                write_metrics(rec, sink)
                if rec.step % cfg.train.checkpoint_every == 0:
                    sink.flush()
                    save_run_checkpoint(run, out)
            if rec.eval_l_rec is not None and on_eval is not None and on_eval(run, rec):
                break
    finally:
        if sink is not None:
            sink.close()

    result = RunResult(out_dir=out, metrics=metrics, tokenizer=run.tokenizer)
    if out is not None and (latest_checkpoint(out) is None or latest_checkpoint(out).name != f"step_{run.step:07d}.wgft"):
        save_run_checkpoint(run, out)
    if final_eval:
        report, prior = evaluate_tokenizer(run.tokenizer, train, test, cfg, run.prior_seed)
        report.update(mode=cfg.mode, step=run.step)
        result.report, result.prior = report, prior
        if out is not None:
            save_checkpoint(out / "prior.wgft", {k: v.numpy() for k, v in prior.state_dict().items()},
                            asdict(prior.cfg), run.step)
            _write_json(out / "report.json", report)
    return result


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="ascii").splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep), encoding="ascii")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# eval / sample from a run directory


def load_prior(path: str | Path) -> ARModel:
    ck = load_checkpoint(path)
    model = ARModel(ARConfig(**ck.config))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ck.tensors.items()})
    return model


def evaluate_run(cfg: RunConfig, run_dir: str | Path) -> dict:
    ck = latest_checkpoint(run_dir)
    if ck is None:
        raise FileNotFoundError(f"no checkpoint under {run_dir}")
    run = restore_run(ck)
    train, test = load_dataset(run.cfg)
    report, _ = evaluate_tokenizer(run.tokenizer, train, test, run.cfg, run.prior_seed)
    report.update(mode=run.cfg.mode, step=run.step, checkpoint=str(ck))
    return report


def sample_run(run_dir: str | Path, count: int, temperature: float = 1.0, seed: int = 0) -> dict:
    """Ancestral samples from the run's Stage II prior, decoded to images."""
    run_dir = Path(run_dir)
    ck = latest_checkpoint(run_dir)
    if ck is None or not (run_dir / "prior.wgft").exists():
        raise FileNotFoundError(f"{run_dir} has no finished run (checkpoint and prior.wgft)")
    run = restore_run(ck)
    prior = load_prior(run_dir / "prior.wgft")
    ids = ar_sample(prior, run.cfg.tokenizer.n_tokens, temperature, seed, batch=count)
    with torch.no_grad():
        images = run.tokenizer.decode_ids(ids).clamp(0.0, 1.0).numpy()
    np.save(run_dir / "samples_ids.npy", ids.numpy())
    np.save(run_dir / "samples_images.npy", images)
    stats = token_statistics(ids, run.cfg.tokenizer.codebook_size)
    stats.update(count=count, temperature=temperature, seed=seed)
    return stats


# ---------------------------------------------------------------------------
# matched-reconstruction comparison


@dataclass
class ComparisonRow:
    method: str
    status: str  # "anchor", "matched" or "band not reached"
    step: int
    eval_l_rec: float
    eval_ar_loss: float | None = None
    rel_rec_gap: float = 0.0
    tokens: dict = field(default_factory=dict)
    wall_s: float = 0.0


@dataclass
class ComparisonReport:
    anchor: str
    band: tuple[float, float]
    rel_tol: float
    rows: list[ComparisonRow]

    def row(self, method: str) -> ComparisonRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def relative_gain(self, method: str, baseline: str) -> float:
        """``(L_baseline - L_method) / L_baseline`` for the eval AR loss."""
        a, b = self.row(method).eval_ar_loss, self.row(baseline).eval_ar_loss
        return (b - a) / b

    def to_records(self) -> list[dict]:
        out = []
        for r in self.rows:
            d = MetricsRecord(step=r.step, eval_l_rec=r.eval_l_rec, eval_ar_loss=r.eval_ar_loss).to_dict()
            d.update(method=r.method, status=r.status, rel_rec_gap=r.rel_rec_gap, wall_s=round(r.wall_s, 1),
                     band_lo=self.band[0], band_hi=self.band[1], **r.tokens)
            out.append(d)
        return out

    def table(self) -> str:
        lines = [f"{'method':<14}{'status':<18}{'step':>7}{'eval_l_rec':>12}{'eval_ar_loss':>14}{'codes':>7}"]
        for r in self.rows:
            ar = f"{r.eval_ar_loss:.4f}" if r.eval_ar_loss is not None else "-"
            lines.append(f"{r.method:<14}{r.status:<18}{r.step:>7}{r.eval_l_rec:>12.4f}{ar:>14}"
                         f"{r.tokens.get('codes_used', 0):>7}")
        return "\n".join(lines)


def compare(cfg: RunConfig, out_dir: str | Path | None = None, data=None) -> ComparisonReport:
    """Train each method and compare eval AR loss at matched reconstruction.

    The anchor method trains for its full budget; its final held-out recon
    loss ``r*`` defines the band ``r* (1 +- rel_tol)``. Every other method is
    checked every ``compare.eval_every`` steps and the in-band checkpoint
    closest to ``r*`` is kept. A method stops early once it has been below the
    band for three consecutive evals.
    """
    cc = cfg.compare
    data = data if data is not None else load_dataset(cfg)
    out = Path(out_dir) if out_dir is not None else None
    order = [cc.anchor] + [m for m in cc.methods if m != cc.anchor]
    rows: list[ComparisonRow] = []
    band = (math.nan, math.nan)
    r_star = math.nan
    for method in order:
        mcfg = cfg.with_overrides({"mode": method, **cc.overrides.get(method, {})})
        mdir = out / method if out is not None else None
        t0 = time.perf_counter()
        if method == cc.anchor:
            res = run_experiment(mcfg, mdir, data=data)
            r_star = res.report["eval_l_rec"]
            band = (r_star * (1 - cc.rel_tol), r_star * (1 + cc.rel_tol))
            rows.append(ComparisonRow(method, "anchor", res.report["step"], r_star, res.report["eval_ar_loss"],
                                      0.0, res.report["test_tokens"], time.perf_counter() - t0))
            continue

        best: dict = {}
        below = [0]

        def on_eval(run: Run, rec: MetricsRecord, best=best, below=below) -> bool:
            r = rec.eval_l_rec
            if band[0] <= r <= band[1] and ("gap" not in best or abs(r - r_star) < best["gap"]):
                best.update(gap=abs(r - r_star), step=rec.step, rec=r,
                            sd={k: v.clone() for k, v in run.tokenizer.state_dict().items()})
            below[0] = below[0] + 1 if r < band[0] else 0
            return below[0] >= 3

        res = run_experiment(mcfg, mdir, eval_every=cc.eval_every, on_eval=on_eval, final_eval=False, data=data)
        if not best:
            last = next((m for m in reversed(res.metrics) if m.eval_l_rec is not None), None)
            rows.append(ComparisonRow(method, "band not reached", last.step if last else 0,
                                      last.eval_l_rec if last else math.nan, None,
                                      ((last.eval_l_rec - r_star) / r_star) if last else math.nan,
                                      {}, time.perf_counter() - t0))
            log.warning("%s never entered the band [%.4f, %.4f]", method, *band)
            continue
        res.tokenizer.load_state_dict(best["sd"])
        report, _ = evaluate_tokenizer(res.tokenizer, data[0], data[1], mcfg, Run(mcfg).prior_seed)
        rows.append(ComparisonRow(method, "matched", best["step"], report["eval_l_rec"], report["eval_ar_loss"],
                                  (report["eval_l_rec"] - r_star) / r_star, report["test_tokens"],
                                  time.perf_counter() - t0))

    rep = ComparisonReport(anchor=cc.anchor, band=band, rel_tol=cc.rel_tol, rows=rows)
    if out is not None:
        with open(out / "compare.jsonl", "w", encoding="ascii") as fh:
            for d in rep.to_records():
                fh.write(json.dumps(d, separators=(",", ":")) + "\n")
        (out / "compare.txt").write_text(rep.table() + "\n", encoding="ascii")
    return rep
