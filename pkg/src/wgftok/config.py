"""Strict run configuration.

Config files are YAML (JSON is accepted as a subset). Unknown keys, wrong
types and out-of-range values are fatal and reported with the dotted field
path and, when available, the source line.
"""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .baselines import PriorFitConfig
from .data import SyntheticSpec
from .models import ARConfig, TokenizerConfig
from .wgf import OptimConfig

MODES = ("wartok", "two_stage", "tail_dropout")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "", line: int | None = None):
        where = path or "<root>"
        if line is not None:
            where = f"line {line}: {where}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


@dataclass
class DataConfig:
    source: str = "synthetic"
    train_size: int = 4096
    test_size: int = 512
    data_seed: int = 0
    min_rects: int = 2
    max_rects: int = 4
    palette_size: int = 8
    cifar_dir: str | None = None
    downsample: bool = True


@dataclass
class ARSection:
    layers: int = 3
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    temperature: float = 1.0


@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 3e-3
    proxy_lr: float = 1e-3
    target_lr: float = 1e-3
    weight_decay: float = 0.03
    betas: list[float] = field(default_factory=lambda: [0.9, 0.99])
    lambda_wgf: float = 1e-4
    warmup_frac: float = 0.1
    train_target: bool = False
    tail_dropout_prob: float = 0.5
    eval_every: int = 500
    checkpoint_every: int = 1000


@dataclass
class CompareConfig:
    methods: list[str] = field(default_factory=lambda: list(MODES))
    anchor: str = "wartok"
    rel_tol: float = 0.05
    eval_every: int = 50
    overrides: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    mode: str = "wartok"
    seed: int = 0
    out_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=lambda: TokenizerConfig(tau_q=0.1))
    target: ARSection = field(default_factory=lambda: ARSection(layers=3, temperature=0.1))
    proxy: ARSection = field(default_factory=lambda: ARSection(layers=1))
    prior: PriorFitConfig = field(default_factory=PriorFitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    # -- derived views
    def tokenizer_config(self) -> TokenizerConfig:
        return copy.deepcopy(self.tokenizer)

    def ar_config(self, section: ARSection) -> ARConfig:
        t = self.tokenizer
        return ARConfig(vocab=t.codebook_size, n_tokens=t.n_tokens, width=section.width, heads=section.heads,
                        layers=section.layers, mlp_ratio=section.mlp_ratio, temperature=section.temperature)

    def optim_config(self) -> OptimConfig:
        tr = self.train
        return OptimConfig(lr=tr.lr, proxy_lr=tr.proxy_lr, target_lr=tr.target_lr,
                           weight_decay=tr.weight_decay, betas=(tr.betas[0], tr.betas[1]))

    def synthetic_spec(self) -> SyntheticSpec:
        d, t = self.data, self.tokenizer
        return SyntheticSpec(height=t.image_size, width=t.image_size, channels=t.channels,
                             min_rects=d.min_rects, max_rects=d.max_rects, palette_size=d.palette_size,
                             size=d.train_size + d.test_size, seed=d.data_seed)

    def warmup_steps(self) -> int:
        return int(round(self.train.warmup_frac * self.train.steps))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """A copy with ``overrides`` merged in; per-method overrides are dropped."""
        base = self.to_dict()
        base["compare"]["overrides"] = {}
        return from_dict(_deep_merge(base, overrides))

    def validate(self) -> None:
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(msg, path)

        need(self.mode in MODES, "mode", f"must be one of {list(MODES)}")
        need(0 <= self.seed < 2**64, "seed", "must be a u64")
        d = self.data
        need(d.source in ("synthetic", "cifar10"), "data.source", "must be 'synthetic' or 'cifar10'")
        need(d.train_size > 0, "data.train_size", "must be positive")
        need(d.test_size > 0, "data.test_size", "must be positive")
        if d.source == "cifar10":
            need(d.cifar_dir is not None, "data.cifar_dir", "required when data.source is cifar10")
            need(self.tokenizer.image_size == (16 if d.downsample else 32), "tokenizer.image_size",
                 "must match the CIFAR-10 resolution (16 with downsample, else 32)")
        try:
            self.synthetic_spec().validate()
        except ValueError as e:
            raise ConfigError(str(e), "data") from None
        try:
            self.tokenizer.validate()
        except ValueError as e:
            raise ConfigError(str(e), "tokenizer") from None
        for name in ("target", "proxy"):
            try:
                self.ar_config(getattr(self, name)).validate()
            except ValueError as e:
                raise ConfigError(str(e), name) from None
        p = self.prior
        for k in ("layers", "width", "heads", "mlp_ratio", "steps", "batch_size"):
            need(getattr(p, k) > 0, f"prior.{k}", "must be positive")
        need(p.lr > 0, "prior.lr", "must be positive")
        tr = self.train
        for k in ("steps", "batch_size", "eval_every", "checkpoint_every"):
            need(getattr(tr, k) > 0, f"train.{k}", "must be positive")
        for k in ("lr", "proxy_lr", "target_lr"):
            need(getattr(tr, k) > 0, f"train.{k}", "must be positive")
        need(tr.weight_decay >= 0, "train.weight_decay", "must be non-negative")
        need(len(tr.betas) == 2 and all(0 <= b < 1 for b in tr.betas), "train.betas", "needs two values in [0, 1)")
        need(tr.lambda_wgf >= 0, "train.lambda_wgf", "must be non-negative")
        need(0 <= tr.warmup_frac <= 1, "train.warmup_frac", "must lie in [0, 1]")
        need(0 <= tr.tail_dropout_prob <= 1, "train.tail_dropout_prob", "must lie in [0, 1]")
        c = self.compare
        need(len(c.methods) >= 1 and all(m in MODES for m in c.methods), "compare.methods",
             f"entries must be among {list(MODES)}")
        need(c.anchor in c.methods, "compare.anchor", "must be one of compare.methods")
        need(0 < c.rel_tol < 1, "compare.rel_tol", "must lie in (0, 1)")
        need(c.eval_every > 0, "compare.eval_every", "must be positive")
        for m, ov in c.overrides.items():
            need(m in c.methods, f"compare.overrides.{m}", "names a method not in compare.methods")
            need(isinstance(ov, dict), f"compare.overrides.{m}", "must be a mapping")


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "overrides":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# parsing


def _line_index(node, prefix: str = "", out: dict | None = None) -> dict:
    """Dotted key path -> 1-based source line, from a composed YAML node."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_index(v, path, out)
    return out


def _coerce(value, tp, path: str, lines: dict):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    line = lines.get(path)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path, lines)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError("expected a mapping", path, line)
        return _build(tp, value, path, lines)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError("expected a list", path, line)
        return [_coerce(v, args[0], f"{path}[{i}]", lines) for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"expected a list of {len(args)} values", path, line)
        return tuple(_coerce(v, a, f"{path}[{i}]", lines) for i, (v, a) in enumerate(zip(value, args)))
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError("expected a mapping", path, line)
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path, line)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path, line)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path, line)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path, line)
        return value
    raise ConfigError(f"unsupported field type {tp!r}", path, line)


def _build(cls, data: dict, prefix: str, lines: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            path = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(names))})", path, lines.get(path))
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        kwargs[key] = _coerce(value, hints[key], path, lines)
    return cls(**kwargs)


def from_dict(data: dict, lines: dict | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    # partial sections fill in from the RunConfig defaults, not the section class defaults
    # (target/proxy share ARSection but default to different depths and temperatures)
    cfg = _build(RunConfig, _deep_merge(RunConfig().to_dict(), data), "", lines or {})
    try:
        cfg.validate()
    except ConfigError as e:
        if e.line is None and e.path in (lines or {}):
            raise ConfigError(str(e).split(": ", 1)[1], e.path, lines[e.path]) from None
        raise
    for m, ov in cfg.compare.overrides.items():
        # surface typos in per-method overrides at load time
        try:
            cfg.with_overrides(ov)
        except ConfigError as e:
            raise ConfigError(str(e), f"compare.overrides.{m}", (lines or {}).get(f"compare.overrides.{m}")) from None
    return cfg


def parse_config(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(e, 'problem', e)}", "", mark.line + 1 if mark else None) from None
    if data is None:
        data = {}
    return from_dict(data, _line_index(node) if node is not None else {})


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e.strerror}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
