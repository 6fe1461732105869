"""Datasets, checkpoints and metrics streams."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .rng import Xoshiro256

# Eight fixed colours (RGB in [0, 1]).
PALETTE: tuple[tuple[float, float, float], ...] = (
    (0.0, 0.0, 0.0),
    (1.0, 1.0, 1.0),
    (0.9, 0.1, 0.1),
    (0.1, 0.8, 0.2),
    (0.15, 0.3, 0.95),
    (0.95, 0.85, 0.1),
    (0.6, 0.2, 0.8),
    (0.1, 0.85, 0.85),
)


class DataFormatError(ValueError):
    """Raised for malformed dataset or checkpoint files."""


@dataclass
class SyntheticSpec:
    height: int = 16
    width: int = 16
    channels: int = 3
    min_rects: int = 2
    max_rects: int = 4
    palette_size: int = 8
    size: int = 2048
    seed: int = 0

    def validate(self) -> None:
        if self.size <= 0:
            raise ValueError("synthetic dataset size must be positive")
        if self.channels != 3:
            raise ValueError("synthetic images are RGB (channels=3)")
        if not 1 <= self.palette_size <= len(PALETTE):
            raise ValueError(f"palette_size must be in [1, {len(PALETTE)}]")
        if not 0 <= self.min_rects <= self.max_rects:
            raise ValueError("need 0 <= min_rects <= max_rects")
        if self.height < 2 or self.width < 2:
            raise ValueError("images must be at least 2x2")


def gen_synthetic(spec: SyntheticSpec, seed: int | None = None) -> np.ndarray:
    """Axis-aligned coloured rectangles on a solid background.

    Per image the draws are, in order: background colour, rectangle count,
    then for each rectangle its height, width, top, left and colour. Sides
    are uniform in ``[2, max(2, side // 2)]``. Returns float32 ``(N, H, W, 3)``.
    """
    spec.validate()
    rng = Xoshiro256(spec.seed if seed is None else seed)
    palette = np.asarray(PALETTE[: spec.palette_size], dtype=np.float32)
    H, W = spec.height, spec.width
    out = np.empty((spec.size, H, W, 3), dtype=np.float32)
    for i in range(spec.size):
        img = out[i]
        img[...] = palette[rng.below(spec.palette_size)]
        for _ in range(rng.randint(spec.min_rects, spec.max_rects)):
            rh = rng.randint(2, max(2, H // 2))
            rw = rng.randint(2, max(2, W // 2))
            top = rng.below(H - rh + 1)
            left = rng.below(W - rw + 1)
            img[top : top + rh, left : left + rw] = palette[rng.below(spec.palette_size)]
    return out


CIFAR_RECORD = 3073


def _parse_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record starts at byte offset {whole * CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} out of range at byte offset "
            f"{int(bad[0]) * CIFAR_RECORD}"
        )
    # channel-planar: 1024 R, 1024 G, 1024 B, each row-major 32x32
    pix = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pix, labels


def load_cifar10(
    directory: str | Path, downsample: bool = False, include_test: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Read ``data_batch_*.bin`` files; pixels scaled to [0, 1] float32.

    ``downsample`` averages 2x2 blocks (32x32 -> 16x16).
    """
    directory = Path(directory)
    files = sorted(directory.glob("data_batch_*.bin"))
    if include_test and (directory / "test_batch.bin").exists():
        files.append(directory / "test_batch.bin")
    if not files:
        raise FileNotFoundError(f"no data_batch_*.bin files in {directory}")
    images, labels = [], []
    for f in files:
        pix, lab = _parse_cifar_file(f)
        images.append(pix)
        labels.append(lab)
    x = np.concatenate(images).astype(np.float32) / 255.0
    if downsample:
        n = x.shape[0]
        x = x.reshape(n, 16, 2, 16, 2, 3).mean(axis=(2, 4), dtype=np.float32)
    return x, np.concatenate(labels)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian): b"WGFT" | u32 version | u32 tensor count |
#   per tensor: u16 name length, name (ascii), u8 rank, u32 dims..., f32 payload
#   | u32 CRC32 of every preceding byte.
# The step counter and config snapshot travel as reserved tensors so the
# layout stays uniform.

CKPT_MAGIC = b"WGFT"
CKPT_VERSION = 1
STEP_KEY = "__step__"
CONFIG_KEY = "__config__"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int


def _u64_to_f32_words(value: int) -> np.ndarray:
    # four 16-bit words, each exactly representable in float32
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def _f32_words_to_u64(words: np.ndarray) -> int:
    return sum(int(w) << (16 * i) for i, w in enumerate(words.tolist()))


def pack_u64s(values: Iterable[int]) -> np.ndarray:
    return np.concatenate([_u64_to_f32_words(v) for v in values])


def unpack_u64s(arr: np.ndarray) -> list[int]:
    return [_f32_words_to_u64(arr[i : i + 4]) for i in range(0, arr.size, 4)]


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict, step: int) -> None:
    entries = dict(tensors)
    for reserved in (STEP_KEY, CONFIG_KEY):
        if reserved in entries:
            raise ValueError(f"tensor name {reserved!r} is reserved")
    entries[STEP_KEY] = _u64_to_f32_words(step)
    cfg = json.dumps(config, sort_keys=True).encode("ascii")
    entries[CONFIG_KEY] = np.frombuffer(cfg, dtype=np.uint8).astype(np.float32)

    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(entries))
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        bname = name.encode("ascii")
        buf += struct.pack("<H", len(bname)) + bname
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a WGFT checkpoint")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise DataFormatError(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unknown checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("ascii")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            numel = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=off).reshape(dims)
            off += 4 * numel
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: corrupt tensor table at byte {off}") from exc
    if off != len(raw) - 4:
        raise DataFormatError(f"{path}: {len(raw) - 4 - off} trailing bytes before checksum")
    step = _f32_words_to_u64(tensors.pop(STEP_KEY))
    config = json.loads(tensors.pop(CONFIG_KEY).astype(np.uint8).tobytes().decode("ascii"))
    return Checkpoint(tensors=tensors, config=config, step=step)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    """One line of training telemetry. ``None`` fields are omitted on write."""

    step: int
    l_rec: float | None = None
    l_ar_proxy: float | None = None
    wgf_score_norm: float | None = None
    eval_ar_loss: float | None = None
    eval_l_rec: float | None = None
    wall_ms: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = v
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        known = {f.name for f in fields(cls)} - {"extra"}
        kw = {k: v for k, v in d.items() if k in known}
        extra = {k: v for k, v in d.items() if k not in known}
        return cls(extra=extra, **kw)

    def deterministic_view(self) -> dict:
        """Every field except wall-clock timing."""
        d = self.to_dict()
        d.pop("wall_ms", None)
        return d


def write_metrics(record: MetricsRecord, sink: IO[str]) -> None:
    sink.write(json.dumps(record.to_dict(), ensure_ascii=True, separators=(",", ":")) + "\n")


def read_metrics(source: Iterable[str] | str | Path) -> Iterator[MetricsRecord]:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="ascii") as fh:
            yield from read_metrics(list(fh))
        return
    for line in source:
        line = line.strip()
        if line:
            yield MetricsRecord.from_dict(json.loads(line))
