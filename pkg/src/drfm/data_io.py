"""Readers and writers: IDX images, PCM16 WAV, binary PGM, checkpoints, loss traces.

Pixels map to ``2u/255 - 1`` and PCM samples to ``s/32768`` so every dataset
lives in [-1, 1]; the inverse maps round back to the exact integer codes.
Parse failures raise :class:`DataFormatError` naming the byte offset.
"""

from __future__ import annotations

import gzip
import io
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drfm.errors import DataFormatError
from drfm.model import ModelMode, RandomFeatures, RhoSpec, TrainableParams
from drfm.schedule import VarianceSchedule

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# -- datasets -------------------------------------------------------------


@dataclass(frozen=True)
class ImageKind:
    height: int
    width: int

    def describe(self) -> str:
        return f"image {self.height}x{self.width}"


@dataclass(frozen=True)
class AudioKind:
    sample_rate: int

    def describe(self) -> str:
        return f"audio {self.sample_rate} Hz"


@dataclass
class Dataset:
    examples: np.ndarray
    kind: ImageKind | AudioKind
    labels: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        x = np.asarray(self.examples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"examples must be a non-empty (n, d) matrix, got shape {x.shape}")
        if np.any(np.abs(x) > 1.0) or not np.all(np.isfinite(x)):
            raise ValueError("dataset entries must lie in [-1, 1]")
        if isinstance(self.kind, ImageKind) and x.shape[1] != self.kind.height * self.kind.width:
            raise ValueError(
                f"image dataset has d={x.shape[1]} but {self.kind.height}x{self.kind.width} pixels"
            )
        if self.labels is not None and len(self.labels) != x.shape[0]:
            raise ValueError("labels length does not match example count")
        self.examples = x

    @property
    def n(self) -> int:
        return self.examples.shape[0]

    @property
    def dim(self) -> int:
        return self.examples.shape[1]

    def subset(self, idx, note: str = "") -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        prov = self.provenance + (f"; {note}" if note else "")
        return Dataset(self.examples[idx], self.kind, labels, prov)


def pixels_to_unit(u) -> np.ndarray:
    return 2.0 * np.asarray(u, dtype=np.float64) / 255.0 - 1.0


def unit_to_pixels(v) -> np.ndarray:
    """Inverse of :func:`pixels_to_unit` with clamping and half-up rounding."""
    scaled = np.clip((np.asarray(v, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def pcm_to_unit(s) -> np.ndarray:
    return np.asarray(s, dtype=np.float64) / 32768.0


def unit_to_pcm(v) -> np.ndarray:
    scaled = np.floor(np.asarray(v, dtype=np.float64) * 32768.0 + 0.5)
    return np.clip(scaled, -32768, 32767).astype("<i2")


# -- IDX ------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (plain or gzip-compressed)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated at byte offset {len(raw)}, no magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(raw)}, need {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = math.prod(dims)
    if len(raw) < header + count:
        raise DataFormatError(
            f"{path}: truncated payload at byte offset {len(raw)}, expected {header + count} bytes"
        )
    if len(raw) > header + count:
        raise DataFormatError(f"{path}: {len(raw) - header - count} trailing bytes after offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx_images(images_path, labels_path=None, class_id: int | None = None,
                    limit: int | None = None, offset: int = 0) -> Dataset:
    """Load IDX images, keep rows labelled ``class_id``, skip ``offset`` of them, keep ``limit``."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    if labels_path is None:
        if class_id is not None:
            raise DataFormatError("class filtering needs a labels file")
        labels = np.zeros(images.shape[0], dtype=np.uint8)
    else:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels ({images_path}, {labels_path})"
        )
    idx = np.arange(images.shape[0])
    desc = f"idx {images_path}"
    if class_id is not None:
        idx = idx[labels == class_id]
        desc += f"; class {class_id}"
        if idx.size == 0:
            raise DataFormatError(f"{labels_path}: no examples with label {class_id}")
    if offset:
        idx = idx[offset:]
        desc += f"; skip {offset}"
    if limit is not None:
        idx = idx[:limit]
        desc += f"; limit {limit}"
    if idx.size == 0:
        raise DataFormatError(f"{images_path}: selection is empty")
    h, w = images.shape[1], images.shape[2]
    flat = images[idx].reshape(idx.size, h * w)
    kept = None if labels_path is None else labels[idx].astype(np.int64)
    return Dataset(pixels_to_unit(flat), ImageKind(h, w), kept, desc)


# -- WAV ------------------------------------------------------------------

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def read_wav_pcm16(path) -> tuple[np.ndarray, int]:
    """Return ``(samples[frames, channels] int16, sample_rate)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise DataFormatError(f"{path}: not a RIFF/WAVE file (byte offset 0)")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = pos + 8
        if body + size > len(raw):
            raise DataFormatError(
                f"{path}: chunk {cid!r} at byte offset {pos} runs past end of file"
            )
        if cid == b"fmt ":
            if size < 16:
                raise DataFormatError(f"{path}: fmt chunk at byte offset {pos} too short")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", raw, body)
            if tag == WAVE_FORMAT_EXTENSIBLE and size >= 40:
                (tag,) = struct.unpack_from("<H", raw, body + 24)
            fmt = (tag, channels, rate, bits, body)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise DataFormatError(f"{path}: no fmt chunk")
    tag, channels, rate, bits, fmt_at = fmt
    if tag != WAVE_FORMAT_PCM:
        raise DataFormatError(f"{path}: unsupported format tag 0x{tag:04x} at byte offset {fmt_at}")
    if bits != 16:
        raise DataFormatError(f"{path}: {bits}-bit samples at byte offset {fmt_at + 14}; only 16-bit PCM")
    if channels < 1:
        raise DataFormatError(f"{path}: zero channels at byte offset {fmt_at + 2}")
    if data is None:
        raise DataFormatError(f"{path}: no data chunk")
    start, size = data
    frame = 2 * channels
    if size % frame:
        raise DataFormatError(f"{path}: data chunk at byte offset {start - 8} not a whole number of frames")
    samples = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=start)
    return samples.reshape(-1, channels), rate


def load_wav(path, window: int | None = None) -> Dataset:
    """Load a PCM16 WAV as one example (or non-overlapping windows of ``window`` samples)."""
    samples, rate = read_wav_pcm16(path)
    if samples.shape[0] == 0:
        raise DataFormatError(f"{path}: empty data chunk")
    if samples.shape[1] == 1:
        mono = pcm_to_unit(samples[:, 0])
    else:
        mono = pcm_to_unit(samples.astype(np.float64).mean(axis=1))
    if window is None:
        examples = mono[None, :]
    else:
        n = mono.size // window
        if n < 1:
            raise DataFormatError(f"{path}: {mono.size} samples is shorter than window {window}")
        examples = mono[: n * window].reshape(n, window)
    return Dataset(examples, AudioKind(rate), None, f"wav {path}")


def write_wav(path, signal, sample_rate: int) -> None:
    pcm = unit_to_pcm(np.ravel(signal))
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


# -- PGM ------------------------------------------------------------------


def write_pgm(vector, height: int, width: int, path) -> None:
    v = np.asarray(vector, dtype=np.float64).ravel()
    if v.size != height * width:
        raise ValueError(f"vector has {v.size} entries, need {height}x{width}={height * width}")
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + unit_to_pixels(v).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int, int]:
    """Read a binary 8-bit PGM; returns ``(values in [-1, 1], height, width)``."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header at byte offset {pos}")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: bad PGM magic {tokens[0]!r} at byte offset 0")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataFormatError(f"{path}: maxval {maxval} unsupported, need 255")
    pos += 1
    if len(raw) - pos != width * height:
        raise DataFormatError(
            f"{path}: pixel payload at byte offset {pos} has {len(raw) - pos} bytes, expected {width * height}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    return pixels_to_unit(pixels), height, width


# -- checkpoints ----------------------------------------------------------

CHECKPOINT_MAGIC = b"DRFM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIBIIIQQ")


@dataclass(eq=False)
class Checkpoint:
    mode: ModelMode
    betas: np.ndarray
    W: np.ndarray
    b: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    seed: int
    epochs: int
    meta: dict[str, str] = field(default_factory=dict)  # sidecar only, not in the binary

    @property
    def dims(self) -> tuple[int, int, int]:
        d, n = self.W.shape
        return d, n, self.betas.size

    def schedule(self) -> VarianceSchedule:
        return VarianceSchedule(self.betas)

    def features(self) -> RandomFeatures:
        return RandomFeatures(W=self.W, b=self.b, rho=RhoSpec(), seed=self.seed)

    def params(self) -> TrainableParams:
        return TrainableParams(theta1=self.theta1, theta2=self.theta2)

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.betas, self.W, self.b, self.theta1, self.theta2)

    def equals(self, other: "Checkpoint") -> bool:
        """Field-for-field bit equality (the sidecar metadata is ignored)."""
        if (self.mode, self.seed, self.epochs, self.dims) != (other.mode, other.seed, other.epochs, other.dims):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


def checkpoint_size(d: int, n: int, K: int) -> int:
    return _HEADER.size + 8 * (K + d * n + n + K * n + n * d)


def _validate_checkpoint(ckpt: Checkpoint) -> None:
    d, n, K = ckpt.dims
    expect = {"betas": (K,), "W": (d, n), "b": (n,), "theta1": (K, n), "theta2": (n, d)}
    for name, shape in expect.items():
        arr = getattr(ckpt, name)
        if arr.shape != shape:
            raise DataFormatError(f"checkpoint field {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise DataFormatError(f"checkpoint field {name} contains non-finite entries")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    _validate_checkpoint(ckpt)
    d, n, K = ckpt.dims
    buf = io.BytesIO()
    buf.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ModelMode.parse(ckpt.mode).value,
                           d, n, K, int(ckpt.seed), int(ckpt.epochs)))
    for arr in ckpt.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    if ckpt.meta:
        write_keyvalue(path.with_name(path.name + ".meta"), ckpt.meta)


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{source}: truncated header at byte offset {len(raw)}")
    magic, version, mode, d, n, K, seed, epochs = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{source}: bad magic {magic!r} at byte offset 0")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{source}: unsupported version {version} at byte offset 4")
    try:
        mode = ModelMode(mode)
    except ValueError:
        raise DataFormatError(f"{source}: unknown mode byte {mode} at byte offset 8") from None
    expected = checkpoint_size(d, n, K)
    if len(raw) != expected:
        raise DataFormatError(
            f"{source}: payload is {len(raw)} bytes, expected {expected} for d={d}, N={n}, K={K}"
        )
    pos = _HEADER.size
    arrays = []
    for shape in ((K,), (d, n), (n,), (K, n), (n, d)):
        count = math.prod(shape)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
            raise DataFormatError(f"{source}: non-finite value at byte offset {pos + 8 * bad}")
        arrays.append(arr)
        pos += 8 * count
    betas, W, b, theta1, theta2 = arrays
    return Checkpoint(mode=mode, betas=betas, W=W, b=b, theta1=theta1, theta2=theta2,
                      seed=seed, epochs=epochs)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    ckpt = parse_checkpoint(path.read_bytes(), str(path))
    try:
        ckpt.schedule()
    except ValueError as exc:
        raise DataFormatError(f"{path}: invalid schedule: {exc}") from None
    sidecar = path.with_name(path.name + ".meta")
    if sidecar.exists():
        ckpt.meta = read_keyvalue(sidecar)
    return ckpt


def kind_meta(kind: ImageKind | AudioKind) -> dict[str, str]:
    if isinstance(kind, ImageKind):
        return {"kind": "image", "height": str(kind.height), "width": str(kind.width)}
    return {"kind": "audio", "sample_rate": str(kind.sample_rate)}


def kind_from_meta(meta: dict[str, str]) -> ImageKind | AudioKind | None:
    kind = meta.get("kind")
    if kind == "image":
        return ImageKind(int(meta["height"]), int(meta["width"]))
    if kind == "audio":
        return AudioKind(int(meta["sample_rate"]))
    return None


# -- text formats ---------------------------------------------------------


def write_keyvalue(path, items: dict) -> None:
    lines = [f"{k}={v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_loss_trace(path, losses) -> None:
    with open(path, "w") as fh:
        for epoch, loss in enumerate(losses, 1):
            fh.write(f"{epoch}\t{float(loss)!r}\n")


def read_loss_trace(path) -> list[tuple[int, float]]:
    trace = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected <epoch><TAB><loss>")
        trace.append((int(parts[0]), float(parts[1])))
    return trace
