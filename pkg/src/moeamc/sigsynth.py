"""Synthetic labeled I/Q frames over a (modulation, SNR) grid.

Linear schemes map Gray-coded bit groups onto unit-average-power
constellations, then hold each symbol for ``sps`` samples (rectangular
pulse). Noise is complex AWGN scaled against the measured frame power.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .seeding import MASK64, mix, stream

CPFSK_MOD_INDEX = 0.5


class ModulationScheme(enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "PSK8"
    QAM16 = "QAM16"
    QAM64 = "QAM64"
    ASK4 = "ASK4"
    CPFSK2 = "CPFSK2"
    OOK = "OOK"

    @property
    def bits_per_symbol(self) -> int:
        return _BITS[self]

    @property
    def is_linear(self) -> bool:
        return self is not ModulationScheme.CPFSK2

    @classmethod
    def parse(cls, name) -> "ModulationScheme":
        if isinstance(name, cls):
            return name
        key = str(name).upper().replace("-", "")
        aliases = {"8PSK": "PSK8", "16QAM": "QAM16", "64QAM": "QAM64", "GFSK": "CPFSK2", "2FSK": "CPFSK2"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown modulation scheme {name!r}") from None


_BITS = {
    ModulationScheme.BPSK: 1,
    ModulationScheme.QPSK: 2,
    ModulationScheme.PSK8: 3,
    ModulationScheme.QAM16: 4,
    ModulationScheme.QAM64: 6,
    ModulationScheme.ASK4: 2,
    ModulationScheme.CPFSK2: 1,
    ModulationScheme.OOK: 1,
}

DEFAULT_SCHEMES = tuple(ModulationScheme)


def _gray_pam(m: int) -> np.ndarray:
    """Levels indexed by Gray label: ``levels[label]`` for an m-ary PAM."""
    levels = np.empty(m)
    for k in range(m):
        levels[k ^ (k >> 1)] = 2 * k - (m - 1)
    return levels


def _build_constellation(scheme: ModulationScheme) -> np.ndarray:
    S = ModulationScheme
    if scheme is S.BPSK:
        pts = np.array([1.0, -1.0], dtype=complex)
    elif scheme is S.QPSK:
        pts = np.array([complex(1 - 2 * (v >> 1), 1 - 2 * (v & 1)) for v in range(4)])
    elif scheme is S.PSK8:
        pts = np.empty(8, dtype=complex)
        for k in range(8):
            pts[k ^ (k >> 1)] = np.exp(2j * np.pi * k / 8)
    elif scheme in (S.QAM16, S.QAM64):
        side = 4 if scheme is S.QAM16 else 8
        half = side.bit_length() - 1
        pam = _gray_pam(side)
        pts = np.array([complex(pam[v >> half], pam[v & (side - 1)]) for v in range(side * side)])
    elif scheme is S.ASK4:
        pts = _gray_pam(4).astype(complex)
    elif scheme is S.OOK:
        pts = np.array([0.0, 1.0], dtype=complex)
    else:
        raise ValueError(f"{scheme.value} has no constellation")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


CONSTELLATIONS = {s: _build_constellation(s) for s in ModulationScheme if s.is_linear}


@dataclass(frozen=True, eq=False)
class IQFrame:
    i: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        i = np.asarray(self.i)
        q = np.asarray(self.q)
        if i.ndim != 1 or i.shape != q.shape:
            raise ValueError(f"I and Q must be 1-D of equal length, got {i.shape} and {q.shape}")
        if i.size == 0:
            raise ValueError("empty frame")
        if not (np.all(np.isfinite(i)) and np.all(np.isfinite(q))):
            raise ValueError("frame contains non-finite samples")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "q", q)

    @property
    def length(self) -> int:
        return self.i.size

    @property
    def power(self) -> float:
        return float(np.mean(self.i.astype(np.float64) ** 2 + self.q.astype(np.float64) ** 2))

    def __eq__(self, other):
        if not isinstance(other, IQFrame):
            return NotImplemented
        return np.array_equal(self.i, other.i) and np.array_equal(self.q, other.q)


@dataclass(frozen=True)
class LabeledExample:
    frame: IQFrame
    class_idx: int
    snr_db: float


def modulate(bits, scheme, sps: int) -> IQFrame:
    """Map a bit sequence onto a baseband frame of ``len(bits) / bps * sps`` samples."""
    scheme = ModulationScheme.parse(scheme)
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if sps < 1:
        raise ValueError("sps must be >= 1")
    bps = scheme.bits_per_symbol
    if bits.size == 0 or bits.size % bps:
        raise ValueError(f"{bits.size} bits is not a positive multiple of {bps} for {scheme.value}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0 or 1")
    groups = bits.reshape(-1, bps)
    labels = groups @ (1 << np.arange(bps - 1, -1, -1))
    if scheme is ModulationScheme.CPFSK2:
        # phase advances by +-pi*h per symbol, linearly within the symbol
        freq = np.repeat(1.0 - 2.0 * labels, sps)
        phase = np.cumsum(np.pi * CPFSK_MOD_INDEX * freq / sps)
        sig = np.exp(1j * phase)
    else:
        sig = np.repeat(CONSTELLATIONS[scheme][labels], sps)
    return IQFrame(sig.real.copy(), sig.imag.copy())


def apply_awgn(frame: IQFrame, snr_db: float, rng: np.random.Generator) -> IQFrame:
    """Add complex AWGN with per-component variance ``P / (2 * 10**(snr/10))``."""
    p = frame.power
    if p <= 0.0:
        raise ValueError("cannot apply AWGN at a fixed SNR to a zero-power frame")
    sigma = math.sqrt(p / (2.0 * 10.0 ** (snr_db / 10.0)))
    noise = rng.standard_normal((2, frame.length)) * sigma
    return IQFrame(frame.i + noise[0], frame.q + noise[1])


@dataclass(frozen=True)
class DatasetSpec:
    schemes: tuple = DEFAULT_SCHEMES
    snr_grid_db: tuple = tuple(float(s) for s in range(-20, 21, 4))
    frame_len: int = 128
    samples_per_symbol: int = 8
    frames_per_cell: int = 200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(ModulationScheme.parse(s) for s in self.schemes))
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        if not self.schemes:
            raise ValueError("at least one modulation scheme is required")
        if len(set(self.schemes)) != len(self.schemes):
            raise ValueError("duplicate modulation scheme")
        grid = self.snr_grid_db
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("snr_grid_db must be non-empty and strictly increasing")
        if self.frame_len < 1 or self.samples_per_symbol < 1:
            raise ValueError("frame_len and samples_per_symbol must be positive")
        if self.frame_len % self.samples_per_symbol:
            raise ValueError("frame_len must be divisible by samples_per_symbol")
        if self.frames_per_cell < 0:
            raise ValueError("frames_per_cell must be >= 0")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_classes(self) -> int:
        return len(self.schemes)

    @property
    def n_examples(self) -> int:
        return len(self.schemes) * len(self.snr_grid_db) * self.frames_per_cell

    def to_dict(self) -> dict:
        return {
            "schemes": [s.value for s in self.schemes],
            "snr_grid_db": list(self.snr_grid_db),
            "frame_len": self.frame_len,
            "samples_per_symbol": self.samples_per_symbol,
            "frames_per_cell": self.frames_per_cell,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


SPLIT_TAGS = ("full", "train", "val", "test")


@dataclass(eq=False)
class Dataset:
    """Examples stored column-wise: ``iq`` is float32 [N, 2, L]."""

    spec: DatasetSpec
    iq: np.ndarray
    class_idx: np.ndarray
    snr_db: np.ndarray
    split_tag: str = "full"
    source_index: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}")
        n = self.class_idx.shape[0]
        if self.iq.shape != (n, 2, self.spec.frame_len) or self.snr_db.shape != (n,):
            raise ValueError("inconsistent dataset array shapes")
        if n and (self.class_idx.min() < 0 or self.class_idx.max() >= self.spec.n_classes):
            raise ValueError("class index out of range")
        if self.source_index is None:
            self.source_index = np.arange(n)

    def __len__(self) -> int:
        return self.class_idx.shape[0]

    def __getitem__(self, n: int) -> LabeledExample:
        return LabeledExample(IQFrame(self.iq[n, 0], self.iq[n, 1]), int(self.class_idx[n]), float(self.snr_db[n]))

    def __iter__(self) -> Iterator[LabeledExample]:
        return (self[n] for n in range(len(self)))

    @property
    def examples(self) -> list[LabeledExample]:
        return list(self)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.split_tag == other.split_tag
            and np.array_equal(self.iq, other.iq)
            and np.array_equal(self.class_idx, other.class_idx)
            and np.array_equal(self.snr_db, other.snr_db)
        )

    def subset(self, idx, split_tag: str) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.spec,
            self.iq[idx],
            self.class_idx[idx],
            self.snr_db[idx],
            split_tag,
            self.source_index[idx],
        )

    @classmethod
    def from_examples(cls, spec: DatasetSpec, examples: Sequence[LabeledExample], split_tag="full") -> "Dataset":
        n = len(examples)
        iq = np.zeros((n, 2, spec.frame_len), dtype=np.float32)
        for k, ex in enumerate(examples):
            iq[k, 0], iq[k, 1] = ex.frame.i, ex.frame.q
        return cls(
            spec,
            iq,
            np.array([ex.class_idx for ex in examples], dtype=np.int64),
            np.array([ex.snr_db for ex in examples], dtype=np.float64),
            split_tag,
        )


def generate_example(spec: DatasetSpec, n: int) -> LabeledExample:
    """Example at global index `n`; cells are ordered scheme-major, then SNR."""
    per_scheme = len(spec.snr_grid_db) * spec.frames_per_cell
    cls_idx, rem = divmod(n, per_scheme)
    snr = spec.snr_grid_db[rem // spec.frames_per_cell]
    scheme = spec.schemes[cls_idx]
    rng = stream(spec.seed, n)
    nbits = spec.frame_len // spec.samples_per_symbol * scheme.bits_per_symbol
    while True:
        # all-off OOK payloads have no power; redraw from the same stream
        clean = modulate(rng.integers(0, 2, nbits), scheme, spec.samples_per_symbol)
        if clean.power > 0.0:
            break
    noisy = apply_awgn(clean, snr, rng)
    return LabeledExample(noisy, cls_idx, snr)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    n = spec.n_examples
    iq = np.empty((n, 2, spec.frame_len), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    snrs = np.empty(n, dtype=np.float64)
    for k in range(n):
        ex = generate_example(spec, k)
        iq[k, 0] = ex.frame.i
        iq[k, 1] = ex.frame.q
        labels[k] = ex.class_idx
        snrs[k] = ex.snr_db
    return Dataset(spec, iq, labels, snrs, "full")


def split_dataset(ds: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffled train/val/test partition; members of each split keep source order."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    n = len(ds)
    perm = np.random.Generator(np.random.PCG64(mix(seed, n))).permutation(n)
    n_train = min(n, int(round(ratios[0] * n)))
    n_val = min(n - n_train, int(round(ratios[1] * n)))
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(ds.subset(np.sort(p), tag) for p, tag in zip(parts, ("train", "val", "test")))


# on-disk format -------------------------------------------------------------

DS_MAGIC = b"MOEAMCDS"
DS_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


def _record_dtype(L: int) -> np.dtype:
    return np.dtype([("cls", "<u2"), ("snr", "<f4"), ("len", "<u4"), ("i", "<f4", (L,)), ("q", "<f4", (L,))])


def save_dataset(ds: Dataset, path) -> None:
    L = ds.spec.frame_len
    header = json.dumps(
        {"spec": ds.spec.to_dict(), "split_tag": ds.split_tag, "n_examples": len(ds)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    rec = np.zeros(len(ds), dtype=_record_dtype(L))
    rec["cls"] = ds.class_idx
    rec["snr"] = ds.snr_db
    rec["len"] = L
    rec["i"] = ds.iq[:, 0]
    rec["q"] = ds.iq[:, 1]
    body = DS_MAGIC + struct.pack("<II", DS_VERSION, len(header)) + header + rec.tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DS_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != DS_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {DS_VERSION}")
    if len(raw) < 16 + hlen:
        raise TruncatedFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        spec = DatasetSpec.from_dict(header["spec"])
        n = int(header["n_examples"])
        tag = header["split_tag"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: malformed header: {exc}") from exc
    dt = _record_dtype(spec.frame_len)
    end = 16 + hlen + n * dt.itemsize
    if len(raw) < end + 4:
        raise TruncatedFileError(f"{path}: truncated payload")
    if len(raw) > end + 4:
        raise DatasetFormatError(f"{path}: trailing bytes after checksum")
    (crc,) = struct.unpack_from("<I", raw, end)
    if zlib.crc32(raw[:end]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    rec = np.frombuffer(raw, dtype=dt, count=n, offset=16 + hlen)
    if n and np.any(rec["len"] != spec.frame_len):
        raise DatasetFormatError(f"{path}: record length disagrees with header")
    iq = np.empty((n, 2, spec.frame_len), dtype=np.float32)
    iq[:, 0] = rec["i"]
    iq[:, 1] = rec["q"]
    # snr is stored as f32; map back onto the exact grid value
    grid = np.array(spec.snr_grid_db)
    pos = np.searchsorted(grid.astype(np.float32), rec["snr"])
    pos = np.clip(pos, 0, len(grid) - 1)
    if n and not np.array_equal(grid.astype(np.float32)[pos], rec["snr"]):
        raise DatasetFormatError(f"{path}: snr value off the declared grid")
    return Dataset(spec, iq, rec["cls"].astype(np.int64), grid[pos], tag)
