"""Time grid, Gaussian noise banks, Brownian paths and Girsanov weights.

Increments are stored as standard normals. Every use site rescales them
by ``sqrt(T/p)`` so that one bank serves every pair of noise intensities.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BANK_MAGIC = 0x4B4E4142_474E4643  # arbitrary tag, checked on load
BANK_VERSION = 1
_HEADER = struct.Struct("<7q")

# stream kinds in the counter-based key
_COMMON = 0
_IDIO = 1


class CacheCorruptionError(RuntimeError):
    """A cache file exists but its content cannot be trusted."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / p`` on ``[0, T]``."""

    T: float = 1.0
    p: int = 10

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"p must be a positive integer, got {self.p!r}")
        if not np.isfinite(self.T) or self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T!r}")

    @property
    def step(self) -> float:
        return self.T / self.p

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.p + 1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class NoiseBank:
    """Fixed standard-normal increments.

    ``idio`` has shape ``(M, N, p, d)`` and ``common`` has shape ``(N, p, d)``.
    Both arrays are read-only.
    """

    idio: np.ndarray
    common: np.ndarray
    seed: int

    def __post_init__(self):
        if self.idio.ndim != 4 or self.common.ndim != 3:
            raise ValueError("idio must be 4-d and common 3-d")
        if self.idio.shape[1:] != self.common.shape:
            raise ValueError(f"shape mismatch {self.idio.shape} vs {self.common.shape}")
        _readonly(self.idio)
        _readonly(self.common)

    @property
    def M(self) -> int:
        return self.idio.shape[0]

    @property
    def N(self) -> int:
        return self.common.shape[0]

    @property
    def p(self) -> int:
        return self.common.shape[1]

    @property
    def d(self) -> int:
        return self.common.shape[2]

    @property
    def fingerprint(self) -> str:
        key = f"bank:v{BANK_VERSION}:{self.seed}:{self.M}:{self.N}:{self.p}:{self.d}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]


def _stream(seed: int, kind: int, *index: int) -> np.random.Generator:
    # Philox keyed by (seed, kind, index): one independent counter stream per path
    key = np.random.SeedSequence(seed, spawn_key=(kind, *index)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise_bank(seed: int, M: int, N: int, p: int, d: int) -> NoiseBank:
    """Draw a bank with one counter-based stream per ``(i, j)`` path.

    The result depends only on ``(seed, M, N, p, d)``; the draw order of
    the streams is irrelevant, so any parallel split yields the same bank.
    """
    for name, v in (("M", M), ("N", N), ("p", p), ("d", d)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    seed = int(seed)
    if not 0 <= seed < 2**63:
        raise ValueError("seed must fit in a non-negative 64-bit integer")
    common = np.empty((N, p, d))
    idio = np.empty((M, N, p, d))
    for j in range(N):
        common[j] = _stream(seed, _COMMON, j).standard_normal((p, d))
        for i in range(M):
            idio[i, j] = _stream(seed, _IDIO, i, j).standard_normal((p, d))
    return NoiseBank(idio=idio, common=common, seed=seed)


@dataclass(frozen=True)
class DrivingPath:
    """Path values at the nodes ``k = 0..p``; shape ``(p + 1, d)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if np.any(v[0] != 0):
            raise ValueError("a driving path starts at 0")
        object.__setattr__(self, "values", _readonly(v))


def brownian_nodes(increments, grid: TimeGrid) -> DrivingPath:
    """Cumulate standard-normal increments into Brownian node values."""
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 1:
        inc = inc[:, None]
    if inc.shape[0] != grid.p:
        raise ValueError(f"expected {grid.p} increments, got {inc.shape[0]}")
    values = np.zeros((grid.p + 1, inc.shape[1]))
    values[1:] = np.sqrt(grid.step) * np.cumsum(inc, axis=0)
    return DrivingPath(values)


def interpolate_linear(path: DrivingPath, grid: TimeGrid, t: float) -> np.ndarray:
    """Piecewise-affine interpolation of node values, exact at nodes."""
    if not 0.0 <= t <= grid.T:
        raise ValueError(f"t={t} outside [0, {grid.T}]")
    s = grid.p * t / grid.T
    k = int(round(s))
    if abs(s - k) <= 1e-12 * grid.p:
        return path.values[k].copy()
    k = int(np.floor(s))
    frac = s - k
    return path.values[k] + frac * (path.values[k + 1] - path.values[k])


def shift_path(path: DrivingPath, h, eps: float, grid: TimeGrid) -> DrivingPath:
    """Add the drift ``(1/eps) * integral of h`` with ``h`` constant per step."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = np.asarray(h, dtype=float).reshape(grid.p, -1)
    drift = np.zeros_like(path.values)
    drift[1:] = (grid.step / eps) * np.cumsum(h, axis=0)
    return DrivingPath(path.values + drift)


@dataclass(frozen=True)
class GirsanovWeights:
    """Exponential-martingale weights: ``full`` is ``(N,)``, ``tail`` is ``(N, p)``."""

    full: np.ndarray
    tail: np.ndarray = field(repr=False)

    @classmethod
    def ones(cls, N: int, p: int) -> "GirsanovWeights":
        return cls(full=np.ones(N), tail=np.ones((N, p)))


def _log_increments(h: np.ndarray, common: np.ndarray, eps: float, grid: TimeGrid) -> np.ndarray:
    # per-step exponent: -(1/eps) sqrt(tau) h_s . dw_{s+1} - tau/(2 eps^2) |h_s|^2
    tau = grid.step
    return -(np.sqrt(tau) / eps) * np.sum(h * common, axis=-1) - (tau / (2 * eps**2)) * np.sum(
        h * h, axis=-1
    )


def girsanov_weights(h, common, eps: float, grid: TimeGrid) -> GirsanovWeights:
    """Weights for all realizations at once.

    Parameters
    ----------
    h : array of shape (N, p, d)
        Tilting intercept, constant on each step.
    common : array of shape (N, p, d)
        Standard-normal common increments.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = np.asarray(h, dtype=float)
    common = np.asarray(common, dtype=float)
    if h.shape != common.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {common.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite intercept")
    log_inc = _log_increments(h, common, eps, grid)
    # reverse cumulative sum gives the exponent over [t_k, T]
    log_tail = np.cumsum(log_inc[:, ::-1], axis=1)[:, ::-1]
    tail = np.exp(log_tail)
    return GirsanovWeights(full=tail[:, 0].copy(), tail=tail)


def girsanov_weight(h, common_increments, eps: float, grid: TimeGrid) -> GirsanovWeights:
    """Weights of a single realization; ``full`` is a scalar and ``tail`` is ``(p,)``."""
    h = np.asarray(h, dtype=float).reshape(grid.p, -1)
    inc = np.asarray(common_increments, dtype=float).reshape(grid.p, -1)
    w = girsanov_weights(h[None], inc[None], eps, grid)
    return GirsanovWeights(full=w.full[0], tail=w.tail[0])


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_bank(bank: NoiseBank, path) -> None:
    header = _HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.seed, bank.M, bank.N, bank.p, bank.d)
    body = np.ascontiguousarray(bank.idio, dtype="<f8").tobytes() + np.ascontiguousarray(
        bank.common, dtype="<f8"
    ).tobytes()
    _atomic_write(Path(path), header + body)


def load_bank(path, seed: int, M: int, N: int, p: int, d: int) -> NoiseBank:
    """Read a cached bank, raising :class:`CacheCorruptionError` on any mismatch."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CacheCorruptionError(f"{path}: truncated header")
    magic, version, *key = _HEADER.unpack_from(raw)
    if magic != BANK_MAGIC or version != BANK_VERSION:
        raise CacheCorruptionError(f"{path}: bad magic or version")
    if tuple(key) != (seed, M, N, p, d):
        raise CacheCorruptionError(f"{path}: key {key} does not match request")
    n_idio, n_common = M * N * p * d, N * p * d
    if len(raw) != _HEADER.size + 8 * (n_idio + n_common):
        raise CacheCorruptionError(f"{path}: wrong payload size")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    if not np.all(np.isfinite(data)):
        raise CacheCorruptionError(f"{path}: non-finite entries")
    idio = data[:n_idio].reshape(M, N, p, d).copy()
    common = data[n_idio:].reshape(N, p, d).copy()
    return NoiseBank(idio=idio, common=common, seed=seed)


def cached_noise_bank(cache_dir, seed: int, M: int, N: int, p: int, d: int) -> NoiseBank:
    """Load the bank from ``cache_dir`` or sample and store it.

    A corrupt or stale entry is resampled and overwritten.
    """
    path = Path(cache_dir) / f"bank_{seed}_{M}_{N}_{p}_{d}.bin"
    if path.exists():
        try:
            return load_bank(path, seed, M, N, p, d)
        except CacheCorruptionError:
            pass
    bank = sample_noise_bank(seed, M, N, p, d)
    save_bank(bank, path)
    return bank
