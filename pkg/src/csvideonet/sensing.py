"""Multi-rate block compressive sensing with Bernoulli matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ingest import GopBlockSequence

# Measurement lengths used for the nominal CR labels with 32x32 blocks.
STANDARD_MEASUREMENTS = {25: 40, 50: 20, 100: 10}
NOISE_MODES = ("measurement", "frame")


class SensingError(ValueError):
    pass


def measurements_for_cr(cr: float, n: int = 1024) -> int:
    """Per-frame measurement count for a nominal CR label (floor(n / cr), at least 1).

    Reproduces the 40/20/10 lengths for CR 25/50/100 at n=1024.
    """
    if cr <= 0:
        raise SensingError("CR must be positive")
    return max(1, int(n // cr))


def make_bernoulli_matrix(m: int, n: int, seed: int) -> np.ndarray:
    """m x n matrix with i.i.d. entries +-1/sqrt(m), drawn with numpy's PCG64 seeded by ``seed``."""
    if m < 1 or n < 1:
        raise SensingError(f"matrix dimensions must be positive, got {m}x{n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    signs = rng.integers(0, 2, size=(m, n), dtype=np.int8) * 2 - 1
    return (signs / np.sqrt(m)).astype(np.float32)


@dataclass(frozen=True)
class SensingMatrixSet:
    phi_key: np.ndarray
    phi_nonkey: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return self.phi_key.shape[1]

    @property
    def m_key(self) -> int:
        return self.phi_key.shape[0]

    @property
    def m_nonkey(self) -> int:
        return self.phi_nonkey.shape[0]

    @classmethod
    def generate(cls, m_key: int, m_nonkey: int, n: int = 1024, seed: int = 0) -> "SensingMatrixSet":
        if not m_key >= m_nonkey >= 1:
            raise SensingError(f"need mKey >= mNonKey >= 1, got {m_key}, {m_nonkey}")
        key = make_bernoulli_matrix(m_key, n, seed)
        nonkey = make_bernoulli_matrix(m_nonkey, n, seed + 1)
        key.setflags(write=False)
        nonkey.setflags(write=False)
        return cls(key, nonkey, seed)

    def meta(self) -> dict:
        return {
            "seed": self.seed,
            "mKey": self.m_key,
            "mNonKey": self.m_nonkey,
            "n": self.n,
            "scaleKey": 1.0 / math.sqrt(self.m_key),
            "scaleNonKey": 1.0 / math.sqrt(self.m_nonkey),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "SensingMatrixSet":
        return cls.generate(meta["mKey"], meta["mNonKey"], meta["n"], meta["seed"])


@dataclass(frozen=True)
class MeasurementGop:
    """``key``: (rows, cols, mKey); ``nonkey``: (T-1, rows, cols, mNonKey)."""

    key: np.ndarray
    nonkey: np.ndarray
    n: int

    def __post_init__(self):
        if self.key.ndim != 3 or self.nonkey.ndim != 4:
            raise SensingError("bad measurement array ranks")
        if self.key.shape[:2] != self.nonkey.shape[1:3]:
            raise SensingError("key and non-key grids differ")

    @property
    def T(self) -> int:
        return self.nonkey.shape[0] + 1

    @property
    def grid(self) -> tuple[int, int]:
        return self.key.shape[0], self.key.shape[1]

    @property
    def cr_meta(self) -> tuple[int, int, int, int]:
        return self.key.shape[-1], self.nonkey.shape[-1], self.T, self.n


def sense_block(phi: np.ndarray, block: np.ndarray) -> np.ndarray:
    """y = phi @ x over the last axis of ``block`` (flattened blocks allowed)."""
    x = np.asarray(block)
    n = phi.shape[1]
    if x.shape[-1] != n:
        if x.ndim >= 2 and x.shape[-1] * x.shape[-2] == n:
            x = x.reshape(*x.shape[:-2], n)
        else:
            raise SensingError(f"block length {x.shape[-1]} does not match phi with {n} columns")
    y = x.astype(np.float64) @ phi.astype(np.float64).T
    return y.astype(np.float32)


def sense_gop(mats: SensingMatrixSet, gop: GopBlockSequence) -> MeasurementGop:
    if gop.block_size**2 != mats.n:
        raise SensingError(f"GOP block size {gop.block_size} incompatible with n={mats.n}")
    blocks = gop.blocks
    return MeasurementGop(
        key=sense_block(mats.phi_key, blocks[0]),
        nonkey=sense_block(mats.phi_nonkey, blocks[1:]),
        n=mats.n,
    )


def sense_array(mats: SensingMatrixSet, blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched sensing of (..., T, rows, cols, b, b) arrays; returns (key, nonkey)."""
    return sense_block(mats.phi_key, blocks[..., 0, :, :, :, :]), sense_block(
        mats.phi_nonkey, blocks[..., 1:, :, :, :, :]
    )


def add_measurement_noise(y: np.ndarray, snr_db: float, seed: int) -> np.ndarray:
    """Add white Gaussian noise with power mean(y**2) / 10**(snr_db/10).

    ``snr_db = inf`` disables noise and returns ``y`` unchanged.
    """
    y = np.asarray(y)
    if math.isinf(snr_db) and snr_db > 0:
        return y
    if not math.isfinite(snr_db):
        raise SensingError(f"SNR must be finite or +inf, got {snr_db}")
    power = float(np.mean(y.astype(np.float64) ** 2))
    if power == 0.0:
        raise SensingError("zero-power signal: SNR is undefined")
    sigma = math.sqrt(power / 10 ** (snr_db / 10))
    rng = np.random.Generator(np.random.PCG64(seed))
    return (y + rng.normal(0.0, sigma, size=y.shape)).astype(y.dtype)


def aggregate_cr(m_key: int, m_nonkey: int, T: int, n: int) -> float:
    """GOP-level compression ratio T*n / (mKey + (T-1)*mNonKey)."""
    if min(m_key, m_nonkey, T, n) <= 0:
        raise SensingError("arguments must be positive")
    return T * n / (m_key + (T - 1) * m_nonkey)
