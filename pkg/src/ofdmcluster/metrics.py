"""Bit-error counting, Q-factor conversion, EVM and trial result records."""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc, erfcinv


@dataclass
class TrialResult:
    ber: float
    q_factor_db: float
    n_bits: int
    n_errors: int
    cluster_count_histogram: dict[int, int] = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def modal_cluster_count(self) -> int | None:
        return modal_count(self.cluster_count_histogram)


def count_ber(tx: np.ndarray, rx: np.ndarray) -> tuple[int, float]:
    tx = np.asarray(tx)
    rx = np.asarray(rx)
    if tx.shape != rx.shape:
        raise ValueError(f"bit blocks differ in length: {tx.size} vs {rx.size}")
    if tx.size == 0:
        return 0, 0.0
    n_errors = int(np.count_nonzero(tx != rx))
    ber = n_errors / tx.size
    if ber > 0.5:
        warnings.warn(f"BER {ber:.3f} exceeds 0.5; decisions may be inverted", stacklevel=2)
    return n_errors, ber


def q_factor_db(ber: float) -> float:
    """Q = 20 log10(sqrt(2) erfcinv(2 BER)); +inf for an error-free block."""
    if ber < 0 or ber >= 0.5 or math.isnan(ber):
        raise ValueError(f"Q-factor is undefined for BER={ber}")
    if ber == 0:
        return math.inf
    q_lin = math.sqrt(2.0) * float(erfcinv(2.0 * ber))
    return 20.0 * math.log10(q_lin) if q_lin > 0 else -math.inf


def ber_from_q_db(q_db: float) -> float:
    if q_db == math.inf:
        return 0.0
    q_lin = 10 ** (q_db / 20.0)
    return 0.5 * float(erfc(q_lin / math.sqrt(2.0)))


def evm(rx: np.ndarray, ref: np.ndarray) -> float:
    """RMS error magnitude over RMS reference magnitude."""
    rx = np.asarray(rx)
    ref = np.asarray(ref)
    if rx.shape != ref.shape:
        raise ValueError(f"grid geometry mismatch: {rx.shape} vs {ref.shape}")
    return float(np.sqrt(np.mean(np.abs(rx - ref) ** 2) / np.mean(np.abs(ref) ** 2)))


def modal_count(histogram: dict[int, int]) -> int | None:
    """Most frequent cluster count; ties go to the smaller count."""
    if not histogram:
        return None
    return min(histogram, key=lambda c: (-histogram[c], c))


def count_histogram(counts) -> dict[int, int]:
    return dict(sorted(Counter(int(c) for c in counts).items()))


def pooled_q_db(n_errors: int, n_bits: int) -> float:
    """Q from the BER pooled over several blocks (average in the BER domain)."""
    return q_factor_db(n_errors / n_bits) if n_bits else math.nan
