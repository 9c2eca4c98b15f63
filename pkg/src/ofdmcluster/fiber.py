"""Scalar NLSE propagation over amplified fiber spans.

Units inside this module: time in ps, angular frequency in rad/ps, distance
in km, power in W. The field evolves as

    dA/dz = -alpha/2 A - j beta2/2 d2A/dT2 + beta3/6 d3A/dT3 + j gamma |A|^2 A

which with numpy's FFT sign convention (d/dT -> +j omega) gives the linear
operator ``-alpha/2 + j beta2/2 omega^2 - j beta3/6 omega^3``. Anomalous
dispersion (beta2 < 0) and gamma > 0 support bright solitons.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .config import PLANCK, AmplifierParams, FiberParams, rng_stream

_C_NM_PER_PS = 2.99792458e5


class PropagationError(RuntimeError):
    def __init__(self, distance_km: float, span_index: int):
        super().__init__(f"field became non-finite at {distance_km:.3f} km (span {span_index})")
        self.distance_km = distance_km
        self.span_index = span_index


@dataclass(frozen=True)
class PropagationState:
    field: np.ndarray  # sqrt(W) per sample
    distance_km: float = 0.0
    span_index: int = 0


@dataclass(frozen=True)
class FiberCoefficients:
    beta2: float  # ps^2/km
    beta3: float  # ps^3/km
    alpha: float  # 1/km, field attenuates as exp(-alpha z / 2)


def fiber_coefficients(fiber: FiberParams) -> FiberCoefficients:
    lam = fiber.center_wavelength_nm
    w = 2 * math.pi * _C_NM_PER_PS / lam**2  # 2 pi c / lambda^2, 1/(ps nm)
    beta2 = -fiber.dispersion_D / w
    # S = w^2 beta3 + (2 w / lambda) beta2
    beta3 = (fiber.dispersion_slope - 2 * w / lam * beta2) / w**2
    alpha = fiber.loss_db_per_km * math.log(10) / 10
    return FiberCoefficients(beta2, beta3, alpha)


def angular_frequencies(n: int, sample_rate: float) -> np.ndarray:
    """Angular frequency grid in rad/ps, FFT ordering."""
    return 2 * np.pi * np.fft.fftfreq(n, d=1e12 / sample_rate)


def linear_operator(fiber: FiberParams, omega: np.ndarray) -> np.ndarray:
    c = fiber_coefficients(fiber)
    return -c.alpha / 2 + 1j * (c.beta2 / 2) * omega**2 - 1j * (c.beta3 / 6) * omega**3


def set_launch_power(waveform: np.ndarray, lop_dbm: float) -> np.ndarray:
    power = float(np.mean(np.abs(waveform) ** 2)) if waveform.size else 0.0
    if power <= 0:
        raise ValueError("cannot set launch power of a zero-power waveform")
    target = 10 ** ((lop_dbm - 30) / 10)
    return waveform * np.sqrt(target / power)


def _step_sizes(length_km: float, step_km: float) -> list[float]:
    n_full = int(math.floor(length_km / step_km + 1e-9))
    steps = [step_km] * n_full
    rest = length_km - n_full * step_km
    if rest > 1e-9 * max(length_km, 1.0):
        steps.append(rest)
    return steps


def propagate_span(
    state: PropagationState,
    fiber: FiberParams,
    step_km: float,
    sample_rate: float,
    length_km: float | None = None,
) -> PropagationState:
    """Symmetric split-step Fourier over one span.

    Adjacent linear half steps are fused, so each step costs one FFT pair.
    """
    length = fiber.span_length_km if length_km is None else length_km
    steps = _step_sizes(length, step_km)
    if not steps:
        return PropagationState(state.field.copy(), state.distance_km, state.span_index)

    field = np.asarray(state.field, dtype=complex)
    op = linear_operator(fiber, angular_frequencies(field.size, sample_rate))
    gamma = fiber.gamma
    cache: dict[float, np.ndarray] = {}

    def half_exp(h: float) -> np.ndarray:
        if h not in cache:
            cache[h] = np.exp(op * h)
        return cache[h]

    spectrum = sfft.fft(field) * half_exp(steps[0] / 2)
    rotation = np.empty(field.size, dtype=complex)
    for i, h in enumerate(steps):
        field = sfft.ifft(spectrum, overwrite_x=True)
        if gamma:
            phase = np.abs(field)
            phase *= phase
            phase *= gamma * h
            rotation.real = np.cos(phase)
            rotation.imag = np.sin(phase)
            field *= rotation
        spectrum = sfft.fft(field, overwrite_x=True)
        nxt = steps[i + 1] / 2 if i + 1 < len(steps) else 0.0
        spectrum *= half_exp(h / 2 + nxt)
        if i % 200 == 199 and not np.isfinite(spectrum).all():
            raise PropagationError(state.distance_km + sum(steps[: i + 1]), state.span_index)
    field = sfft.ifft(spectrum)
    if not np.isfinite(field).all():
        raise PropagationError(state.distance_km + length, state.span_index)
    return PropagationState(field, state.distance_km + length, state.span_index)


def ase_variance(gain_db: float, noise_figure_db: float, carrier_hz: float, sample_rate: float) -> float:
    """Per-sample complex noise variance added by one amplifier, in W."""
    g = 10 ** (gain_db / 10)
    if g <= 1.0:
        return 0.0
    f = 10 ** (noise_figure_db / 10)
    n_sp = f * g / (2 * (g - 1))
    if n_sp < 1.0:
        warnings.warn(
            f"noise figure {noise_figure_db} dB implies n_sp={n_sp:.3f} < 1; flooring at 1",
            stacklevel=2,
        )
        n_sp = 1.0
    return (g - 1) * PLANCK * carrier_hz * n_sp * sample_rate


def edfa_amplify(
    state: PropagationState,
    amp: AmplifierParams,
    fiber: FiberParams,
    sample_rate: float,
    rng: np.random.Generator | None,
) -> PropagationState:
    """Lumped gain plus circular Gaussian ASE; ``rng=None`` disables the noise."""
    gain_db = amp.resolved_gain_db(fiber)
    field = state.field * np.sqrt(10 ** (gain_db / 10))
    var = ase_variance(gain_db, amp.noise_figure_db, fiber.carrier_frequency, sample_rate)
    if rng is not None and var > 0:
        noise = rng.standard_normal((2, field.size))
        field = field + np.sqrt(var / 2) * (noise[0] + 1j * noise[1])
    return PropagationState(field, state.distance_km, state.span_index + 1)


def propagate_link(
    waveform: np.ndarray,
    fiber: FiberParams,
    amp: AmplifierParams,
    lop_dbm: float,
    step_km: float,
    sample_rate: float,
    seed: int | None,
) -> np.ndarray:
    """Launch at ``lop_dbm`` then run ``n_spans`` x (span, amplifier).

    Span ``n`` (1-based) draws its ASE from the ``"ase-span-n"`` stream of
    ``seed``; ``seed=None`` gives a noiseless link.
    """
    state = PropagationState(set_launch_power(waveform, lop_dbm))
    for span in range(1, fiber.n_spans + 1):
        state = propagate_span(state, fiber, step_km, sample_rate)
        rng = None if seed is None else rng_stream(seed, f"ase-span-{span}")
        state = edfa_amplify(state, amp, fiber, sample_rate, rng)
    return state.field


def write_waveform(path: str | Path, waveform: np.ndarray) -> None:
    """Little-endian dump: uint64 sample count, then interleaved float64 (re, im)."""
    data = np.asarray(waveform, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", data.size))
        fh.write(data.view("<f8").tobytes())


def read_waveform(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (count,) = struct.unpack_from("<Q", raw)
    values = np.frombuffer(raw, dtype="<f8", offset=8)
    if values.size != 2 * count:
        raise ValueError(f"waveform file declares {count} samples but holds {values.size // 2}")
    return values.view("<c16").astype(complex)
