"""Transmitter/receiver DSP: DQPSK mapping, CP-OFDM, DAC/ADC model, one-tap equalization.

Grids are complex arrays shaped ``(n_subcarriers, n_symbols_per_subcarrier)``; the
first ``n_pilot_symbols`` columns are pilot slots. Waveforms are flat complex
arrays at the OFDM sample rate. Bit blocks are flat ``uint8`` arrays.
"""
from __future__ import annotations

import numpy as np

from .config import FrontendParams, OfdmParams, rng_stream

QPSK_REFERENCE = (1 + 1j) / np.sqrt(2)
PILOT_SEED = 0x5EED

# dibit (b0 b1) -> number of quarter turns: 00->0, 01->1, 11->2, 10->3
_DIBIT_TO_TURNS = np.array([0, 1, 3, 2], dtype=np.int64)
# quarter turns -> dibit index b0*2+b1
_TURNS_TO_DIBIT = np.array([0, 1, 3, 2], dtype=np.int64)
_QUARTER_TURNS = np.array([1, 1j, -1, -1j])


class ModemError(ValueError):
    pass


class DeadSubcarrierError(ModemError):
    def __init__(self, subcarrier: int):
        super().__init__(f"channel estimate vanishes on subcarrier {subcarrier}")
        self.subcarrier = subcarrier


def mean_power(waveform: np.ndarray) -> float:
    return float(np.mean(np.abs(waveform) ** 2)) if waveform.size else 0.0


def generate_bits(ofdm: OfdmParams, rng: np.random.Generator, n_bits: int | None = None) -> np.ndarray:
    """Equiprobable i.i.d. bits; defaults to the payload size of one OFDM block."""
    n = ofdm.n_data_bits if n_bits is None else n_bits
    return rng.integers(0, 2, size=n, dtype=np.uint8)


def pilot_symbols(ofdm: OfdmParams) -> np.ndarray:
    """Known pilot values, shape ``(n_subcarriers, n_pilot_symbols)``.

    Pseudo-random QPSK from a fixed stream, identical for every trial. A
    constant pilot column would be a time-domain impulse that the DAC clips
    and the Kerr effect rotates far more than the data.
    """
    rng = rng_stream(PILOT_SEED, "pilot")
    turns = rng.integers(0, 4, size=(ofdm.n_subcarriers, ofdm.n_pilot_symbols))
    return QPSK_REFERENCE * _QUARTER_TURNS[turns]


def dqpsk_encode(bits: np.ndarray, ofdm: OfdmParams) -> np.ndarray:
    """Differentially encode ``bits`` onto the data slots of a transmit grid.

    Bits are laid out subcarrier-major: subcarrier ``k`` carries
    ``bits[2*k*Td : 2*(k+1)*Td]`` as consecutive dibits, ``Td`` being the number
    of data slots. The last pilot slot is the phase reference of each subcarrier.
    """
    bits = np.asarray(bits)
    if bits.size != ofdm.n_data_bits:
        raise ModemError(f"expected {ofdm.n_data_bits} bits for this grid, got {bits.size}")
    dibits = bits.reshape(ofdm.n_subcarriers, ofdm.n_data_symbols, 2).astype(np.int64)
    turns = _DIBIT_TO_TURNS[2 * dibits[..., 0] + dibits[..., 1]]
    phase_index = np.cumsum(turns, axis=1) % 4

    pilots = pilot_symbols(ofdm)
    reference = pilots[:, -1:]
    grid = np.empty((ofdm.n_subcarriers, ofdm.n_symbols_per_subcarrier), dtype=complex)
    grid[:, : ofdm.n_pilot_symbols] = pilots
    grid[:, ofdm.n_pilot_symbols :] = reference * _QUARTER_TURNS[phase_index]
    return grid


def dqpsk_decode(grid: np.ndarray, ofdm: OfdmParams) -> np.ndarray:
    """Quadrant decision on ``symbol[t] * conj(symbol[t-1])`` over the data slots.

    The grid's own last pilot slot is used as reference, so a global phase
    rotation of the whole grid leaves the output unchanged.
    """
    p = ofdm.n_pilot_symbols
    current = grid[:, p:]
    previous = grid[:, p - 1 : -1]
    product = current * np.conj(previous)
    turns = np.rint(np.angle(product) / (np.pi / 2)).astype(np.int64) % 4
    dibit = _TURNS_TO_DIBIT[turns]
    bits = np.stack([dibit >> 1, dibit & 1], axis=-1).astype(np.uint8)
    return bits.reshape(-1)


def ofdm_modulate(grid: np.ndarray, ofdm: OfdmParams) -> np.ndarray:
    """Unitary IDFT per OFDM symbol, cyclic prefix prepended, symbols concatenated."""
    cp = ofdm.cp_length
    body = np.fft.ifft(grid, axis=0, norm="ortho").T  # (n_symbols, n_subcarriers)
    framed = np.concatenate([body[:, body.shape[1] - cp :], body], axis=1) if cp else body
    return framed.reshape(-1)


def ofdm_demodulate(waveform: np.ndarray, ofdm: OfdmParams, timing_advance: int = 0) -> np.ndarray:
    """Strip the cyclic prefix and take the unitary DFT of each symbol.

    ``timing_advance`` moves the FFT window that many samples into the cyclic
    prefix; this multiplies subcarrier ``k`` by ``exp(-2j*pi*k*d/n)``, which a
    pilot-based channel estimate absorbs.
    """
    n, cp = ofdm.n_subcarriers, ofdm.cp_length
    expected = ofdm.n_symbols_per_subcarrier * (n + cp)
    if waveform.size != expected:
        raise ModemError(f"waveform has {waveform.size} samples, expected {expected}")
    if not 0 <= timing_advance <= cp:
        raise ModemError(f"timing_advance must be within the cyclic prefix (0..{cp})")
    frames = waveform.reshape(ofdm.n_symbols_per_subcarrier, n + cp)
    start = cp - timing_advance
    body = frames[:, start : start + n]
    return np.fft.fft(body, axis=1, norm="ortho").T


def _quantize_rail(x: np.ndarray, clip: float, bits: int) -> np.ndarray:
    levels = 2**bits
    step = 2.0 * clip / (levels - 1)
    # levels at -clip + i*step, i = 0..2^bits-1: symmetric, no zero level
    idx = np.clip(np.rint((np.clip(x, -clip, clip) + clip) / step), 0, levels - 1)
    return idx * step - clip


def frontend_quantize(
    waveform: np.ndarray, fp: FrontendParams, clip_level: float | None = None
) -> np.ndarray:
    """Clip and uniformly quantize I and Q independently (DAC or ADC).

    The clip level defaults to the per-quadrature RMS raised by the clipping
    ratio. The quantizer has ``2**bits`` levels spanning ``[-clip, clip]``.
    """
    if clip_level is None:
        power = mean_power(waveform)
        if power <= 0:
            raise ModemError("cannot derive a clip level from a zero-power waveform")
        clip_level = np.sqrt(power / 2.0) * 10 ** (fp.clipping_ratio_db / 20.0)
    i = _quantize_rail(waveform.real, clip_level, fp.quantizer_bits)
    q = _quantize_rail(waveform.imag, clip_level, fp.quantizer_bits)
    return i + 1j * q


def estimate_channel(rx: np.ndarray, pilots: np.ndarray) -> np.ndarray:
    """Least-squares one-tap estimate per subcarrier, averaged over pilot slots."""
    if pilots.ndim != 2 or pilots.shape[1] < 1:
        raise ModemError("channel estimation needs at least one pilot slot")
    n_pilot = pilots.shape[1]
    return np.mean(rx[:, :n_pilot] / pilots, axis=1)


def linear_equalize(rx: np.ndarray, h: np.ndarray) -> np.ndarray:
    dead = np.flatnonzero(np.abs(h) < 1e-12)
    if dead.size:
        raise DeadSubcarrierError(int(dead[0]))
    return rx / h[:, None]
