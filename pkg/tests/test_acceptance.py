"""Acceptance gate: each test prints and records one pass/fail line.

The full-size link (128 subcarriers, 400 symbols, 5 x 100 km) is simulated
once per (launch power, seed) and shared between criteria.
"""
import dataclasses
import functools
import math

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import blob_cloud, partition, qpsk_cloud, textbook_dbscan

from ofdmcluster import clustering as cl
from ofdmcluster import fiber, harness, metrics, modem
from ofdmcluster.config import (
    AmplifierParams, EqualizerKind, FiberParams, LinkConfig, OfdmParams, rng_stream,
)

pytestmark = pytest.mark.slow

SEEDS = list(range(5))
BASE = LinkConfig().validate()
COARSE_EPS = (0.04, 0.06, 0.08, 0.1, 0.12, 0.16, 0.2)
COARSE_MP = (10, 30, 60, 90, 150)
CONV, MOD, LIN = EqualizerKind.DBSCAN_CONVENTIONAL, EqualizerKind.DBSCAN_MODIFIED, EqualizerKind.LINEAR


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


@functools.lru_cache(maxsize=None)
def block(lop: float, seed: int) -> harness.ReceivedBlock:
    return harness.simulate_link(BASE.replace(launch_power_dbm=lop), seed)


@functools.lru_cache(maxsize=None)
def _indexes(lop: float, seed: int) -> dict:
    return {}


@functools.lru_cache(maxsize=None)
def errors(lop: float, seed: int, kind: EqualizerKind, eps: float = 0.09, mp: int = 90) -> tuple[int, int, tuple]:
    """(n_errors, n_bits, per-subcarrier cluster counts) for one cached block."""
    b = block(lop, seed)
    eq = dataclasses.replace(BASE.equalizer, kind=kind, epsilon=eps, min_points=mp)
    d = harness.equalize(b, eq, _indexes(lop, seed) if kind in harness.DBSCAN_KINDS else None)
    r = harness.score(b, d)
    return r.n_errors, r.n_bits, tuple(d.cluster_counts)


def pooled(lop, kind, seeds=SEEDS, eps=0.09, mp=90):
    """Seed-pooled (errors, bits, modal cluster count)."""
    runs = [errors(lop, s, kind, eps, mp) for s in seeds]
    counts = [c for r in runs for c in r[2]]
    return sum(r[0] for r in runs), sum(r[1] for r in runs), metrics.modal_count(metrics.count_histogram(counts))


def q_of(n_errors: int, n_bits: int) -> float:
    return -math.inf if n_errors / n_bits >= 0.5 else metrics.pooled_q_db(n_errors, n_bits)


def tune(lop: float, kind: EqualizerKind) -> tuple[float, float, int, int]:
    """Best (q, eps, mp, errors) over the coarse grid, ties to the lowest eps then min_points."""
    best = None
    for eps in COARSE_EPS:
        for mp in COARSE_MP:
            n_err, n_bits, _ = pooled(lop, kind, eps=eps, mp=mp)
            if best is None or n_err < best[3]:
                best = (q_of(n_err, n_bits), eps, mp, n_err)
    return best


# --------------------------------------------------------------------------- 1


def test_criterion_1_q_formula():
    q = metrics.q_factor_db(1e-3)
    bers = np.geomspace(1e-6, 0.4, 2000)
    resid = max(abs(metrics.ber_from_q_db(metrics.q_factor_db(b)) - b) / b for b in bers)
    ok = abs(q - 9.80) <= 0.01 and resid < 1e-9
    record(1, ok, f"Q(1e-3) = {q:.4f} dB, max round-trip residual {resid:.1e}")
    assert ok


# --------------------------------------------------------------------------- 2


def _reaches(points, labels, core, i, cluster, eps):
    members = np.flatnonzero((labels == cluster) & core)
    return bool(np.any(np.hypot(*(points[members] - points[i]).T) <= eps))


def test_criterion_2_dbscan_oracle():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        pts = blob_cloud(rng, 200, int(rng.integers(10, 80)))
        eps, mp = float(rng.uniform(0.05, 0.3)), int(rng.integers(2, 15))
        ref, ref_core = textbook_dbscan(pts, eps, mp)
        got = cl.dbscan(pts, eps, mp)
        core = got.roles == cl.PointRole.CORE
        same = (
            np.array_equal(core, ref_core)
            and np.array_equal(got.labels == cl.NOISE, ref == -1)
            and partition(got.labels, core) == partition(ref, ref_core)
        )
        # a border point may sit in either cluster it is density-reachable from
        for i in np.flatnonzero(~core & (got.labels >= 0)):
            same &= _reaches(pts, got.labels, core, i, got.labels[i], eps)
            same &= _reaches(pts, ref, ref_core, i, ref[i], eps)
        mismatches += not same
    record(2, mismatches == 0, f"{100 - mismatches}/100 point sets match the brute-force scan")
    assert mismatches == 0


# --------------------------------------------------------------------------- 3


def _rms_width(t, power):
    p = power / power.sum()
    return math.sqrt(np.sum((t - np.sum(t * p)) ** 2 * p))


def test_criterion_3_split_step():
    # (a) Gaussian broadening at two dispersion lengths
    f = FiberParams(gamma=0.0, loss_db_per_km=0.0, dispersion_slope=0.0)
    beta2 = abs(fiber.fiber_coefficients(f).beta2)
    t = np.arange(4096) - 2048.0
    t0 = 20.0
    z = 2 * t0**2 / beta2
    a0 = np.exp(-(t**2) / (2 * t0**2)).astype(complex)
    out = fiber.propagate_span(fiber.PropagationState(a0), f, 0.1, 1e12, length_km=z).field
    ratio = _rms_width(t, np.abs(out) ** 2) / _rms_width(t, np.abs(a0) ** 2)
    err_a = abs(ratio / math.sqrt(1 + (z * beta2 / t0**2) ** 2) - 1)

    # (b) CW self-phase rotation over 100 km
    f = FiberParams(dispersion_D=0.0, dispersion_slope=0.0, loss_db_per_km=0.0)
    cw = np.full(256, math.sqrt(2e-3), complex)
    out = fiber.propagate_span(fiber.PropagationState(cw), f, 0.1, 12.5e9, length_km=100.0).field
    err_b = float(np.max(np.abs(np.angle(out / cw) - f.gamma * 2e-3 * 100.0)))

    # (c) lossless, dispersion-only energy over 500 km
    f = FiberParams(gamma=0.0, loss_db_per_km=0.0)
    w = np.random.default_rng(3).standard_normal(4096) * (1 + 0j)
    out = fiber.propagate_link(w, f, AmplifierParams(gain_db=0.0), 0.0, 0.1, 12.5e9, None)
    err_c = abs(np.sum(np.abs(out) ** 2) / np.sum(np.abs(fiber.set_launch_power(w, 0.0)) ** 2) - 1)

    # (d) step halving on the full link at 6 dBm
    o = BASE.ofdm
    wave = modem.ofdm_modulate(modem.dqpsk_encode(modem.generate_bits(o, rng_stream(0, "bit-source")), o), o)
    coarse = fiber.propagate_link(wave, BASE.fiber, BASE.amplifier, 6.0, 0.1, o.sample_rate, None)
    fine = fiber.propagate_link(wave, BASE.fiber, BASE.amplifier, 6.0, 0.05, o.sample_rate, None)
    err_d = float(np.linalg.norm(coarse - fine) / np.linalg.norm(fine))

    ok = err_a < 0.01 and err_b < 1e-6 and err_c < 1e-6 and err_d < 1e-4
    record(3, ok, f"(a) {err_a:.1e} (b) {err_b:.1e} rad (c) {err_c:.1e} (d) {err_d:.1e}")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_4_linear_regime_error_free():
    clean = {lop: sum(errors(lop, s, LIN)[0] == 0 for s in SEEDS) for lop in (-5.0, -2.0, 0.0)}
    ok = all(v >= 4 for v in clean.values())
    record(4, ok, "error-free seeds " + ", ".join(f"{lop:g} dBm: {v}/5" for lop, v in clean.items()))
    assert ok


# --------------------------------------------------------------------------- 5


def test_criterion_5_nonlinear_gain():
    gains = {}
    for lop in (2.0, 4.0, 6.0):
        q_lin = q_of(*pooled(lop, LIN)[:2])
        q_mod, eps, mp, _ = tune(lop, MOD)
        gains[lop] = (q_mod - q_lin, q_lin, q_mod, eps, mp)
    best = max(gains, key=lambda k: gains[k][0])
    gain, q_lin, q_mod, eps, mp = gains[best]
    ok = gain >= 1.0
    record(5, ok, f"best gain {gain:.2f} dB at {best:g} dBm (Linear {q_lin:.2f}, modified {q_mod:.2f} "
                  f"at eps={eps:g}, min_points={mp}); " + ", ".join(f"{k:g}: {v[0]:+.2f}" for k, v in gains.items()))
    assert ok


# --------------------------------------------------------------------------- 6


def test_criterion_6_modified_vs_conventional():
    q_mod, e_m, p_m, _ = tune(6.0, MOD)
    q_conv, e_c, p_c, _ = tune(6.0, CONV)
    gap = q_mod - q_conv
    ok = gap >= 0.0
    record(6, ok, f"modified - conventional = {gap:+.2f} dB at 6 dBm (reference gap 0.36 dB); "
                  f"modified eps={e_m:g}/mp={p_m}, conventional eps={e_c:g}/mp={p_c}")
    assert ok


# --------------------------------------------------------------------------- 7


def test_criterion_7_tuning_surface():
    spec = harness.SweepSpec()
    seeds = SEEDS[:2]
    cells = {}
    for eps in spec.epsilon_grid:
        for mp in spec.min_points_grid:
            cells[(eps, mp)] = pooled(4.0, MOD, seeds, eps, mp)
    # ties go to the lowest epsilon, then the lowest min_points
    best_err = min(c[0] for c in cells.values())
    tied = sorted(k for k, c in cells.items() if c[0] == best_err)
    eps, mp = tied[0]
    modal = cells[(eps, mp)][2]
    wrong_edges = sorted(k for k, c in cells.items() if (k[0] <= 0.04 or k[0] >= 0.16) and c[2] == 4)
    ok = 0.06 <= eps <= 0.12 and modal == 4 and not wrong_edges
    record(7, ok, f"min-BER cell eps={eps:g}, min_points={mp} ({len(tied)} tied, {best_err} errors), "
                  f"modal clusters {modal}; {len(wrong_edges)} edge cells report 4 clusters")
    assert ok


# --------------------------------------------------------------------------- 8


SMALL_OFDM = OfdmParams(n_subcarriers=16, n_symbols_per_subcarrier=24, n_pilot_symbols=4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32), theta=st.floats(-np.pi, np.pi), kmeans_k=st.integers(1, 6),
       m=st.floats(1.2, 4.0), factor=st.floats(1e-3, 1e3))
def _properties(seed, theta, kmeans_k, m, factor):
    bits = modem.generate_bits(SMALL_OFDM, rng_stream(seed, "bit-source"))
    grid = modem.dqpsk_encode(bits, SMALL_OFDM)
    assert np.array_equal(modem.dqpsk_decode(grid * np.exp(1j * theta), SMALL_OFDM), bits)
    back = modem.ofdm_demodulate(modem.ofdm_modulate(grid, SMALL_OFDM), SMALL_OFDM)
    assert np.linalg.norm(back - grid) <= 1e-12 * np.linalg.norm(grid)

    pts, _ = qpsk_cloud(np.random.default_rng(seed), 120, 0.3)
    hist = np.array(cl.kmeans(pts, kmeans_k).inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * (1 + hist[:-1]))
    u = cl.fuzzy_cmeans(pts, kmeans_k, m=m, max_iter=50).memberships
    assert np.allclose(u.sum(axis=1), 1.0, atol=1e-9)

    z = pts[:, 0] + 1j * pts[:, 1]
    ref = cl.dbscan(cl.PointSet.from_symbols(z), 0.15, 5).labels
    assert np.array_equal(cl.dbscan(cl.PointSet.from_symbols(z * factor), 0.15, 5).labels, ref)


def test_criterion_8_properties():
    failure = ""
    try:
        _properties()
        small = LinkConfig(ofdm=SMALL_OFDM, fiber=FiberParams(span_length_km=20.0, n_spans=2), ssfm_step_km=1.0,
                           launch_power_dbm=6.0).validate()
        a, b = harness.run_trial(small, seed=9), harness.run_trial(small, seed=9)
        assert (a.n_errors, a.cluster_count_histogram) == (b.n_errors, b.cluster_count_histogram)
    except AssertionError as exc:
        failure = str(exc).splitlines()[0] if str(exc) else "property violated"
    record(8, not failure, failure or "modem, clustering and determinism properties hold")
    assert not failure
