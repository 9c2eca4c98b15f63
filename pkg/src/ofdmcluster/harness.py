"""End-to-end trials, launch-power and DBSCAN-parameter sweeps, CSV exports."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import fiber, metrics, modem
from .clustering import DensityIndex, cluster_equalize
from .config import ConfigError, EqualizerKind, LinkConfig, rng_stream
from .metrics import TrialResult

log = logging.getLogger(__name__)

WORKERS_ENV = "OFDMCLUSTER_WORKERS"
DBSCAN_KINDS = (EqualizerKind.DBSCAN_CONVENTIONAL, EqualizerKind.DBSCAN_MODIFIED)

RESULT_COLUMNS = [
    "lop_dbm", "equalizer", "epsilon", "min_points", "n_bits", "n_errors",
    "ber", "q_db", "n_clusters_mode", "seed", "elapsed_s", "error",
]
SURFACE_COLUMNS = ["epsilon", "min_points", "n_bits", "n_errors", "ber", "q_db", "modal_clusters"]
CONSTELLATION_COLUMNS = ["subcarrier_index", "time_index", "re", "im", "cluster_label"]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class ReceivedBlock:
    """Transmitted payload and the receiver grid after one-tap equalization."""

    bits: np.ndarray
    equalized: np.ndarray
    config: LinkConfig
    seed: int
    elapsed: float = 0.0


def simulate_link(config: LinkConfig, seed: int | None = None, ase: bool = True) -> ReceivedBlock:
    """Run the chain up to and including linear equalization."""
    seed = config.rng_seed if seed is None else seed
    ofdm = config.ofdm
    start = time.perf_counter()
    with _stage("bits"):
        bits = modem.generate_bits(ofdm, rng_stream(seed, "bit-source"))
    with _stage("encode"):
        tx = modem.dqpsk_encode(bits, ofdm)
    with _stage("modulate"):
        wave = modem.ofdm_modulate(tx, ofdm)
    with _stage("dac"):
        wave = modem.frontend_quantize(wave, config.frontend)
    with _stage("fiber"):
        wave = fiber.propagate_link(
            wave, config.fiber, config.amplifier, config.launch_power_dbm,
            config.ssfm_step_km, ofdm.sample_rate, seed if ase else None,
        )
    with _stage("adc"):
        wave = modem.frontend_quantize(wave, config.frontend)
    with _stage("demodulate"):
        # open the FFT window mid-prefix: dispersion spreads both ways in time
        rx = modem.ofdm_demodulate(wave, ofdm, timing_advance=ofdm.cp_length // 2)
    pilots = modem.pilot_symbols(ofdm)
    with _stage("channel-estimation"):
        h = modem.estimate_channel(rx, pilots)
    with _stage("linear-equalization"):
        equalized = modem.linear_equalize(rx, h)
    return ReceivedBlock(bits, equalized, config, seed, time.perf_counter() - start)


@dataclass
class Decision:
    decided: np.ndarray
    labels: np.ndarray | None
    cluster_counts: list[int] = field(default_factory=list)


def equalize(block: ReceivedBlock, eq=None, indexes: dict[int, DensityIndex] | None = None) -> Decision:
    """Apply the (clustering) equalizer; pilot slots become the known pilots."""
    eq = block.config.equalizer if eq is None else eq
    ofdm = block.config.ofdm
    if eq.kind is EqualizerKind.LINEAR:
        decided, labels, counts = block.equalized.copy(), None, []
    else:
        with _stage("clustering"):
            out = cluster_equalize(block.equalized, ofdm.n_pilot_symbols, eq, indexes)
        decided, labels, counts = out.decided, out.labels, out.cluster_counts
    decided[:, : ofdm.n_pilot_symbols] = modem.pilot_symbols(ofdm)
    return Decision(decided, labels, counts)


def score(block: ReceivedBlock, decision: Decision, elapsed: float = 0.0) -> TrialResult:
    with _stage("decode"):
        rx_bits = modem.dqpsk_decode(decision.decided, block.config.ofdm)
    with _stage("metrics"):
        n_errors, ber = metrics.count_ber(block.bits, rx_bits)
        q = metrics.q_factor_db(ber) if ber < 0.5 else -math.inf
    return TrialResult(
        ber=ber, q_factor_db=q, n_bits=int(block.bits.size), n_errors=n_errors,
        cluster_count_histogram=metrics.count_histogram(decision.cluster_counts),
        elapsed=elapsed,
    )


def run_trial(config: LinkConfig, seed: int | None = None, ase: bool = True) -> TrialResult:
    """Bits to Q-factor for one OFDM block."""
    start = time.perf_counter()
    block = simulate_link(config, seed, ase)
    decision = equalize(block)
    return score(block, decision, time.perf_counter() - start)


# --------------------------------------------------------------------------- sweeps


def _frange(start: float, stop: float, step: float) -> list[float]:
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


@dataclass(frozen=True)
class SweepSpec:
    lop_list: tuple[float, ...] = tuple(_frange(-20.0, 8.0, 2.0))
    epsilon_grid: tuple[float, ...] = tuple(_frange(0.02, 0.20, 0.01))
    min_points_grid: tuple[int, ...] = tuple(range(10, 151, 10))
    equalizers: tuple[EqualizerKind, ...] = tuple(EqualizerKind)
    n_seeds: int = 5

    def __post_init__(self) -> None:
        for name in ("lop_list", "epsilon_grid", "min_points_grid", "equalizers"):
            if not getattr(self, name):
                raise ConfigError(f"{name}: must not be empty", name)
        if self.n_seeds < 1:
            raise ConfigError("n_seeds: must be >= 1", "n_seeds")

    def seeds(self, base_seed: int) -> list[int]:
        return [base_seed + i for i in range(self.n_seeds)]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SweepSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown sweep key(s) {', '.join(unknown)}", unknown[0])
        kwargs: dict[str, Any] = {}
        try:
            for key, value in data.items():
                if key == "equalizers":
                    kwargs[key] = tuple(EqualizerKind(v) for v in value)
                elif key == "min_points_grid":
                    kwargs[key] = tuple(int(v) for v in value)
                elif key == "n_seeds":
                    kwargs[key] = int(value)
                else:
                    kwargs[key] = tuple(float(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep spec: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> SweepSpec:
        text = Path(path).read_text()
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)


@dataclass
class SweepRow:
    lop_dbm: float
    equalizer: str
    epsilon: float | None
    min_points: int | None
    seed: int
    result: TrialResult | None = None
    error: str = ""

    def sort_key(self) -> tuple:
        return (self.lop_dbm, self.equalizer, self.epsilon or 0.0, self.min_points or 0, self.seed)

    def as_csv(self) -> dict[str, Any]:
        r = self.result
        return {
            "lop_dbm": self.lop_dbm,
            "equalizer": self.equalizer,
            "epsilon": "" if self.epsilon is None else self.epsilon,
            "min_points": "" if self.min_points is None else self.min_points,
            "n_bits": r.n_bits if r else "",
            "n_errors": r.n_errors if r else "",
            "ber": repr(r.ber) if r else "",
            "q_db": _fmt_q(r.q_factor_db) if r else "",
            "n_clusters_mode": "" if r is None or r.modal_cluster_count is None else r.modal_cluster_count,
            "seed": self.seed,
            "elapsed_s": f"{r.elapsed:.3f}" if r else "",
            "error": self.error,
        }


@dataclass
class SweepResult:
    rows: list[SweepRow]
    config_hash: str
    seeds: list[int]

    def summary(self) -> list[dict[str, Any]]:
        """Per-point aggregate over seeds: BER pooled first, then converted to Q."""
        groups: dict[tuple, list[SweepRow]] = {}
        for row in self.rows:
            groups.setdefault((row.lop_dbm, row.equalizer, row.epsilon, row.min_points), []).append(row)
        out = []
        for (lop, eqn, eps, mp), rows in sorted(groups.items(), key=lambda kv: _group_key(kv[0])):
            ok = [r.result for r in rows if r.result is not None]
            n_bits = sum(r.n_bits for r in ok)
            n_errors = sum(r.n_errors for r in ok)
            hist: dict[int, int] = {}
            for r in ok:
                for count, freq in r.cluster_count_histogram.items():
                    hist[count] = hist.get(count, 0) + freq
            ber = n_errors / n_bits if n_bits else math.nan
            out.append({
                "lop_dbm": lop, "equalizer": eqn, "epsilon": eps, "min_points": mp,
                "n_bits": n_bits, "n_errors": n_errors, "ber": ber,
                "q_db": metrics.pooled_q_db(n_errors, n_bits) if n_bits and ber < 0.5 else -math.inf,
                "modal_clusters": metrics.modal_count(hist),
                "n_failed": len(rows) - len(ok),
            })
        return out


def _group_key(key: tuple) -> tuple:
    lop, eqn, eps, mp = key
    return (lop, eqn, eps or 0.0, mp or 0)


def _fmt_q(q: float) -> str:
    if math.isinf(q):
        return "inf" if q > 0 else "-inf"
    return f"{q:.6f}"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn, jobs: list, workers: int | None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _lop_cell(config: LinkConfig, seed: int, kinds: Sequence[EqualizerKind]) -> list[SweepRow]:
    eq = config.equalizer
    rows = []
    try:
        block = simulate_link(config, seed)
    except StageError as exc:
        return [SweepRow(config.launch_power_dbm, k.value, None, None, seed, error=str(exc)) for k in kinds]
    for kind in kinds:
        is_dbscan = kind in DBSCAN_KINDS
        row = SweepRow(
            config.launch_power_dbm, kind.value,
            eq.epsilon if is_dbscan else None, eq.min_points if is_dbscan else None, seed,
        )
        try:
            start = time.perf_counter()
            decision = equalize(block, dataclasses.replace(eq, kind=kind))
            row.result = score(block, decision, block.elapsed + time.perf_counter() - start)
        except StageError as exc:
            row.error = str(exc)
        rows.append(row)
    return rows


def sweep_lop(spec: SweepSpec, base: LinkConfig, workers: int | None = None) -> SweepResult:
    """Launch powers x equalizers x seeds; each (LOP, seed) link is simulated once."""
    seeds = spec.seeds(base.rng_seed)
    jobs = [(base.replace(launch_power_dbm=lop), s, spec.equalizers) for lop in spec.lop_list for s in seeds]
    rows = [row for cell in _map(_lop_cell, jobs, workers) for row in cell]
    rows.sort(key=SweepRow.sort_key)
    return SweepResult(rows, base.digest(), seeds)


def _dbscan_cell(
    config: LinkConfig, seed: int, kinds: Sequence[EqualizerKind],
    eps_grid: Sequence[float], mp_grid: Sequence[int],
) -> list[SweepRow]:
    lop = config.launch_power_dbm
    try:
        block = simulate_link(config, seed)
    except StageError as exc:
        return [SweepRow(lop, k.value, e, m, seed, error=str(exc)) for k in kinds for e in eps_grid for m in mp_grid]
    indexes: dict[int, DensityIndex] = {}
    rows = []
    for kind in kinds:
        for eps in eps_grid:
            for mp in mp_grid:
                row = SweepRow(lop, kind.value, eps, mp, seed)
                eq = dataclasses.replace(config.equalizer, kind=kind, epsilon=eps, min_points=mp)
                try:
                    start = time.perf_counter()
                    decision = equalize(block, eq, indexes)
                    row.result = score(block, decision, time.perf_counter() - start)
                except StageError as exc:
                    row.error = str(exc)
                rows.append(row)
    return rows


def sweep_dbscan_params(spec: SweepSpec, base: LinkConfig, workers: int | None = None) -> SweepResult:
    """(epsilon, min_points) grid at the base launch power, for the DBSCAN equalizers.

    Uses the DBSCAN kinds listed in ``spec.equalizers``, or the base config's
    kind when none are listed.
    """
    kinds = [k for k in spec.equalizers if k in DBSCAN_KINDS]
    if not kinds:
        if base.equalizer.kind not in DBSCAN_KINDS:
            raise ConfigError("sweep-dbscan needs a DBSCAN equalizer kind", "equalizer.kind")
        kinds = [base.equalizer.kind]
    seeds = spec.seeds(base.rng_seed)
    jobs = [(base, s, kinds, spec.epsilon_grid, spec.min_points_grid) for s in seeds]
    rows = [row for cell in _map(_dbscan_cell, jobs, workers) for row in cell]
    rows.sort(key=SweepRow.sort_key)
    return SweepResult(rows, base.digest(), seeds)


# --------------------------------------------------------------------------- CSV output


def write_results_csv(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow(row.as_csv())


def write_surface_csv(result: SweepResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["equalizer", *SURFACE_COLUMNS])
        writer.writeheader()
        for s in result.summary():
            writer.writerow({
                "equalizer": s["equalizer"], "epsilon": s["epsilon"], "min_points": s["min_points"],
                "n_bits": s["n_bits"], "n_errors": s["n_errors"], "ber": repr(s["ber"]),
                "q_db": _fmt_q(s["q_db"]),
                "modal_clusters": "" if s["modal_clusters"] is None else s["modal_clusters"],
            })


def write_constellation_csv(path: str | Path, grid: np.ndarray, labels: np.ndarray | None) -> None:
    n_sc, n_sym = grid.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CONSTELLATION_COLUMNS)
        for k in range(n_sc):
            for t in range(n_sym):
                z = grid[k, t]
                label = "" if labels is None else int(labels[k, t])
                writer.writerow([k, t, repr(float(z.real)), repr(float(z.imag)), label])


def read_constellation_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_constellations(
    config: LinkConfig,
    seed: int | None,
    stages: Sequence[str],
    out_dir: str | Path,
    ase: bool = True,
) -> dict[str, Path]:
    """Write one constellation CSV per stage: ``linear`` and/or ``clustered``."""
    bad = sorted(set(stages) - {"linear", "clustered"})
    if bad:
        raise ValueError(f"unknown stage(s) {bad}; expected linear or clustered")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    block = simulate_link(config, seed, ase)
    decision = equalize(block)
    written = {}
    tag = f"{config.equalizer.kind.value}_lop{config.launch_power_dbm:g}_seed{block.seed}"
    for stage in stages:
        grid = block.equalized if stage == "linear" else decision.decided
        path = out_dir / f"constellation_{stage}_{tag}.csv"
        write_constellation_csv(path, grid, decision.labels)
        written[stage] = path
    return written
