"""Experiment configuration, physical constants and deterministic RNG streams."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

PLANCK = 6.62607015e-34  # J s
LIGHT_SPEED = 299_792_458.0  # m/s


class ConfigError(ValueError):
    """Raised for unparseable config files or violated parameter invariants."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


class EqualizerKind(str, enum.Enum):
    LINEAR = "Linear"
    DBSCAN_CONVENTIONAL = "DbscanConventional"
    DBSCAN_MODIFIED = "DbscanModified"
    KMEANS = "KMeans"
    FUZZY_CMEANS = "FuzzyCMeans"
    HIERARCHICAL = "Hierarchical"


class ClusterScope(str, enum.Enum):
    """Which symbols form one clustering population."""

    POOLED = "Pooled"  # all data symbols of the block
    SUBCARRIER = "Subcarrier"  # each subcarrier's data symbols separately


class NoiseMerge(str, enum.Enum):
    """Where modified DBSCAN puts the points its density stage left as noise."""

    NEAREST_DENSITY = "NearestDensity"  # adopt the density cluster nearest their K-means centroid
    KMEANS = "KMeans"  # keep their own K-means clusters


class Linkage(str, enum.Enum):
    AVERAGE = "Average"
    COMPLETE = "Complete"
    WARD = "Ward"


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {message}", field_name)


@dataclass(frozen=True)
class OfdmParams:
    n_subcarriers: int = 128
    n_symbols_per_subcarrier: int = 400
    cp_fraction: float = 0.10
    n_pilot_symbols: int = 4
    sample_rate: float = 12.5e9

    def validate(self) -> None:
        n = self.n_subcarriers
        _require(n >= 1 and (n & (n - 1)) == 0, "n_subcarriers", "must be a power of two")
        _require(0.0 <= self.cp_fraction < 1.0, "cp_fraction", "must lie in [0, 1)")
        _require(self.n_pilot_symbols >= 1, "n_pilot_symbols", "at least one pilot slot is needed")
        _require(
            self.n_pilot_symbols < self.n_symbols_per_subcarrier,
            "n_pilot_symbols",
            "must be smaller than n_symbols_per_subcarrier",
        )
        _require(self.sample_rate > 0, "sample_rate", "must be positive")

    @property
    def cp_length(self) -> int:
        """Cyclic prefix length in samples (rounded up)."""
        # round before ceil so 0.1 * 128 = 12.8000000001 does not become 14
        return int(math.ceil(round(self.cp_fraction * self.n_subcarriers, 9)))

    @property
    def n_data_symbols(self) -> int:
        return self.n_symbols_per_subcarrier - self.n_pilot_symbols

    @property
    def n_data_bits(self) -> int:
        return 2 * self.n_subcarriers * self.n_data_symbols

    @property
    def samples_per_symbol(self) -> int:
        return self.n_subcarriers + self.cp_length

    def raw_bit_rate(self) -> float:
        """Line rate in bit/s over all subcarriers, counting CP and pilot overhead."""
        symbol_rate = self.sample_rate / self.samples_per_symbol
        payload = self.n_data_symbols / self.n_symbols_per_subcarrier
        return 2.0 * self.n_subcarriers * symbol_rate * payload


@dataclass(frozen=True)
class FrontendParams:
    clipping_ratio_db: float = 13.0
    quantizer_bits: int = 10

    def validate(self) -> None:
        _require(self.quantizer_bits >= 1, "quantizer_bits", "must be >= 1")
        _require(self.clipping_ratio_db > 0, "clipping_ratio_db", "must be > 0")


@dataclass(frozen=True)
class FiberParams:
    gamma: float = 1.1  # 1/(W km)
    dispersion_D: float = 16.0  # ps/(nm km)
    dispersion_slope: float = 0.06  # ps/(nm^2 km)
    loss_db_per_km: float = 0.2
    pmd_coeff: float = 0.1  # ps/sqrt(km), stored only
    span_length_km: float = 100.0
    n_spans: int = 5
    center_wavelength_nm: float = 1550.0

    def validate(self) -> None:
        for name in ("gamma", "dispersion_D", "dispersion_slope", "loss_db_per_km",
                     "pmd_coeff", "span_length_km", "n_spans"):
            _require(getattr(self, name) >= 0, name, "must be >= 0")
        _require(self.center_wavelength_nm > 0, "center_wavelength_nm", "must be > 0")

    @property
    def span_loss_db(self) -> float:
        return self.loss_db_per_km * self.span_length_km

    @property
    def carrier_frequency(self) -> float:
        """Optical carrier frequency in Hz."""
        return LIGHT_SPEED / (self.center_wavelength_nm * 1e-9)


@dataclass(frozen=True)
class AmplifierParams:
    # None: gain tracks the span loss of the fiber it follows
    gain_db: float | None = None
    noise_figure_db: float = 5.5

    def validate(self) -> None:
        if self.gain_db is not None:
            _require(self.gain_db >= 0, "gain_db", "must be >= 0")
        if self.noise_figure_db < 3.0:
            warnings.warn(
                f"noise_figure_db={self.noise_figure_db} is below the 3 dB quantum limit; "
                "spontaneous-emission factor will be floored at 1",
                stacklevel=3,
            )

    def resolved_gain_db(self, fiber: FiberParams) -> float:
        return fiber.span_loss_db if self.gain_db is None else self.gain_db


@dataclass(frozen=True)
class EqualizerConfig:
    kind: EqualizerKind = EqualizerKind.DBSCAN_MODIFIED
    epsilon: float = 0.09
    min_points: int = 90
    k_clusters: int = 4
    fcm_fuzzifier: float = 2.0
    fcm_tolerance: float = 1e-5
    linkage: Linkage = Linkage.AVERAGE
    max_iterations: int = 300
    scope: ClusterScope = ClusterScope.SUBCARRIER
    noise_merge: NoiseMerge = NoiseMerge.NEAREST_DENSITY

    def validate(self) -> None:
        _require(self.epsilon > 0, "epsilon", "must be > 0")
        _require(self.min_points >= 1, "min_points", "must be >= 1")
        _require(self.k_clusters >= 1, "k_clusters", "must be >= 1")
        _require(self.fcm_fuzzifier > 1, "fcm_fuzzifier", "must be > 1")
        _require(self.fcm_tolerance > 0, "fcm_tolerance", "must be > 0")
        _require(self.max_iterations >= 1, "max_iterations", "must be >= 1")


@dataclass(frozen=True)
class LinkConfig:
    ofdm: OfdmParams = field(default_factory=OfdmParams)
    frontend: FrontendParams = field(default_factory=FrontendParams)
    fiber: FiberParams = field(default_factory=FiberParams)
    amplifier: AmplifierParams = field(default_factory=AmplifierParams)
    equalizer: EqualizerConfig = field(default_factory=EqualizerConfig)
    launch_power_dbm: float = 0.0
    rng_seed: int = 0
    ssfm_step_km: float = 0.1

    def validate(self) -> LinkConfig:
        self.ofdm.validate()
        self.frontend.validate()
        self.fiber.validate()
        self.amplifier.validate()
        self.equalizer.validate()
        _require(0 <= self.rng_seed < 2**64, "rng_seed", "must be an unsigned 64-bit integer")
        _require(self.ssfm_step_km > 0, "ssfm_step_km", "must be > 0")
        _require(
            self.ssfm_step_km <= self.fiber.span_length_km or self.fiber.span_length_km == 0,
            "ssfm_step_km",
            "must not exceed span_length_km",
        )
        _require(math.isfinite(self.launch_power_dbm), "launch_power_dbm", "must be finite")
        return self

    def replace(self, **changes: Any) -> LinkConfig:
        """Copy with top-level or dotted (``"fiber.gamma"``) fields overridden."""
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {}
        for key, value in changes.items():
            if "." in key:
                section, name = key.split(".", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, values in nested.items():
            top[section] = dataclasses.replace(top.get(section, getattr(self, section)), **values)
        return dataclasses.replace(self, **top).validate()

    def to_dict(self) -> dict[str, Any]:
        def encode(obj: Any) -> Any:
            if isinstance(obj, enum.Enum):
                return obj.value
            if isinstance(obj, dict):
                return {k: encode(v) for k, v in obj.items()}
            return obj

        return encode(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def digest(self) -> str:
        """Short stable hash of the configuration, for sweep provenance."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "ofdm": OfdmParams,
    "frontend": FrontendParams,
    "fiber": FiberParams,
    "amplifier": AmplifierParams,
    "equalizer": EqualizerConfig,
}
_ENUM_FIELDS = {
    ("equalizer", "kind"): EqualizerKind,
    ("equalizer", "linkage"): Linkage,
    ("equalizer", "scope"): ClusterScope,
    ("equalizer", "noise_merge"): NoiseMerge,
}


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    enum_type = _ENUM_FIELDS.get((section, name))
    where = f"{section}.{name}" if section else name
    if enum_type is not None:
        try:
            return enum_type(value)
        except ValueError:
            allowed = ", ".join(m.value for m in enum_type)
            raise ConfigError(f"{where}: {value!r} is not one of {allowed}", where) from None
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}", where)
    if value is None:
        if section == "amplifier" and name == "gain_db":
            return None
        raise ConfigError(f"{where}: null is not allowed", where)
    if isinstance(default, int) or name == "rng_seed":
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}", where)
        return value
    if not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}", where)
    return float(value)


def _build_section(section: str, cls: type, data: Any) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object", section)
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}", f"{section}.{unknown[0]}")
    kwargs = {k: _coerce(section, k, v, getattr(defaults, k)) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> LinkConfig:
    """Build and validate a LinkConfig from a parsed JSON object; absent keys take defaults."""
    if not isinstance(data, dict):
        raise ConfigError("top level: expected a JSON object")
    defaults = LinkConfig()
    known = {f.name for f in dataclasses.fields(LinkConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}", unknown[0])
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        else:
            kwargs[key] = _coerce("", key, value, getattr(defaults, key))
    return LinkConfig(**kwargs).validate()


def parse_config(text: str, source: str = "<string>") -> LinkConfig:
    if not text.strip():
        return LinkConfig().validate()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(
            f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {context}\n    {' ' * (exc.colno - 1)}^"
        ) from None
    return config_from_dict(data)


def load_config(path: str | Path) -> LinkConfig:
    path = Path(path)
    return parse_config(path.read_text(), source=str(path))


def save_config(config: LinkConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_json() + "\n")


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


def rng_stream(seed: int, stream_id: str) -> np.random.Generator:
    """Independent PCG64 generator for one (seed, purpose) pair.

    Stream ids in use: ``"bit-source"`` and ``"ase-span-<n>"`` (1-based).
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(_label_key(stream_id),))
    return np.random.Generator(np.random.PCG64(seq))
