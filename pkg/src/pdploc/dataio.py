"""Synthetic distributed-sensor delay-profile datasets and their file format.

A sample is the set of power delay profiles one device produces at every
wall-mounted sensor, plus the device's 2D position as the label. The
generator uses a deliberately simple multipath model: a line-of-sight tap
at the geometric delay, exponentially distributed excess delays with
exponentially decaying mean power, log-distance path loss with log-normal
shadowing, and a flat noise floor from the first arrival onward. It is a
stand-in for full ray tracing; its job is to give training runs geometry
that is actually learnable and tests a deterministic fixture.

Datasets persist in a little-endian binary format (see write_dataset) that
round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "C_LIGHT",
    "SensorLayout",
    "GeneratorConfig",
    "PdpMatrix",
    "default_layout",
    "random_layout",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "write_labels_csv",
    "powers_array",
    "labels_array",
]

C_LIGHT = 299_792_458.0  # m/s

_MAGIC = b"PDPD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIQd")  # magic, version, n_sensors, n_time, n_samples, sample_period


@dataclass
class SensorLayout:
    """Sensor coordinates inside a rectangular hall footprint."""

    positions: np.ndarray  # [n_sensors, 3] meters
    hall_length: float = 120.0
    hall_width: float = 60.0
    sensor_height: float = 8.0
    device_height: float = 1.5

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be [n, 3], got {self.positions.shape}")
        if len(self.positions) < 1:
            raise ValueError("need at least one sensor")
        if self.sensor_height <= 0 or self.device_height <= 0:
            raise ValueError("heights must be positive")
        x, y = self.positions[:, 0], self.positions[:, 1]
        inside = (x >= 0) & (x <= self.hall_length) & (y >= 0) & (y <= self.hall_width)
        if not inside.all():
            raise ValueError("all sensors must sit inside the hall footprint")

    @property
    def n_sensors(self) -> int:
        return len(self.positions)


def default_layout(rows: int = 3, cols: int = 6, spacing: float = 20.0, margin: float = 10.0) -> SensorLayout:
    """Regular rows x cols ceiling grid; defaults give 18 sensors in 120x60 m."""
    hall_length = 2 * margin + (cols - 1) * spacing
    hall_width = 2 * margin + (rows - 1) * spacing
    height = 8.0
    pos = [
        (margin + c * spacing, margin + r * spacing, height)
        for r in range(rows)
        for c in range(cols)
    ]
    return SensorLayout(
        positions=np.array(pos),
        hall_length=hall_length,
        hall_width=hall_width,
        sensor_height=height,
    )


def random_layout(
    n_sensors: int = 18,
    rng_seed: int = 0,
    hall_length: float = 120.0,
    hall_width: float = 60.0,
    margin: float = 5.0,
) -> SensorLayout:
    """Seeded irregular ceiling layout: positions uniform in the hall minus
    a wall margin.

    A perfectly regular grid is centrally symmetric, so the multiset of
    sensor-device distances is identical for a position and its image
    across the hall center — a sensor-permutation-invariant model cannot
    tell those two apart. Irregular layouts (like real deployments) have
    no such symmetry, which makes localization from unordered sensor
    profiles well posed.
    """
    if n_sensors < 1:
        raise ValueError(f"need at least one sensor, got {n_sensors}")
    if not 0 <= 2 * margin < min(hall_length, hall_width):
        raise ValueError(f"margin {margin} leaves no room in the hall")
    rng = np.random.default_rng(rng_seed)
    height = 8.0
    pos = np.column_stack(
        [
            rng.uniform(margin, hall_length - margin, n_sensors),
            rng.uniform(margin, hall_width - margin, n_sensors),
            np.full(n_sensors, height),
        ]
    )
    return SensorLayout(
        positions=pos,
        hall_length=hall_length,
        hall_width=hall_width,
        sensor_height=height,
    )


@dataclass
class GeneratorConfig:
    tap_count: int = 12
    excess_delay_mean: float = 120e-9  # seconds
    decay_constant: float = 120e-9  # seconds; mean tap power ~ exp(-excess/decay)
    pathloss_exponent: float = 3.0
    shadowing_sigma: float = 7.0  # dB
    noise_floor: float = 1e-12  # linear power per bin
    sample_rate: float = 122.88e6  # Hz
    n_time_samples: int = 128
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.tap_count < 1:
            raise ValueError("tap_count must be >= 1")
        for name in ("excess_delay_mean", "decay_constant", "sample_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.shadowing_sigma < 0 or self.noise_floor < 0 or self.pathloss_exponent < 0:
            raise ValueError("shadowing_sigma, noise_floor, pathloss_exponent must be >= 0")
        if self.n_time_samples < 1:
            raise ValueError("n_time_samples must be >= 1")


@dataclass
class PdpMatrix:
    """One sample: linear power per (sensor, delay bin), plus the 2D label."""

    powers: np.ndarray  # [n_sensors, n_time_samples] float32, linear power >= 0
    label: np.ndarray  # [2] float32, meters
    sample_period: float  # seconds per delay bin

    def __post_init__(self) -> None:
        self.powers = np.asarray(self.powers, dtype=np.float32)
        self.label = np.asarray(self.label, dtype=np.float32).reshape(2)
        if self.powers.ndim != 2:
            raise ValueError(f"powers must be 2D, got shape {self.powers.shape}")
        if self.powers.size and float(self.powers.min()) < 0:
            raise ValueError("powers must be non-negative")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be > 0")

    @property
    def n_sensors(self) -> int:
        return self.powers.shape[0]

    @property
    def n_time_samples(self) -> int:
        return self.powers.shape[1]


def generate_dataset(layout: SensorLayout, gen: GeneratorConfig, n_samples: int) -> list[PdpMatrix]:
    """Draw n_samples uniformly placed devices and synthesize their PDPs.

    Determinism: sample i uses the RNG stream spawned from
    (gen.rng_seed, i), so regeneration is bit-identical and independent of
    batching or parallel evaluation order. Within a sensor the draw order
    is fixed: shadowing, then excess delays, then tap powers.
    """
    if n_samples < 1:
        raise ValueError("empty dataset: n_samples must be >= 1")
    sample_period = 1.0 / gen.sample_rate
    n_ts = gen.n_time_samples
    streams = np.random.SeedSequence(gen.rng_seed).spawn(n_samples)
    sensors = layout.positions  # [S, 3]
    out: list[PdpMatrix] = []
    for i in range(n_samples):
        rng = np.random.default_rng(streams[i])
        # Geometry runs on the float32-rounded coordinates so the stored
        # label reproduces every distance (and hence every bin index) exactly.
        device = np.array(
            [
                rng.uniform(0.0, layout.hall_length),
                rng.uniform(0.0, layout.hall_width),
                layout.device_height,
            ]
        ).astype(np.float32).astype(np.float64)
        powers = np.zeros((layout.n_sensors, n_ts), dtype=np.float64)
        for s in range(layout.n_sensors):
            dist = float(np.linalg.norm(sensors[s] - device))
            los_bin = int(np.floor(dist / C_LIGHT * gen.sample_rate))
            shadow_db = rng.normal(0.0, gen.shadowing_sigma)
            gain = dist ** (-gen.pathloss_exponent) * 10.0 ** (shadow_db / 10.0)
            excess = np.zeros(gen.tap_count)
            if gen.tap_count > 1:
                excess[1:] = rng.exponential(gen.excess_delay_mean, gen.tap_count - 1)
            mean_power = np.exp(-excess / gen.decay_constant)
            tap_power = rng.exponential(mean_power) * gain
            bins = np.floor(dist / C_LIGHT * gen.sample_rate + excess * gen.sample_rate).astype(int)
            keep = bins < n_ts  # late echoes beyond the window are discarded
            np.add.at(powers[s], bins[keep], tap_power[keep])
            if los_bin < n_ts and gen.noise_floor > 0:
                # Floor starts at the first arrival so bins before it stay
                # exactly zero (causality).
                powers[s, los_bin:] += gen.noise_floor
        out.append(
            PdpMatrix(
                powers=powers.astype(np.float32),
                label=np.array([device[0], device[1]], dtype=np.float32),
                sample_period=sample_period,
            )
        )
    return out


def write_dataset(path: str | Path, samples: list[PdpMatrix]) -> None:
    """Persist samples: 32-byte header, then per sample the float32 power
    matrix followed by the float32 (x, y) label, all little-endian."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    n_s, n_ts = samples[0].powers.shape
    period = samples[0].sample_period
    for k, smp in enumerate(samples):
        if smp.powers.shape != (n_s, n_ts):
            raise ValueError(f"sample {k} shape {smp.powers.shape} != {(n_s, n_ts)}")
        if smp.sample_period != period:
            raise ValueError(f"sample {k} has a different sample_period")
    path = Path(path)
    with path.open("wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, n_s, n_ts, len(samples), period))
        for smp in samples:
            f.write(np.ascontiguousarray(smp.powers, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(smp.label, dtype="<f4").tobytes())


def read_dataset(path: str | Path) -> list[PdpMatrix]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n_s, n_ts, n_samples, period = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, not a PDP dataset")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    per_sample = (n_s * n_ts + 2) * 4
    expected = _HEADER.size + n_samples * per_sample
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or padded)")
    out: list[PdpMatrix] = []
    offset = _HEADER.size
    for _ in range(n_samples):
        block = np.frombuffer(raw, dtype="<f4", count=n_s * n_ts + 2, offset=offset)
        offset += per_sample
        out.append(
            PdpMatrix(
                powers=block[: n_s * n_ts].reshape(n_s, n_ts).copy(),
                label=block[n_s * n_ts :].copy(),
                sample_period=period,
            )
        )
    return out


def write_labels_csv(path: str | Path, samples: list[PdpMatrix]) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "x_m", "y_m"])
        for i, smp in enumerate(samples):
            writer.writerow([i, repr(float(smp.label[0])), repr(float(smp.label[1]))])


def powers_array(samples: list[PdpMatrix]) -> np.ndarray:
    """Stack sample powers into [n, n_sensors, n_time_samples] float32."""
    return np.stack([s.powers for s in samples])


def labels_array(samples: list[PdpMatrix]) -> np.ndarray:
    """Stack sample labels into [n, 2] float32."""
    return np.stack([s.label for s in samples])
