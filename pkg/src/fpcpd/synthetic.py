"""Synthetic data: low-rank CP tensors and vibration events with injected damage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .shm import HEALTHY, EventMatrix
from .tensor import DenseTensor3, FactorModel, reconstruct

__all__ = ["SyntheticSpec", "AnomalySpec", "ShmSpec", "generate_synthetic", "generate_shm_events", "mode_shapes"]


@dataclass(frozen=True)
class AnomalySpec:
    """Damage injected into ``count`` events at one sensor.

    ``magnitude`` is the amplitude of the damage component relative to the
    healthy signal RMS at that sensor (1.0 is 0 dB SNR).
    """

    label: str
    count: int
    sensor: int
    magnitude: float


@dataclass(frozen=True)
class SyntheticSpec:
    dims: tuple[int, int, int] = (30, 30, 30)
    true_rank: int = 5
    noise_std: float = 0.0
    seed: int = 0
    anomalies: tuple[AnomalySpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.true_rank < 1:
            raise ValueError("true_rank must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"bad dims {self.dims}")


def generate_synthetic(spec: SyntheticSpec) -> tuple[DenseTensor3, FactorModel]:
    """Rank-``true_rank`` tensor from uniform [0, 1) factors plus i.i.d. Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    truth = FactorModel.random(spec.dims, spec.true_rank, rng)
    X = np.array(reconstruct(truth).data)
    if spec.noise_std > 0:
        X = X + rng.normal(0.0, spec.noise_std, size=X.shape)
    return DenseTensor3(X), truth


DEFAULT_MODE_BINS = (9, 21, 34, 52)


@dataclass(frozen=True)
class ShmSpec:
    """Vibration-event generator settings.

    Healthy signals at sensor ``s`` are a sum of sinusoids on exact FFT bins
    ``mode_bins`` with mode-shape weights ``shape[m, s]``, per-event amplitude
    jitter and white noise. A damage event adds, at its sensor only, a copy of
    each mode shifted down by ``shift_bins`` with amplitude ``magnitude`` times
    the local modal amplitude (``magnitude = 1`` gives 0 dB SNR).
    """

    sensors: int = 12
    samples: int = 256
    sample_rate: float = 256.0
    n_healthy: int = 100
    mode_bins: tuple[int, ...] = DEFAULT_MODE_BINS
    shift_bins: int = 3
    jitter: float = 0.02
    noise_std: float = 0.05
    seed: int = 0
    anomalies: tuple[AnomalySpec, ...] = (
        AnomalySpec("mild", 40, 4, 1.0),
        AnomalySpec("severe", 20, 4, 3.0),
    )

    def __post_init__(self):
        if self.sensors < 2 or self.samples < 4 or self.n_healthy < 3:
            raise ValueError("need >= 2 sensors, >= 4 samples and >= 3 healthy events")
        if max(self.mode_bins) >= self.samples // 2 or min(self.mode_bins) - self.shift_bins < 1:
            raise ValueError("mode bins (and their shifted copies) must lie strictly inside (0, samples/2)")
        for a in self.anomalies:
            if not 0 <= a.sensor < self.sensors:
                raise ValueError(f"anomaly sensor {a.sensor} out of range")
            if a.magnitude < 0 or a.count < 0:
                raise ValueError("anomaly magnitude and count must be >= 0")


def mode_shapes(n_modes: int, sensors: int) -> np.ndarray:
    """Strictly positive, mutually distinct weights, shape ``(n_modes, sensors)``."""
    s = (np.arange(sensors) + 0.5) / sensors
    return np.stack([1.0 + 0.5 * np.sin((m + 1) * np.pi * s + 0.3 * m) for m in range(n_modes)])


def generate_shm_events(spec: ShmSpec):
    """Healthy events followed by each anomaly group, as an :class:`~fpcpd.shm.EventMatrix`."""
    rng = np.random.default_rng(spec.seed)
    L, fs = spec.samples, spec.sample_rate
    tgrid = np.arange(L) / fs
    bins = np.asarray(spec.mode_bins)
    M = bins.size
    shapes = mode_shapes(M, spec.sensors)
    groups = [(HEALTHY, spec.n_healthy, None, 0.0)] + [
        (a.label, a.count, a.sensor, a.magnitude) for a in spec.anomalies
    ]
    T = sum(g[1] for g in groups)
    signals = np.empty((spec.sensors, T, L))
    labels, damaged = [], []
    e = 0
    for label, count, sensor, mag in groups:
        for _ in range(count):
            amp = shapes * (1.0 + spec.jitter * rng.standard_normal((M, 1)))
            phase = rng.uniform(0, 2 * np.pi, size=(M, spec.sensors))
            carrier = np.sin(2 * np.pi * (bins * fs / L)[:, None, None] * tgrid + phase[..., None])
            x = np.einsum("ms,msl->sl", amp, carrier)
            if sensor is not None and mag > 0:
                dphase = rng.uniform(0, 2 * np.pi, size=M)
                shifted = np.sin(2 * np.pi * ((bins - spec.shift_bins) * fs / L)[:, None] * tgrid + dphase[:, None])
                x[sensor] += mag * amp[:, sensor] @ shifted
            x += spec.noise_std * rng.standard_normal(x.shape)
            signals[:, e, :] = x
            labels.append(label)
            damaged.append(sensor)
            e += 1
    ids = [f"e{t:04d}" for t in range(T)]
    return EventMatrix(signals, fs, ids, labels, damaged)
