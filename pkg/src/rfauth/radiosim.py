"""Synthetic bit-similar radio fleet and per-domain channel simulator.

Every device transmits the same baseband waveform; recordings differ only
through per-device hardware impairments (frozen at fleet creation, so a
device's fingerprint never changes across domains) and per-domain channel
conditions. Replaces physical testbeds for desk-scale verification.

The impairment chain order is fixed for reproducibility:
IQ imbalance -> DC offset -> cubic PA nonlinearity -> CFO rotation ->
phase-noise random walk -> multipath FIR -> additive white noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NonFiniteSample
from .iqdata import IQRecording, iq_filename, write_iq_file

# Default per-device impairment draw ranges. Chosen small enough that
# waveforms stay demodulation-plausible but large enough that a classifier
# separates 5 devices at >90% accuracy in a single domain.
DEFAULT_IMPAIRMENT_RANGES = {
    "iq_gain_imbalance": (0.90, 1.10),
    "iq_phase_skew": (-0.12, 0.12),
    "dc_offset_mag": (0.01, 0.05),
    "cfo": (-1e-3, 1e-3),
    "phase_noise_std": (0.0, 2e-3),
    "pa_cubic_coeff": (-0.12, -0.02),
}


@dataclass(frozen=True)
class DeviceImpairment:
    """Hardware fingerprint of one radio, frozen for its lifetime."""

    iq_gain_imbalance: float
    iq_phase_skew: float
    dc_offset: complex
    cfo: float
    phase_noise_std: float
    pa_cubic_coeff: float

    def __post_init__(self):
        fields = [
            self.iq_gain_imbalance,
            self.iq_phase_skew,
            abs(self.dc_offset),
            self.cfo,
            self.phase_noise_std,
            self.pa_cubic_coeff,
        ]
        if not all(math.isfinite(float(v)) for v in fields):
            raise ConfigError("impairment fields must be finite")
        if self.iq_gain_imbalance <= 0:
            raise ConfigError("iq_gain_imbalance must be > 0")

    @staticmethod
    def identity() -> "DeviceImpairment":
        """A perfectly clean radio (useful for channel-only tests)."""
        return DeviceImpairment(1.0, 0.0, 0j, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ChannelProfile:
    """Multipath + noise description of one domain (day/environment)."""

    domain_id: str
    tap_delays: tuple
    tap_gains: tuple
    snr_db: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "tap_delays", tuple(int(d) for d in self.tap_delays))
        object.__setattr__(self, "tap_gains", tuple(complex(g) for g in self.tap_gains))
        if len(self.tap_delays) < 1 or len(self.tap_delays) != len(self.tap_gains):
            raise ConfigError("channel needs at least one (delay, gain) tap pair")
        if any(d < 0 for d in self.tap_delays):
            raise ConfigError("tap delays must be non-negative sample counts")
        power = sum(abs(g) ** 2 for g in self.tap_gains)
        if not 0 < power <= 4:
            raise ConfigError(f"total tap power {power:.3f} outside (0, 4]")

    @staticmethod
    def identity(domain_id: str = "ideal", seed: int = 0) -> "ChannelProfile":
        return ChannelProfile(domain_id, (0,), (1 + 0j,), math.inf, seed)


def make_fleet(n_devices: int, seed: int, ranges: dict | None = None) -> list[DeviceImpairment]:
    """Draw n_devices pairwise-distinct impairment profiles, deterministic under seed."""
    if n_devices < 2:
        raise ConfigError("a fleet needs at least 2 devices")
    r = dict(DEFAULT_IMPAIRMENT_RANGES)
    if ranges:
        r.update(ranges)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    fleet = []
    for _ in range(n_devices):
        dc_mag = rng.uniform(*r["dc_offset_mag"])
        dc_phase = rng.uniform(0, 2 * np.pi)
        fleet.append(
            DeviceImpairment(
                iq_gain_imbalance=float(rng.uniform(*r["iq_gain_imbalance"])),
                iq_phase_skew=float(rng.uniform(*r["iq_phase_skew"])),
                dc_offset=complex(dc_mag * np.exp(1j * dc_phase)),
                cfo=float(rng.uniform(*r["cfo"])),
                phase_noise_std=float(rng.uniform(*r["phase_noise_std"])),
                pa_cubic_coeff=float(rng.uniform(*r["pa_cubic_coeff"])),
            )
        )
    return fleet


def make_channel(
    domain_id: str,
    seed: int,
    n_taps: int = 2,
    max_delay: int = 8,
    echo_to_main_db: float = -12.0,
    snr_db: float = 25.0,
) -> ChannelProfile:
    """Draw a multipath profile: unit-power main tap at delay 0 with a random
    phase, plus (n_taps - 1) echoes at distinct delays. Regenerating with the
    same seed reproduces identical taps.
    """
    if n_taps < 1:
        raise ConfigError("n_taps must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    delays = [0]
    gains = [np.exp(1j * rng.uniform(0, 2 * np.pi))]
    if n_taps > 1:
        if max_delay < n_taps - 1:
            raise ConfigError("max_delay too small for the echo count")
        echo_delays = rng.choice(np.arange(1, max_delay + 1), size=n_taps - 1, replace=False)
        echo_amp = 10 ** (echo_to_main_db / 20)
        for d in sorted(int(x) for x in echo_delays):
            delays.append(d)
            phase = rng.uniform(0, 2 * np.pi)
            gains.append(echo_amp * np.exp(1j * phase))
    gains = np.asarray(gains, dtype=np.complex128)
    gains /= np.sqrt(np.sum(np.abs(gains) ** 2))
    return ChannelProfile(domain_id, tuple(delays), tuple(gains), snr_db, seed)


def transmit(
    baseband,
    dev: DeviceImpairment,
    ch: ChannelProfile,
    device_id: int = 0,
    rng: np.random.Generator | None = None,
) -> IQRecording:
    """Push a baseband waveform through one device and one channel.

    Applies, in order: IQ imbalance (I rail scaled by g and rotated by the
    phase skew onto both rails), DC offset, cubic PA nonlinearity, CFO
    rotation exp(j*2*pi*cfo*n), per-sample phase-noise random walk, FIR
    multipath truncated to the input length, and white noise at snr_db.
    Output length equals input length. With rng omitted the draw is seeded
    from the channel seed, so repeated calls are identical.
    """
    x = np.asarray(baseband, dtype=np.complex128)
    if x.ndim != 1 or x.size == 0:
        raise ConfigError("baseband must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(x.real) & np.isfinite(x.imag)):
        raise NonFiniteSample("baseband contains NaN/Inf")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(ch.seed))
    n = x.size

    g, skew = dev.iq_gain_imbalance, dev.iq_phase_skew
    y = g * x.real * math.cos(skew) + 1j * (x.imag + g * x.real * math.sin(skew))
    y = y + dev.dc_offset
    y = y * (1.0 + dev.pa_cubic_coeff * np.abs(y) ** 2)
    if dev.cfo != 0.0:
        y = y * np.exp(2j * np.pi * dev.cfo * np.arange(n))
    if dev.phase_noise_std > 0.0:
        walk = np.cumsum(rng.normal(0.0, dev.phase_noise_std, n))
        y = y * np.exp(1j * walk)

    out = np.zeros(n, dtype=np.complex128)
    for delay, gain in zip(ch.tap_delays, ch.tap_gains):
        if delay < n:
            out[delay:] += gain * y[: n - delay]
    if np.isfinite(ch.snr_db):
        power = float(np.mean(np.abs(out) ** 2))
        sigma2 = power * 10 ** (-ch.snr_db / 10)
        noise = rng.normal(0.0, np.sqrt(sigma2 / 2), (2, n))
        out = out + noise[0] + 1j * noise[1]

    if not np.all(np.isfinite(out.real) & np.isfinite(out.imag)):
        raise NonFiniteSample("transmit produced non-finite samples (overflow)")
    return IQRecording(device_id=device_id, domain_id=ch.domain_id, samples=out.astype(np.complex64))


@dataclass(frozen=True)
class WaveformSpec:
    """Repeated pseudo-random QPSK-like block shared by every device."""

    n_symbols: int = 256
    oversample: int = 2
    seed: int = 424242
    amplitude: float = 1.0


def make_waveform(spec: WaveformSpec, n_samples: int) -> np.ndarray:
    """Build the shared baseband: a tiled, oversampled pseudo-random QPSK block."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    bits = rng.integers(0, 4, spec.n_symbols)
    constellation = np.exp(1j * (np.pi / 4 + np.pi / 2 * bits))
    block = np.repeat(constellation, spec.oversample) * spec.amplitude
    reps = int(np.ceil(n_samples / block.size))
    return np.tile(block, reps)[:n_samples]


def generate_dataset(
    fleet,
    channels,
    waveform_spec: WaveformSpec,
    samples_per_device: int,
    out_dir=None,
    seed: int = 0,
) -> dict:
    """Transmit the shared waveform for every (device, domain) pair.

    channels maps domain_id -> ChannelProfile; at least two distinct domains
    are required (the bit-similar premise needs a base and a shifted domain).
    Returns {(device_id, domain_id): IQRecording}; when out_dir is given the
    recordings are also written as ``<device_id>_<domain_id>.iq`` files.
    """
    channels = dict(channels)
    if len(channels) < 2:
        raise ConfigError("need at least 2 domains")
    profiles = list(channels.values())
    for i in range(len(profiles)):
        for j in range(i + 1, len(profiles)):
            a, b = profiles[i], profiles[j]
            if (a.tap_delays, a.tap_gains, a.snr_db) == (b.tap_delays, b.tap_gains, b.snr_db):
                raise ConfigError(
                    f"domains {a.domain_id!r} and {b.domain_id!r} have identical channels"
                )
    waveform = make_waveform(waveform_spec, samples_per_device)
    children = np.random.SeedSequence(seed).spawn(len(fleet) * len(channels))
    recordings = {}
    k = 0
    for device_id, dev in enumerate(fleet):
        for domain_id, ch in channels.items():
            rng = np.random.default_rng(children[k])
            k += 1
            rec = transmit(waveform, dev, ch, device_id=device_id, rng=rng)
            recordings[(device_id, domain_id)] = rec
            if out_dir is not None:
                write_iq_file(Path(out_dir) / iq_filename(device_id, domain_id), rec)
    return recordings
