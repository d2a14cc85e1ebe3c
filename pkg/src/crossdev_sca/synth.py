"""Synthetic AES-128 first-round leakage traces with inter-device variation.

Each sample of a trace is

    gain * (background[j] + leak_strength * leak(s) * [j is a leak position])
        + offset + N(0, noise_sigma)

where ``s = SBox(plaintext ^ key)``.  The default leak function is the
Hamming weight of ``s``.  Profiles may instead carry a per-position bit
weight matrix, in which case position ``i`` leaks ``sum_b w[i, b] * bit_b(s)``;
all-ones weights reproduce the Hamming weight exactly.  The weighted form
exists because, with a fixed plaintext, Hamming-weight leakage only separates
nine of the 256 key classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import TraceMatrix, merge

# FIPS-197 forward S-box.
SBOX = np.array([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
], dtype=np.uint8)

HW_TABLE = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

# BITS_TABLE[v, b] = bit b of v (LSB first)
BITS_TABLE = ((np.arange(256)[:, None] >> np.arange(8)[None, :]) & 1).astype(np.float64)


def _check_byte(b) -> int:
    b = int(b)
    if not 0 <= b <= 255:
        raise ValueError(f"byte value out of range: {b}")
    return b


def sbox_lookup(b: int) -> int:
    return int(SBOX[_check_byte(b)])


def hamming_weight(b: int) -> int:
    return int(HW_TABLE[_check_byte(b)])


class ConfigError(ValueError):
    """Invalid synthesis configuration."""


@dataclass(frozen=True)
class DeviceProfile:
    """Manufacturing/packaging variation of one simulated device.

    ``bit_weights``, when given, has one row of eight weights per leak
    position (see the module docstring); ``None`` means Hamming weight.
    """

    device_id: int
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0
    leak_positions: tuple[int, ...] = (96, 148)
    leak_strength: float = 1.0
    batch_id: int = 1
    bit_weights: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "leak_positions", tuple(int(p) for p in self.leak_positions))
        if self.device_id < 1:
            raise ConfigError(f"device_id must be >= 1, got {self.device_id}")
        if not self.gain > 0:
            raise ConfigError(f"gain must be > 0, got {self.gain}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.leak_strength > 0:
            raise ConfigError(f"leak_strength must be > 0, got {self.leak_strength}")
        if not self.leak_positions or min(self.leak_positions) < 0:
            raise ConfigError(f"invalid leak positions {self.leak_positions}")
        if self.bit_weights is not None:
            w = np.array(self.bit_weights, dtype=np.float64)
            if w.shape != (len(self.leak_positions), 8):
                raise ConfigError(
                    f"bit_weights shape {w.shape} != ({len(self.leak_positions)}, 8)"
                )
            w.setflags(write=False)
            object.__setattr__(self, "bit_weights", w)

    def check_length(self, trace_length: int) -> None:
        if max(self.leak_positions) >= trace_length:
            raise ConfigError(
                f"device {self.device_id}: leak position {max(self.leak_positions)} "
                f"outside trace of length {trace_length}"
            )

    def leak_values(self, sbox_out: np.ndarray) -> np.ndarray:
        """Leak amplitudes (before gain) for SBox outputs, shape ``(len(sbox_out), n_leak)``."""
        sbox_out = np.asarray(sbox_out, dtype=np.intp)
        if self.bit_weights is None:
            hw = HW_TABLE[sbox_out].astype(np.float64)
            vals = np.repeat(hw[:, None], len(self.leak_positions), axis=1)
        else:
            vals = BITS_TABLE[sbox_out] @ self.bit_weights.T
        return self.leak_strength * vals


def random_background(length: int, rng: np.random.Generator, scale: float = 1.0,
                      smooth: int = 1) -> np.ndarray:
    """Key-independent waveform: Gaussian noise, optionally box-smoothed."""
    raw = rng.standard_normal(length + smooth - 1)
    if smooth > 1:
        raw = np.convolve(raw, np.ones(smooth) / np.sqrt(smooth), mode="valid")
    return scale * raw


@dataclass(frozen=True)
class WhiteBackground:
    """Picklable, self-describing wrapper around :func:`random_background`."""

    scale: float = 1.0
    smooth: int = 1

    def __call__(self, length: int, rng: np.random.Generator) -> np.ndarray:
        return random_background(length, rng, self.scale, self.smooth)

    def describe(self) -> str:
        return f"white(scale={self.scale!r},smooth={self.smooth})"


BackgroundFn = Callable[[int, np.random.Generator], np.ndarray]


@dataclass
class SynthConfig:
    """What to generate.

    With ``vary="key"`` (the profiling setup) the key byte cycles through
    0..255 and the plaintext stays at ``fixed_plaintext_byte``.  With
    ``vary="plaintext"`` the key is held at ``fixed_key_byte`` and plaintexts
    cycle instead, which is what a non-profiled CPA needs.
    """

    devices: list[DeviceProfile]
    n_traces_per_device: int = 2560
    trace_length: int = 3000
    fixed_plaintext_byte: int = 0x00
    fixed_key_byte: int = 0x00
    vary: str = "key"
    background: BackgroundFn = field(default_factory=WhiteBackground)
    seed: int = 0

    def validate(self) -> None:
        if not self.devices:
            raise ConfigError("no devices configured")
        if self.n_traces_per_device < 1:
            raise ConfigError("n_traces_per_device must be >= 1")
        if self.trace_length < 1:
            raise ConfigError("trace_length must be >= 1")
        if self.vary not in ("key", "plaintext"):
            raise ConfigError(f"vary must be 'key' or 'plaintext', got {self.vary!r}")
        _check_byte(self.fixed_plaintext_byte)
        _check_byte(self.fixed_key_byte)
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate device ids {ids}")
        for d in self.devices:
            d.check_length(self.trace_length)


def _render(keys, plaintexts, profile: DeviceProfile, background: np.ndarray,
            rng: np.random.Generator) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.intp)
    plaintexts = np.asarray(plaintexts, dtype=np.intp)
    out = np.tile(background, (keys.size, 1))
    leaks = profile.leak_values(SBOX[plaintexts ^ keys])
    out[:, list(profile.leak_positions)] += leaks
    out *= profile.gain
    out += profile.offset
    if profile.noise_sigma > 0:
        out += rng.normal(0.0, profile.noise_sigma, size=out.shape)
    return out


def synth_trace(key_byte: int, plaintext_byte: int, profile: DeviceProfile,
                rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    """One trace; its length is ``len(background)``."""
    background = np.asarray(background, dtype=np.float64)
    profile.check_length(background.size)
    row = _render([_check_byte(key_byte)], [_check_byte(plaintext_byte)], profile, background, rng)
    return row[0]


def synth_dataset(cfg: SynthConfig) -> TraceMatrix:
    """Generate ``n_traces_per_device`` traces for every configured device.

    Noise for device ``d`` comes from the stream seeded by ``(seed, d)``, so a
    device's traces do not depend on which other devices are generated.
    """
    cfg.validate()
    background = np.asarray(
        cfg.background(cfg.trace_length, np.random.default_rng([cfg.seed, 0])), dtype=np.float64
    )
    if background.shape != (cfg.trace_length,):
        raise ConfigError(f"background procedure returned shape {background.shape}")

    cycle = np.arange(cfg.n_traces_per_device) % 256
    sets = []
    for profile in cfg.devices:
        rng = np.random.default_rng([cfg.seed, profile.device_id])
        if cfg.vary == "key":
            keys, pts = cycle, np.full_like(cycle, cfg.fixed_plaintext_byte)
        else:
            keys, pts = np.full_like(cycle, cfg.fixed_key_byte), cycle
        samples = _render(keys, pts, profile, background, rng)
        sets.append(TraceMatrix(samples, keys, pts, profile.device_id))
    return merge(sets)


def make_bit_weights(n_leak: int, rng: np.random.Generator, spread: float = 0.5) -> np.ndarray:
    """Per-position bit weights ``1 + U(-spread, spread)``."""
    return 1.0 + rng.uniform(-spread, spread, size=(n_leak, 8))


def make_device_profiles(
    n_devices: int,
    seed: int = 0,
    *,
    leak_positions: Sequence[int] = (96, 148),
    leak_strength: float = 1.0,
    noise_sigma: float = 0.1,
    gain_spread: float = 0.1,
    n_batches: int = 2,
    batch_offset_spread: float = 0.5,
    offset_jitter: float = 0.1,
    bit_weights: np.ndarray | None = None,
    bit_weight_jitter: float = 0.0,
) -> list[DeviceProfile]:
    """Draw device profiles with gain/offset variation.

    Devices ``1..n_devices`` fill ``n_batches`` consecutive batches of
    near-equal size.  Gain is ``1 + U(-gain_spread, gain_spread)``; offset is the
    batch's ``U(-batch_offset_spread, batch_offset_spread)`` plus a per-device
    ``N(0, offset_jitter)``.  With ``bit_weights`` set, each device gets its
    own copy perturbed by ``N(0, bit_weight_jitter)``.
    """
    rng = np.random.default_rng([seed, 0xD])
    batch_offsets = rng.uniform(-batch_offset_spread, batch_offset_spread, size=n_batches)
    per_batch = -(-n_devices // n_batches)
    profiles = []
    for i in range(n_devices):
        batch = i // per_batch
        w = None
        if bit_weights is not None:
            w = np.asarray(bit_weights, dtype=np.float64)
            if bit_weight_jitter > 0:
                w = w + rng.normal(0.0, bit_weight_jitter, size=w.shape)
        profiles.append(DeviceProfile(
            device_id=i + 1,
            gain=1.0 + rng.uniform(-gain_spread, gain_spread),
            offset=batch_offsets[batch] + rng.normal(0.0, offset_jitter),
            noise_sigma=noise_sigma,
            leak_positions=tuple(leak_positions),
            leak_strength=leak_strength,
            batch_id=batch + 1,
            bit_weights=w,
        ))
    return profiles


def shift_traces(samples: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Right-shift row ``i`` by ``shifts[i]``, replicating its first sample into the gap."""
    samples = np.asarray(samples, dtype=np.float64)
    m, n = samples.shape
    cols = np.arange(n)[None, :] - np.asarray(shifts)[:, None]
    np.maximum(cols, 0, out=cols)
    return np.take_along_axis(samples, cols, axis=1)


def inject_misalignment(traces: TraceMatrix, max_shift: int, rng: np.random.Generator,
                        return_shifts: bool = False):
    """Independently shift every trace right by ``Uniform{0..max_shift}`` samples."""
    if max_shift < 0 or max_shift >= traces.n_samples:
        raise ValueError(f"max_shift must be in [0, {traces.n_samples}), got {max_shift}")
    shifts = rng.integers(0, max_shift + 1, size=traces.n_traces)
    out = traces.with_samples(shift_traces(traces.samples, shifts))
    if return_shifts:
        return out, shifts
    return out


def manifest_entries(cfg: SynthConfig, extra: dict | None = None) -> dict[str, str]:
    """Flat key=value record of the generation parameters."""
    entries = {
        "n_devices": str(len(cfg.devices)),
        "n_traces_per_device": str(cfg.n_traces_per_device),
        "trace_length": str(cfg.trace_length),
        "vary": cfg.vary,
        "fixed_plaintext_byte": str(cfg.fixed_plaintext_byte),
        "fixed_key_byte": str(cfg.fixed_key_byte),
        "background": (cfg.background.describe() if hasattr(cfg.background, "describe")
                       else getattr(cfg.background, "__name__", repr(cfg.background))),
        "seed": str(cfg.seed),
    }
    for d in cfg.devices:
        p = f"device.{d.device_id}."
        entries[p + "gain"] = repr(d.gain)
        entries[p + "offset"] = repr(d.offset)
        entries[p + "noise_sigma"] = repr(d.noise_sigma)
        entries[p + "leak_positions"] = ",".join(map(str, d.leak_positions))
        entries[p + "leak_strength"] = repr(d.leak_strength)
        entries[p + "batch_id"] = str(d.batch_id)
        entries[p + "bit_weights"] = (
            "hw" if d.bit_weights is None
            else ";".join(",".join(repr(float(v)) for v in row) for row in d.bit_weights)
        )
    if extra:
        entries.update({k: str(v) for k, v in extra.items()})
    return entries



def desk_leak_positions(trace_length: int, n_leak: int = 16) -> np.ndarray:
    """Evenly spread leak positions over ``[L/8, 25L/32]``.

    Both margins exceed a 50-sample shift at ``L = 512``, so a rigid
    misalignment never pushes a leak out of the trace window.
    """
    lo, hi = trace_length / 8, trace_length * 25 / 32
    return np.linspace(lo, hi, n_leak).astype(int)


def desk_config(n_devices: int = 5, n_traces_per_device: int = 2560, trace_length: int = 512,
                seed: int = 0, *, n_leak: int = 16, noise_sigma: float = 0.1,
                leak_strength: float = 0.75, background_scale: float = 6.0,
                gain_spread: float = 0.1, batch_offset_spread: float = 0.5,
                offset_jitter: float = 0.1, bit_weight_spread: float = 0.5) -> SynthConfig:
    """The default small-scale multi-device scenario.

    Bit-weighted leakage at ``n_leak`` positions, a strong white background
    and two manufacturing batches with distinct offsets.
    """
    positions = desk_leak_positions(trace_length, n_leak)
    weights = make_bit_weights(n_leak, np.random.default_rng([seed, 0xB]), bit_weight_spread)
    profiles = make_device_profiles(
        n_devices, seed, leak_positions=positions, leak_strength=leak_strength,
        noise_sigma=noise_sigma, gain_spread=gain_spread,
        batch_offset_spread=batch_offset_spread, offset_jitter=offset_jitter,
        bit_weights=weights,
    )
    return SynthConfig(devices=profiles, n_traces_per_device=n_traces_per_device,
                       trace_length=trace_length, background=WhiteBackground(background_scale),
                       seed=seed)
