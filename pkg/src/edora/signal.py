"""Preprocessing, epoching, synthetic trials and on-disk trial sets.

Signal arrays are plain numpy arrays with time on the last axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps
from scipy.linalg import expm

__all__ = [
    "TrialSet",
    "TrialSetFormatError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "LabelRangeError",
    "EpochError",
    "SignalConfigError",
    "design_bandpass",
    "butterworth_bandpass",
    "resample",
    "zscore",
    "preprocess",
    "epoch",
    "synth_generate",
    "save_trialset",
    "load_trialset",
    "save_manifest",
    "load_manifest",
]

MAGIC = b"EDTS"
VERSION = 1
ZSCORE_EPS = 1e-8


class SignalConfigError(ValueError):
    pass


class EpochError(ValueError):
    def __init__(self, offenders: list[tuple[int, int, int]], length: int):
        self.offenders = offenders
        listed = ", ".join(f"#{i} (onset {onset}, label {label})" for i, onset, label in offenders)
        super().__init__(f"windows overrun the {length}-sample recording for events {listed}")


class TrialSetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class MalformedHeaderError(TrialSetFormatError):
    pass


class TruncatedPayloadError(TrialSetFormatError):
    pass


class LabelRangeError(TrialSetFormatError):
    pass


@dataclass
class TrialSet:
    data: np.ndarray  # [trials, channels, samples]
    labels: np.ndarray
    class_names: list[str]
    rate_hz: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.class_names = list(self.class_names)
        if self.data.ndim != 3:
            raise SignalConfigError(f"trial data must be [trials, channels, samples], got {self.data.shape}")
        if len(self.labels) != self.data.shape[0]:
            raise SignalConfigError(
                f"{len(self.labels)} labels for {self.data.shape[0]} trials")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise SignalConfigError("label outside the class vocabulary")
        if not self.rate_hz > 0:
            raise SignalConfigError(f"rate_hz must be positive, got {self.rate_hz}")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def samples(self) -> int:
        return self.data.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "TrialSet":
        return TrialSet(self.data[index], self.labels[index], self.class_names, self.rate_hz,
                        dict(self.meta))


# ---------------------------------------------------------------------------
# filtering


def design_bandpass(rate_hz: float, low_hz: float, high_hz: float, order: int = 4) -> np.ndarray:
    """Digital Butterworth bandpass as second-order sections (bilinear, prewarped)."""
    nyquist = rate_hz / 2.0
    if not (0 < low_hz < high_hz < nyquist):
        raise SignalConfigError(
            f"band {low_hz}-{high_hz} Hz must satisfy 0 < low < high < {nyquist} Hz")
    if order < 1:
        raise SignalConfigError("filter order must be >= 1")
    return sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=rate_hz, output="sos")


def butterworth_bandpass(x, rate_hz: float, low_hz: float = 4.0, high_hz: float = 40.0,
                         order: int = 4) -> np.ndarray:
    """Zero-phase (forward-backward) bandpass along the last axis."""
    sos = design_bandpass(rate_hz, low_hz, high_hz, order)
    return sps.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def resample(x, from_hz: float, to_hz: float) -> np.ndarray:
    """Integer-factor decimation after a zero-phase order-8 anti-alias lowpass."""
    ratio = from_hz / to_hz
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise SignalConfigError(f"unsupported resampling ratio {from_hz}/{to_hz}")
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    sos = sps.butter(8, 0.45 * to_hz, btype="lowpass", fs=from_hz, output="sos")
    smooth = sps.sosfiltfilt(sos, x, axis=-1)
    n_out = x.shape[-1] // factor
    return smooth[..., : n_out * factor : factor].copy()


def zscore(x) -> np.ndarray:
    """Per-channel standardisation with the population std, ``(x - mu) / (sd + 1e-8)``."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    # a float mean of a constant channel can miss the constant by an ulp
    flat = np.ptp(x, axis=-1, keepdims=True) == 0
    return np.where(flat, 0.0, (x - mu) / (sd + ZSCORE_EPS))


def epoch(recording, events: Sequence[tuple[int, int]], window_s: float, rate_hz: float,
          class_names: Sequence[str]) -> TrialSet:
    """Cut fixed-length trials from a ``[channels, samples]`` recording."""
    recording = np.asarray(recording, dtype=np.float64)
    width = int(round(window_s * rate_hz))
    length = recording.shape[-1]
    offenders = [(i, int(on), int(lab)) for i, (on, lab) in enumerate(events)
                 if on < 0 or on + width > length]
    if offenders:
        raise EpochError(offenders, length)
    data = np.stack([recording[:, on:on + width] for on, _ in events]) if events else \
        np.zeros((0, recording.shape[0], width))
    labels = np.array([lab for _, lab in events], dtype=np.int64)
    return TrialSet(data, labels, list(class_names), rate_hz)


def preprocess(recording, events, *, rate_hz: float, target_hz: float | None = None,
               window_s: float = 4.0, band=(4.0, 40.0), order: int = 4,
               class_names: Sequence[str]) -> TrialSet:
    """resample -> bandpass -> epoch -> zscore for one continuous recording.

    Event onsets are given in samples at ``rate_hz`` and rescaled when resampling.
    """
    x = np.asarray(recording, dtype=np.float64)
    rate = rate_hz
    if target_hz is not None and target_hz != rate_hz:
        factor = int(round(rate_hz / target_hz))
        x = resample(x, rate_hz, target_hz)
        events = [(on // factor, lab) for on, lab in events]
        rate = target_hz
    x = butterworth_bandpass(x, rate, band[0], band[1], order)
    ts = epoch(x, events, window_s, rate, class_names)
    ts.data = zscore(ts.data)
    return ts


# ---------------------------------------------------------------------------
# synthetic trials


def _mixing(channels: int, domain_shift: float) -> np.ndarray:
    # one fixed rotation generator, so the shift is a continuous family
    gen = np.random.default_rng(12345).normal(size=(channels, channels))
    skew = (gen - gen.T) / np.sqrt(2.0 * channels)
    return expm(np.pi * domain_shift * skew)


def synth_generate(classes: int = 3, channels: int = 8, trials_per_class: int = 100,
                   rate_hz: float = 128.0, window_s: float = 2.0, domain_shift: float = 0.0,
                   seed: int = 0, freq_shift_hz: float = 6.0, amplitude: float = 1.0) -> TrialSet:
    """Labelled trials built from class-specific band-limited rhythms.

    Class ``c`` drives the channels ``j`` with ``j % classes == c`` by a narrow-band
    oscillation around ``8 + 4c`` Hz (plus ``freq_shift_hz * domain_shift``), on
    top of unit-variance white noise on every channel. ``domain_shift`` also
    rotates the channel mixing. Trials are ordered class-major.
    """
    for name, value in dict(classes=classes, channels=channels,
                            trials_per_class=trials_per_class).items():
        if value < 1:
            raise SignalConfigError(f"{name} must be positive, got {value}")
    if rate_hz <= 0 or window_s <= 0:
        raise SignalConfigError("rate_hz and window_s must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(rate_hz * window_s))
    t = np.arange(n) / rate_hz
    mix = _mixing(channels, domain_shift)
    data = np.empty((classes * trials_per_class, channels, n))
    labels = np.repeat(np.arange(classes), trials_per_class)
    centers = 8.0 + 4.0 * np.arange(classes) + freq_shift_hz * domain_shift
    for idx, c in enumerate(labels):
        source = np.zeros((channels, n))
        driven = np.arange(channels) % classes == c
        for _ in range(3):
            f = centers[c] + rng.uniform(-1.0, 1.0)
            phase = rng.uniform(0, 2 * np.pi, size=driven.sum())
            source[driven] += amplitude * np.sin(2 * np.pi * f * t + phase[:, None])
        data[idx] = mix @ source + rng.normal(size=(channels, n))
    names = [f"class{c}" for c in range(classes)]
    return TrialSet(data, labels, names, rate_hz,
                    meta={"domain_shift": domain_shift, "seed": seed})


# ---------------------------------------------------------------------------
# binary container


def save_trialset(ts: TrialSet, path) -> None:
    """Write the little-endian ``EDTS`` container."""
    trials, channels, samples = ts.data.shape
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HIIIfH", VERSION, trials, channels, samples, ts.rate_hz, ts.num_classes)
    for name in ts.class_names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += ts.labels.astype("<u2").tobytes()
    out += ts.data.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def _read(buf: bytes, offset: int, fmt: str, what: str):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise MalformedHeaderError(f"file ends inside {what}", offset)
    return struct.unpack_from(fmt, buf, offset), offset + size


def load_trialset(path) -> TrialSet:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise MalformedHeaderError(f"bad magic {buf[:4]!r}", 0)
    (version, trials, channels, samples, rate, n_classes), off = _read(
        buf, 4, "<HIIIfH", "header")
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported version {version}", 4)
    if rate <= 0 or n_classes == 0:
        raise MalformedHeaderError("non-positive rate or empty class vocabulary", 4)
    names = []
    for _ in range(n_classes):
        (length,), off = _read(buf, off, "<H", "class name length")
        if off + length > len(buf):
            raise MalformedHeaderError("file ends inside class name", off)
        try:
            names.append(buf[off:off + length].decode("utf-8"))
        except UnicodeDecodeError:
            raise MalformedHeaderError("class name is not UTF-8", off) from None
        off += length
    label_bytes = 2 * trials
    if off + label_bytes > len(buf):
        raise TruncatedPayloadError(f"expected {trials} labels", off)
    labels = np.frombuffer(buf, dtype="<u2", count=trials, offset=off).astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise LabelRangeError(f"label {labels[bad[0]]} >= {n_classes} classes", off + 2 * int(bad[0]))
    off += label_bytes
    count = trials * channels * samples
    if len(buf) - off != 4 * count:
        raise TruncatedPayloadError(
            f"payload holds {len(buf) - off} bytes, expected {4 * count}", off)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64)
    return TrialSet(data.reshape(trials, channels, samples), labels, names, float(rate))


# ---------------------------------------------------------------------------
# manifest + flat per-trial files, for exported real recordings
#
#   # edora manifest v1
#   rate_hz = 250
#   channels = 22
#   samples = 1000
#   classes = left,right,feet,tongue
#   trial trials/0000.f32 left
#
# Each trial file is raw little-endian float32, channel-major [channels, samples].
# The label is a class name or an integer index.


def save_manifest(ts: TrialSet, path) -> None:
    path = Path(path)
    folder = path.parent / (path.stem + "_trials")
    folder.mkdir(parents=True, exist_ok=True)
    lines = ["# edora manifest v1", f"rate_hz = {ts.rate_hz!r}", f"channels = {ts.channels}",
             f"samples = {ts.samples}", "classes = " + ",".join(ts.class_names)]
    for i, (x, y) in enumerate(zip(ts.data, ts.labels)):
        rel = f"{folder.name}/{i:05d}.f32"
        (path.parent / rel).write_bytes(x.astype("<f4").tobytes())
        lines.append(f"trial {rel} {ts.class_names[y]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> TrialSet:
    path = Path(path)
    header: dict[str, str] = {}
    trials: list[tuple[str, str, int]] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("trial "):
            parts = line.split()
            if len(parts) != 3:
                raise SignalConfigError(f"{path}:{lineno}: expected 'trial <file> <label>'")
            trials.append((parts[1], parts[2], lineno))
        elif "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
        else:
            raise SignalConfigError(f"{path}:{lineno}: cannot parse {raw!r}")
    try:
        rate = float(header["rate_hz"])
        channels, samples = int(header["channels"]), int(header["samples"])
        names = [s.strip() for s in header["classes"].split(",")]
    except KeyError as err:
        raise SignalConfigError(f"{path}: missing header key {err.args[0]}") from None
    data = np.empty((len(trials), channels, samples))
    labels = np.empty(len(trials), dtype=np.int64)
    for i, (rel, label, lineno) in enumerate(trials):
        raw = (path.parent / rel).read_bytes()
        if len(raw) != 4 * channels * samples:
            raise SignalConfigError(
                f"{path}:{lineno}: {rel} holds {len(raw)} bytes, expected {4 * channels * samples}")
        data[i] = np.frombuffer(raw, dtype="<f4").reshape(channels, samples)
        if label in names:
            labels[i] = names.index(label)
        elif label.isdigit() and int(label) < len(names):
            labels[i] = int(label)
        else:
            raise SignalConfigError(f"{path}:{lineno}: unknown label {label!r}")
    return TrialSet(data, labels, names, rate)
