"""Signal containers, windowing, resampling and filtering.

Everything here is a pure function of its inputs and operates on float64
numpy arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import interpolate, signal
from scipy.io import wavfile


class SignalError(ValueError):
    """Raised for malformed signals or incompatible rate arithmetic."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: int
    bits_per_sample: int = 16

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) != self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise SignalError(f"sample rate must be a positive integer, got {self.sample_rate_hz}")
        if self.bits_per_sample <= 0:
            raise SignalError("bits_per_sample must be positive")
        if not np.all(np.isfinite(samples)):
            raise SignalError("samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def with_samples(self, samples, sample_rate_hz=None) -> "AudioSignal":
        return AudioSignal(samples, sample_rate_hz or self.sample_rate_hz, self.bits_per_sample)


@dataclass(frozen=True)
class TriAxialSignal:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        axes = [np.asarray(a, dtype=np.float64).reshape(-1) for a in (self.x, self.y, self.z)]
        if len({a.shape[0] for a in axes}) != 1:
            raise SignalError("all three axes must have the same length")
        if self.sample_rate_hz <= 0:
            raise SignalError("sample rate must be positive")
        for name, a in zip("xyz", axes):
            object.__setattr__(self, name, a)


class TailPolicy(str, Enum):
    DROP = "drop"
    ZERO_PAD = "zero_pad"


@dataclass(frozen=True)
class WindowingPlan:
    window_len_samples: int = 8192
    hop_samples: int = 4096
    tail_policy: TailPolicy = TailPolicy.DROP

    def __post_init__(self):
        if self.window_len_samples <= 0 or self.hop_samples <= 0:
            raise SignalError("window and hop must be positive")
        if self.hop_samples > self.window_len_samples:
            raise SignalError("hop must not exceed the window length")
        object.__setattr__(self, "tail_policy", TailPolicy(self.tail_policy))

    @classmethod
    def from_duration(cls, sample_rate_hz, window_s=0.512, overlap=0.5, tail_policy="drop"):
        win = int(round(window_s * sample_rate_hz))
        hop = max(1, int(round(win * (1.0 - overlap))))
        return cls(win, hop, TailPolicy(tail_policy))


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "lowpass"
    order: int = 100
    cutoff_hz: float = 2000.0

    def __post_init__(self):
        if self.kind not in ("lowpass", "highpass"):
            raise SignalError(f"unknown filter kind {self.kind!r}")
        if self.order < 1:
            raise SignalError("filter order must be >= 1")
        if self.cutoff_hz <= 0:
            raise SignalError("cutoff must be positive")

    def sos(self, sample_rate_hz: int) -> np.ndarray:
        if self.cutoff_hz >= sample_rate_hz / 2:
            raise SignalError(
                f"cutoff {self.cutoff_hz} Hz is not below Nyquist of {sample_rate_hz} Hz"
            )
        # zpk -> sos keeps order-100 designs stable (50 biquads).
        return signal.butter(self.order, self.cutoff_hz, btype=self.kind,
                             fs=sample_rate_hz, output="sos")


def apply_filter(sig: AudioSignal, spec: FilterSpec) -> AudioSignal:
    out = signal.sosfilt(spec.sos(sig.sample_rate_hz), sig.samples)
    if not np.all(np.isfinite(out)):
        raise SignalError(f"unstable realization of {spec}")
    return sig.with_samples(out)


def window_offsets(n_samples: int, plan: WindowingPlan) -> list[int]:
    win, hop = plan.window_len_samples, plan.hop_samples
    if plan.tail_policy is TailPolicy.DROP:
        if n_samples < win:
            return []
        return list(range(0, n_samples - win + 1, hop))
    if n_samples <= win:
        return [0]
    n = int(np.ceil((n_samples - win) / hop)) + 1
    return [i * hop for i in range(n)]


def frame_array(x: np.ndarray, plan: WindowingPlan) -> np.ndarray:
    """Stack windows of a 1-D array into shape (n_windows, window_len)."""
    offsets = window_offsets(x.shape[0], plan)
    win = plan.window_len_samples
    out = np.zeros((len(offsets), win), dtype=np.float64)
    for i, start in enumerate(offsets):
        chunk = x[start:start + win]
        out[i, :chunk.shape[0]] = chunk
    return out


def window_signal(sig: AudioSignal, plan: WindowingPlan) -> list[AudioSignal]:
    if len(sig) < 1:
        raise SignalError("cannot window an empty signal")
    return [sig.with_samples(w) for w in frame_array(sig.samples, plan)]


def crossfade_weights(plan: WindowingPlan, n_windows: int) -> np.ndarray:
    """Per-window Hann cross-fade weights; outer halves of the first and last window are flat."""
    win, hop = plan.window_len_samples, plan.hop_samples
    base = signal.get_window("hann", win, fftbins=True) if hop < win else np.ones(win)
    weights = np.tile(base, (n_windows, 1))
    if hop < win and n_windows:
        half = win // 2
        weights[0, :half] = 1.0
        weights[-1, half:] = 1.0
    return weights


def overlap_add(frames: np.ndarray, plan: WindowingPlan, length: int) -> np.ndarray:
    """Recombine windows produced by `frame_array` into a signal of `length` samples."""
    frames = np.asarray(frames, dtype=np.float64)
    n, win = frames.shape
    total = max(length, (n - 1) * plan.hop_samples + win) if n else length
    acc = np.zeros(total)
    norm = np.zeros(total)
    weights = crossfade_weights(plan, n)
    for i in range(n):
        start = i * plan.hop_samples
        acc[start:start + win] += weights[i] * frames[i]
        norm[start:start + win] += weights[i]
    covered = norm > 1e-12
    acc[covered] /= norm[covered]
    return acc[:length]


def _integral_ratio(num: int, den: int, what: str) -> int:
    if num % den:
        raise SignalError(f"{what}: {num} is not an integer multiple of {den}")
    return num // den


def decimate(sig: AudioSignal, factor: int) -> AudioSignal:
    """Keep every `factor`-th sample starting at index 0, with no anti-alias filter."""
    if int(factor) != factor or factor < 1:
        raise SignalError("decimation factor must be a positive integer")
    factor = int(factor)
    if sig.sample_rate_hz % factor:
        raise SignalError(
            f"factor {factor} does not divide sample rate {sig.sample_rate_hz}"
        )
    return sig.with_samples(sig.samples[::factor], sig.sample_rate_hz // factor)


def lowpass_decimate(sig: AudioSignal, spec: FilterSpec, factor: int) -> AudioSignal:
    if spec.kind != "lowpass":
        raise SignalError("lowpass_decimate needs a lowpass FilterSpec")
    out_nyquist = sig.sample_rate_hz / factor / 2
    if spec.cutoff_hz > out_nyquist:
        raise SignalError(f"cutoff {spec.cutoff_hz} Hz exceeds output Nyquist {out_nyquist} Hz")
    return decimate(apply_filter(sig, spec), factor)


def upsample_to_grid(sig: AudioSignal, target_rate_hz: int, method: str = "spline") -> AudioSignal:
    ratio = _integral_ratio(int(target_rate_hz), sig.sample_rate_hz, "upsample")
    n = len(sig)
    if ratio == 1:
        return sig.with_samples(sig.samples.copy())
    if method == "zero_order_hold":
        out = np.repeat(sig.samples, ratio)
    elif method == "spline":
        if n < 2:
            out = np.repeat(sig.samples, ratio)
        else:
            t_in = np.arange(n, dtype=np.float64)
            t_out = np.arange(n * ratio, dtype=np.float64) / ratio
            k = min(3, n - 1)
            spl = interpolate.make_interp_spline(t_in, sig.samples, k=k)
            out = spl(t_out)
    else:
        raise SignalError(f"unknown upsampling method {method!r}")
    return sig.with_samples(out, int(target_rate_hz))


def preprocess_accel(tri: TriAxialSignal) -> AudioSignal:
    """Remove each axis' DC offset, then average the three axes."""
    if tri.x.shape[0] == 0:
        raise SignalError("accelerometer input is empty")
    axes = np.stack([tri.x, tri.y, tri.z])
    axes = axes - axes.mean(axis=1, keepdims=True)
    return AudioSignal(axes.mean(axis=0), tri.sample_rate_hz)


MOVEMENT_FILTER = FilterSpec(kind="highpass", order=1, cutoff_hz=10.0)


def movement_highpass(sig: AudioSignal) -> AudioSignal:
    """First-order 10 Hz Butterworth highpass for walking/running artefacts."""
    if sig.sample_rate_hz <= 20:
        raise SignalError("movement filter needs a sample rate above 20 Hz")
    return apply_filter(sig, MOVEMENT_FILTER)


def normalize_peak(sig: AudioSignal, peak: float = 0.95) -> AudioSignal:
    m = np.max(np.abs(sig.samples)) if len(sig) else 0.0
    if m == 0:
        return sig
    return sig.with_samples(sig.samples * (peak / m))


# --- file I/O ---------------------------------------------------------------

def read_wav(path) -> AudioSignal:
    rate, data = wavfile.read(path)
    if data.ndim > 1:
        if data.shape[1] != 1:
            raise SignalError(f"{path}: expected mono audio, got {data.shape[1]} channels")
        data = data[:, 0]
    return AudioSignal(_pcm_to_float(data), rate, _bits(data))


def write_wav(path, sig: AudioSignal) -> Path:
    pcm = np.clip(np.round(sig.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, sig.sample_rate_hz, pcm)
    return Path(path)


def read_triaxial(path) -> TriAxialSignal:
    """Load a 3-channel WAV or a CSV with an ``x,y,z`` header."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"x", "y", "z"} - set(reader.fieldnames or [])
            if missing:
                raise SignalError(f"{path}: CSV header lacks columns {sorted(missing)}")
            rate = None
            cols = {"x": [], "y": [], "z": []}
            for row in reader:
                for k in cols:
                    cols[k].append(float(row[k]))
                if rate is None and row.get("sample_rate_hz"):
                    rate = int(float(row["sample_rate_hz"]))
        return TriAxialSignal(cols["x"], cols["y"], cols["z"], rate or 16000)
    rate, data = wavfile.read(path)
    if data.ndim != 2 or data.shape[1] != 3:
        raise SignalError(f"{path}: expected a 3-channel WAV")
    f = _pcm_to_float(data)
    return TriAxialSignal(f[:, 0], f[:, 1], f[:, 2], rate)


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def _bits(data: np.ndarray) -> int:
    return {np.dtype(np.int16): 16, np.dtype(np.int32): 32, np.dtype(np.uint8): 8}.get(data.dtype, 32)
