"""Objective quality metrics: SNR, LSD, STOI and an external PESQ adapter."""

from __future__ import annotations

import json
import math
import os
import re
import shlex
import subprocess
import threading
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal as sps

from .dsp import AudioSignal
from .objectives import StftResolution

LSD_RESOLUTION = StftResolution(2048, 512, 2048)
MAG_FLOOR = 1e-7
PESQ_ENV = "VIBRA_SR_PESQ_TOOL"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralFrame:
    X: np.ndarray
    frame_rate: float
    bin_hz: float

    def __post_init__(self):
        if np.any(self.X < 0):
            raise MetricError("magnitudes must be non-negative")


@dataclass
class MetricReport:
    snr_db: float
    lsd: float
    stoi: float | None = None
    pesq: float | None = None
    notes: list = field(default_factory=list)

    CSV_FIELDS = ("snr_db", "lsd", "stoi", "pesq", "notes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = _fmt_inf(self.snr_db)
        d["notes"] = "; ".join(self.notes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _fmt_inf(v):
    if v is not None and math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return v


def _samples(x):
    return np.asarray(getattr(x, "samples", x), dtype=np.float64).reshape(-1)


def _pair(ref, test):
    x, y = _samples(ref), _samples(test)
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    rx, ry = getattr(ref, "sample_rate_hz", None), getattr(test, "sample_rate_hz", None)
    if rx is not None and ry is not None and rx != ry:
        raise MetricError(f"sample rate mismatch: {rx} vs {ry}")
    return x, y


def _energy_ratio_db(x, y):
    num = float(np.sum(x ** 2))
    if num == 0.0:
        raise MetricError("reference is identically zero")
    den = float(np.sum((x - y) ** 2))
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def snr(ref, test) -> float:
    """SNR in dB between the full-signal magnitude spectra of ``ref`` and ``test``.

    Returns ``math.inf`` when the spectra coincide.
    """
    x, y = _pair(ref, test)
    return _energy_ratio_db(np.abs(np.fft.rfft(x)), np.abs(np.fft.rfft(y)))


def snr_time_domain(ref, test) -> float:
    x, y = _pair(ref, test)
    return _energy_ratio_db(x, y)


def magnitude_spectrogram(x, res: StftResolution = LSD_RESOLUTION, sample_rate_hz=16000) -> SpectralFrame:
    x = _samples(x)
    if x.shape[0] < res.window_len:
        raise MetricError(f"signal of {x.shape[0]} samples shorter than window {res.window_len}")
    win = sps.get_window("hann", res.window_len, fftbins=True)
    n_frames = 1 + (x.shape[0] - res.window_len) // res.hop
    idx = np.arange(res.window_len)[None, :] + res.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * win
    X = np.abs(np.fft.rfft(frames, n=res.fft_bins, axis=1))
    return SpectralFrame(X, sample_rate_hz / res.hop, sample_rate_hz / res.fft_bins)


def lsd_from_spectra(X: np.ndarray, X_hat: np.ndarray, eps=MAG_FLOOR) -> float:
    lx = np.log(np.maximum(X, eps))
    ly = np.log(np.maximum(X_hat, eps))
    return float(np.mean(np.sqrt(np.mean((lx - ly) ** 2, axis=1))))


def lsd(ref, test, stft: StftResolution = LSD_RESOLUTION) -> float:
    x, y = _pair(ref, test)
    return lsd_from_spectra(magnitude_spectrogram(x, stft).X, magnitude_spectrogram(y, stft).X)


# --- STOI -------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30          # frames, 384 ms at 10 kHz / hop 128
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.shape[0]))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _stoi_window(n):
    return np.hanning(n + 2)[1:-1]


def _frames(x, n, hop):
    w = _stoi_window(n)
    starts = range(0, x.shape[0] - n, hop)
    return np.array([w * x[s:s + n] for s in starts]).reshape(-1, n)


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE_DB, n=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames more than `dyn_range` dB below the loudest reference frame."""
    fx, fy = _frames(x, n, hop), _frames(y, n, hop)
    if fx.shape[0] == 0:
        return x[:0], y[:0]
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + _EPS)
    keep = (np.max(energy) - dyn_range - energy) < 0
    fx, fy = fx[keep], fy[keep]
    return _overlap_add(fx, hop), _overlap_add(fy, hop)


def _overlap_add(frames, hop):
    n_frames, n = frames.shape
    out = np.zeros((n_frames - 1) * hop + n) if n_frames else np.zeros(0)
    for i in range(n_frames):
        out[i * hop:i * hop + n] += frames[i]
    return out


def stoi(ref, test, sample_rate_hz: int | None = None) -> float:
    x, y = _pair(ref, test)
    fs = sample_rate_hz or getattr(ref, "sample_rate_hz", None) or 16000
    if fs != STOI_FS:
        g = math.gcd(int(fs), STOI_FS)
        x = sps.resample_poly(x, STOI_FS // g, int(fs) // g)
        y = sps.resample_poly(y, STOI_FS // g, int(fs) // g)
    x, y = remove_silent_frames(x, y)
    xs = np.abs(np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2), n=STOI_NFFT)).T
    ys = np.abs(np.fft.rfft(_frames(y, STOI_FRAME, STOI_FRAME // 2), n=STOI_NFFT)).T
    if xs.shape[1] < STOI_SEGMENT:
        raise MetricError("not enough speech content for STOI (need >= 384 ms after silence removal)")
    obm = third_octave_matrix()
    x_tob = np.sqrt(obm @ xs ** 2)
    y_tob = np.sqrt(obm @ ys ** 2)
    clip = 10 ** (-STOI_BETA_DB / 20)
    scores = []
    for m in range(STOI_SEGMENT, x_tob.shape[1] + 1):
        xseg = x_tob[:, m - STOI_SEGMENT:m]
        yseg = y_tob[:, m - STOI_SEGMENT:m]
        alpha = np.linalg.norm(xseg, axis=1, keepdims=True) / (np.linalg.norm(yseg, axis=1, keepdims=True) + _EPS)
        yprim = np.minimum(yseg * alpha, xseg * (1 + clip))
        xn = xseg - xseg.mean(axis=1, keepdims=True)
        yn = yprim - yprim.mean(axis=1, keepdims=True)
        xn /= np.linalg.norm(xn, axis=1, keepdims=True) + _EPS
        yn /= np.linalg.norm(yn, axis=1, keepdims=True) + _EPS
        scores.append(np.sum(xn * yn) / STOI_BANDS)
    return float(np.clip(np.mean(scores), -1.0, 1.0))


# --- PESQ adapter -----------------------------------------------------------

_pesq_lock = threading.Lock()
_FLOAT = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def pesq_external(ref_path, test_path, tool: str | None = None, timeout=120.0):
    """Run an external PESQ tool; returns ``(score or None, note)``.

    The tool command comes from `tool` or the VIBRA_SR_PESQ_TOOL environment
    variable and is called as ``<tool> <ref> <test>``. The last number printed
    on stdout is taken as the score.
    """
    tool = tool if tool is not None else os.environ.get(PESQ_ENV)
    if not tool:
        return None, "pesq unavailable"
    cmd = shlex.split(tool) + [str(ref_path), str(test_path)]
    with _pesq_lock:
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
        except (OSError, subprocess.SubprocessError) as exc:
            return None, f"pesq tool failed: {exc}"
    if proc.returncode != 0:
        return None, f"pesq tool exited with status {proc.returncode}"
    found = _FLOAT.findall(proc.stdout)
    if not found:
        return None, "pesq tool produced no score"
    return float(found[-1]), ""


def evaluate(ref: AudioSignal, test: AudioSignal, ref_path=None, test_path=None) -> MetricReport:
    report = MetricReport(snr_db=snr(ref, test), lsd=lsd(ref, test))
    report.notes.append(f"snr_time_domain_db={_fmt_inf(snr_time_domain(ref, test))}")
    try:
        report.stoi = stoi(ref, test)
    except MetricError as exc:
        report.notes.append(f"stoi unavailable: {exc}")
    if ref_path is not None and test_path is not None:
        report.pesq, note = pesq_external(ref_path, test_path)
        if note:
            report.notes.append(note)
    else:
        report.notes.append("pesq unavailable")
    return report
