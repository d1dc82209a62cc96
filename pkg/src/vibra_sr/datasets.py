"""Paired-data manifests, window streams and a synthetic speech corpus."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import (AudioSignal, FilterSpec, SignalError, TailPolicy, WindowingPlan,
                  decimate, frame_array, lowpass_decimate, read_wav, upsample_to_grid,
                  write_wav)

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("input", "target", "speaker", "placement", "duration_s")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairEntry:
    input_path: str
    target_path: str
    speaker_id: str = ""
    placement_tag: str = ""
    duration_s: float = 0.0
    split: str = "train"


@dataclass
class PairManifest:
    entries: list = field(default_factory=list)
    split: str = "train"
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def subset(self, split: str) -> "PairManifest":
        return PairManifest([e for e in self.entries if e.split == split], split, self.root)

    def validate(self):
        for e in self.entries:
            if e.duration_s <= 0:
                raise ManifestError(f"{e.target_path}: duration must be positive")
            for p in (e.input_path, e.target_path):
                if p and not self.resolve(p).exists():
                    raise ManifestError(f"missing file referenced by manifest: {p}")
        check_split_disjoint(self.entries)
        return self

    @classmethod
    def read_csv(cls, path, split: str | None = None) -> "PairManifest":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
            if missing:
                raise ManifestError(f"{path}: manifest lacks columns {sorted(missing)}")
            entries = [
                PairEntry(row["input"] or "", row["target"], row["speaker"], row["placement"],
                          float(row["duration_s"]), row.get("split") or "train")
                for row in reader
            ]
        m = cls(entries, split or "train", path.parent)
        return m.subset(split) if split else m

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_FIELDS + ("split",))
            for e in self.entries:
                w.writerow([e.input_path, e.target_path, e.speaker_id, e.placement_tag,
                            f"{e.duration_s:.6f}", e.split])


def check_split_disjoint(entries):
    seen = {}
    for e in entries:
        if e.speaker_id and seen.setdefault(e.speaker_id, e.split) != e.split:
            raise ManifestError(f"speaker {e.speaker_id!r} appears in splits "
                                f"{seen[e.speaker_id]!r} and {e.split!r}")


# --- synthetic speech -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpeechSpec:
    f0_hz: float = 150.0
    formant_centers_hz: tuple = (700.0, 1200.0, 2600.0, 3500.0, 5000.0)
    duration_s: float = 2.0
    seed: int = 0
    sample_rate_hz: int = 16000
    formant_bandwidth_hz: float = 80.0
    glide: float = 0.3
    noise_db: float = -40.0

    def __post_init__(self):
        fcs = tuple(float(f) for f in self.formant_centers_hz)
        object.__setattr__(self, "formant_centers_hz", fcs)
        if self.f0_hz <= 0 or (fcs and self.f0_hz >= min(fcs)):
            raise ValueError("f0 must be positive and below the lowest formant")
        if any(f >= self.sample_rate_hz / 2 for f in fcs):
            raise ValueError("formants must lie below Nyquist")


def synth_speech(spec: SyntheticSpeechSpec) -> AudioSignal:
    """Voiced speech-like signal: gliding harmonic source through parallel formant resonators.

    The f0 contour sweeps +/- `glide` back and forth so harmonics cover the
    spectrum and the long-term spectrum follows the formant envelope.
    """
    fs = spec.sample_rate_hz
    n = int(round(spec.duration_s * fs))
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n) / fs
    if n == 0:
        return AudioSignal(np.zeros(0), fs)
    # triangular f0 sweep, incommensurate with the syllable envelope
    tri = 2 * np.abs(2 * ((t / 0.37 + rng.uniform()) % 1.0) - 1) - 1
    f0 = spec.f0_hz * (1 + spec.glide * tri)
    f0 = f0 * (1 + 0.01 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    n_harm = int((fs / 2) // (spec.f0_hz * (1 - spec.glide)))
    source = np.zeros(n)
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    for k in range(1, n_harm + 1):
        # fade harmonics out as they approach Nyquist to avoid aliasing
        fk = k * f0
        gain = np.clip((fs / 2 - fk) / (0.05 * fs), 0.0, 1.0)
        source += gain * np.cos(k * phase + offsets[k - 1])
    source += 10 ** (-20 / 20) * rng.standard_normal(n)   # aspiration

    # zero-phase formant envelope: a sum of resonance magnitudes, free of the
    # phase cross-terms that pull peaks off-center in a parallel filter bank
    f = np.fft.rfftfreq(n, 1 / fs)
    half_bw = spec.formant_bandwidth_hz / 2
    envelope = sum(np.sqrt(1.0 / (1.0 + ((f - fc) / half_bw) ** 2)) / (1.0 + 0.5 * i)
                   for i, fc in enumerate(spec.formant_centers_hz))
    voiced = np.fft.irfft(np.fft.rfft(source) * envelope, n)

    # syllable-rate envelope, never fully silent
    syll = 0.55 + 0.45 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi))
    out = voiced * syll
    rms = np.sqrt(np.mean(out ** 2)) or 1.0
    out = out + rms * 10 ** (spec.noise_db / 20) * rng.standard_normal(n)
    out = 0.9 * out / np.max(np.abs(out))
    return AudioSignal(out, fs)


def make_pretrain_pair(clean: AudioSignal, low_rate_hz: int, scheme: str = "decimate",
                       upsample_method: str = "spline", filter_order: int = 100):
    """Return (input, target): input is `clean` brought down to `low_rate_hz` and lifted back."""
    if low_rate_hz <= 0 or clean.sample_rate_hz % low_rate_hz:
        raise SignalError(f"{low_rate_hz} Hz does not divide {clean.sample_rate_hz} Hz")
    factor = clean.sample_rate_hz // low_rate_hz
    if factor == 1:
        return clean.with_samples(clean.samples.copy()), clean
    if scheme == "decimate":
        low = decimate(clean, factor)
    elif scheme == "filter_decimate":
        low = lowpass_decimate(clean, FilterSpec("lowpass", filter_order, low_rate_hz / 2), factor)
    else:
        raise SignalError(f"unknown downsampling scheme {scheme!r}")
    return upsample_to_grid(low, clean.sample_rate_hz, upsample_method), clean


# --- loading ----------------------------------------------------------------

def load_audio(path, target_rate_hz: int) -> AudioSignal:
    sig = read_wav(path)
    if sig.sample_rate_hz == target_rate_hz:
        return sig
    if sig.sample_rate_hz > target_rate_hz:
        if sig.sample_rate_hz % target_rate_hz:
            raise SignalError(f"{path}: cannot bring {sig.sample_rate_hz} Hz to {target_rate_hz} Hz")
        q = sig.sample_rate_hz // target_rate_hz
        return AudioSignal(sps.resample_poly(sig.samples, 1, q), target_rate_hz)
    return upsample_to_grid(sig, target_rate_hz, "spline")


def estimate_lag(a: np.ndarray, b: np.ndarray, max_lag: int) -> int:
    """Lag (samples) maximizing cross-correlation; positive means `b` trails `a`."""
    n = min(a.shape[0], b.shape[0])
    if n == 0 or max_lag <= 0:
        return 0
    corr = sps.correlate(b[:n], a[:n], mode="full", method="fft")
    lags = sps.correlation_lags(n, n, mode="full")
    sel = np.abs(lags) <= max_lag
    return int(lags[sel][np.argmax(corr[sel])])


def align_pair(inp: np.ndarray, tgt: np.ndarray, sample_rate_hz: int, max_lag_s=0.05):
    lag = estimate_lag(tgt, inp, int(max_lag_s * sample_rate_hz))
    if lag > 0:
        inp = inp[lag:]
    elif lag < 0:
        tgt = tgt[-lag:]
    n = min(inp.shape[0], tgt.shape[0])
    return inp[:n], tgt[:n]


def load_pairs(manifest: PairManifest, plan: WindowingPlan, target_rate_hz: int = 16000,
               low_rate_hz: int = 4000, scheme: str = "decimate", seed: int | None = None,
               epoch: int = 0, lag_trim: bool = True):
    """Yield aligned ``(input_window, target_window)`` arrays on the target grid.

    Entries without an input path are pretraining pairs: the input window is
    derived from the target window with `scheme`. Order follows the manifest
    unless `seed` is given, in which case windows are shuffled per epoch.
    """
    pairs = []
    for entry in manifest.entries:
        tgt_path = manifest.resolve(entry.target_path)
        target = load_audio(tgt_path, target_rate_hz).samples
        if not entry.input_path:
            for w in frame_array(target, plan):
                tw = AudioSignal(w, target_rate_hz)
                iw, _ = make_pretrain_pair(tw, low_rate_hz, scheme)
                pairs.append((iw.samples, w))
            continue
        inp = load_audio(manifest.resolve(entry.input_path), target_rate_hz).samples
        if abs(inp.shape[0] - target.shape[0]) > plan.window_len_samples:
            raise ManifestError(
                f"pair {entry.input_path} / {entry.target_path}: lengths differ by "
                f"{abs(inp.shape[0] - target.shape[0])} samples (> one window)"
            )
        if lag_trim:
            inp, target = align_pair(inp, target, target_rate_hz)
        else:
            n = min(inp.shape[0], target.shape[0])
            inp, target = inp[:n], target[:n]
        for iw, tw in zip(frame_array(inp, plan), frame_array(target, plan)):
            pairs.append((iw, tw))
    if seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        pairs = [pairs[i] for i in order]
    yield from pairs


def window_arrays(manifest: PairManifest, plan: WindowingPlan, **kwargs):
    """Materialize `load_pairs` into two (n_windows, window_len) arrays."""
    pairs = list(load_pairs(manifest, plan, **kwargs))
    if not pairs:
        w = plan.window_len_samples
        return np.zeros((0, w)), np.zeros((0, w))
    X, Y = zip(*pairs)
    return np.stack(X), np.stack(Y)


# --- corpora on disk --------------------------------------------------------

def speaker_spec(speaker: int, clip: int, duration_s: float, seed: int,
                 sample_rate_hz: int = 16000) -> SyntheticSpeechSpec:
    rng = np.random.default_rng([seed, speaker])
    f0 = rng.uniform(110.0, 210.0)
    f1 = rng.uniform(450.0, 850.0)
    formants = (f1, f1 + rng.uniform(600.0, 1200.0), rng.uniform(2300.0, 2900.0),
                rng.uniform(3300.0, 3900.0), rng.uniform(4600.0, 5600.0))
    formants = tuple(f for f in formants if f < sample_rate_hz / 2 * 0.9)
    return SyntheticSpeechSpec(f0, formants, duration_s, seed=seed * 1_000_003 + speaker * 1009 + clip,
                               sample_rate_hz=sample_rate_hz)


def make_synthetic_corpus(out_dir, n_speakers=4, clips_per_speaker=3, duration_s=5.0,
                          seed=0, sample_rate_hz=16000, low_rate_hz=4000, scheme="decimate",
                          val_speakers=1, paired=True) -> PairManifest:
    """Write a synthetic corpus plus manifest.csv; returns the manifest.

    With `paired` the input files hold the low-rate (directly decimated)
    version; otherwise inputs are left blank for pretraining-mode loading.
    """
    out = Path(out_dir)
    (out / "target").mkdir(parents=True, exist_ok=True)
    if paired:
        (out / "input").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in range(n_speakers):
        split = "val" if s >= n_speakers - val_speakers else "train"
        for c in range(clips_per_speaker):
            spec = speaker_spec(s, c, duration_s, seed, sample_rate_hz)
            clean = synth_speech(spec)
            name = f"spk{s:02d}_{c:03d}.wav"
            write_wav(out / "target" / name, clean)
            inp_rel = ""
            if paired:
                factor = sample_rate_hz // low_rate_hz
                low = decimate(clean, factor) if scheme == "decimate" else lowpass_decimate(
                    clean, FilterSpec("lowpass", 100, low_rate_hz / 2), factor)
                write_wav(out / "input" / name, low)
                inp_rel = f"input/{name}"
            entries.append(PairEntry(inp_rel, f"target/{name}", f"spk{s:02d}", "synthetic",
                                     clean.duration_s, split))
    manifest = PairManifest(entries, "train", out)
    manifest.write_csv(out / "manifest.csv")
    return manifest


def manifest_from_vctk(root, test_speakers=9, suffix=".wav") -> PairManifest:
    """Pretraining manifest over a VCTK-style ``<root>/<speaker>/<clip>.wav`` tree.

    The last `test_speakers` speakers (sorted) go to the test split.
    """
    root = Path(root)
    speakers = sorted(p for p in root.iterdir() if p.is_dir())
    entries = []
    for i, spk in enumerate(speakers):
        split = "test" if i >= len(speakers) - test_speakers else "train"
        for wav in sorted(spk.glob(f"*{suffix}")):
            sig = read_wav(wav)
            entries.append(PairEntry("", str(wav.relative_to(root)), spk.name, "ota",
                                     sig.duration_s, split))
    return PairManifest(entries, "train", root)
