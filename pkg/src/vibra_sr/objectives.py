"""Training objectives: MAE plus multi-resolution STFT loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class StftResolution:
    fft_bins: int
    hop: int
    window_len: int

    def __post_init__(self):
        if min(self.fft_bins, self.hop, self.window_len) <= 0:
            raise ValueError("STFT parameters must be positive")
        if self.window_len > self.fft_bins:
            raise ValueError("window_len must not exceed fft_bins")
        if self.hop > self.window_len:
            raise ValueError("hop must not exceed window_len")


DEFAULT_RESOLUTIONS = (
    StftResolution(512, 50, 240),
    StftResolution(1024, 120, 600),
    StftResolution(2048, 240, 1200),
)

LOG_FLOOR = 1e-7


@dataclass
class LossReport:
    mae: float
    stft_total: float
    per_resolution: list = field(default_factory=list)
    total: float = 0.0

    CSV_FIELDS = ("mae", "stft_total", "total")

    def as_row(self) -> dict:
        return {"mae": self.mae, "stft_total": self.stft_total, "total": self.total}


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    samples = getattr(x, "samples", x)
    return torch.as_tensor(np.asarray(samples, dtype=np.float64))


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def mae_loss(pred, target) -> torch.Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_pair(pred, target)
    return (pred - target).abs().mean()


def stft_magnitude(x: torch.Tensor, res: StftResolution) -> torch.Tensor:
    """Hann-windowed magnitude spectrogram, (..., bins, frames); no centering."""
    window = torch.hann_window(res.window_len, dtype=x.dtype, device=x.device)
    lead = x.shape[:-1]
    spec = torch.stft(x.reshape(-1, x.shape[-1]), res.fft_bins, hop_length=res.hop,
                      win_length=res.window_len, window=window, center=False,
                      return_complex=True)
    # sqrt(re^2 + im^2 + tiny) keeps the gradient finite at exactly-zero bins
    mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + 1e-30)
    return mag.reshape(*lead, *mag.shape[-2:])


def spectral_convergence(pred_mag, target_mag):
    return torch.linalg.norm(target_mag - pred_mag) / torch.linalg.norm(target_mag)


def log_magnitude_distance(pred_mag, target_mag, eps=LOG_FLOOR):
    return (torch.log(target_mag + eps) - torch.log(pred_mag + eps)).abs().mean()


def multires_stft_loss(pred, target, resolutions=DEFAULT_RESOLUTIONS):
    """Return (stft_total tensor, [(sc, logmag), ...] per resolution)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_pair(pred, target)
    n = pred.shape[-1]
    longest = max(r.window_len for r in resolutions)
    if n < max(r.fft_bins for r in resolutions) or n < longest:
        raise ValueError(f"signal of {n} samples is shorter than the STFT frame")
    parts = []
    total = pred.new_zeros(())
    for res in resolutions:
        pm, tm = stft_magnitude(pred, res), stft_magnitude(target, res)
        sc = spectral_convergence(pm, tm)
        lm = log_magnitude_distance(pm, tm)
        parts.append((sc, lm))
        total = total + sc + lm
    return total / len(resolutions), parts


def training_loss(pred, target, resolutions=DEFAULT_RESOLUTIONS, kind="mae"):
    """Differentiable total loss and its LossReport."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if kind == "mae":
        sample_term = mae_loss(pred, target)
    elif kind == "mse":
        _check_pair(pred, target)
        sample_term = ((pred - target) ** 2).mean()
    else:
        raise ValueError(f"unknown sample loss {kind!r}")
    stft_total, parts = multires_stft_loss(pred, target, resolutions)
    total = sample_term + stft_total
    report = LossReport(
        mae=float(sample_term.detach()),
        stft_total=float(stft_total.detach()),
        per_resolution=[(float(sc.detach()), float(lm.detach())) for sc, lm in parts],
        total=float(total.detach()),
    )
    return total, report
