"""Plot-ready CSV output: loss curves, metric-vs-rate sweeps, spectrogram grids."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .budget import POWER_TABLE, data_rate
from .datasets import make_pretrain_pair
from .dsp import AudioSignal, read_wav
from .metrics import LSD_RESOLUTION, MetricError, lsd, magnitude_spectrogram, snr, stoi

SWEEP_RATES = (500, 1000, 2000, 4000)


class ReportError(ValueError):
    pass


def loss_curve_rows(train_log: Path) -> list:
    with Path(train_log).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_rows(path, rows, fieldnames):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def spectrogram_grid(sig: AudioSignal, path, res=LSD_RESOLUTION):
    """Write a log-magnitude grid: one row per frame, one column per frequency bin."""
    frame = magnitude_spectrogram(sig.samples, res, sig.sample_rate_hz)
    grid = 20 * np.log10(np.maximum(frame.X, 1e-7))
    header = ",".join(f"{k * frame.bin_hz:.1f}" for k in range(grid.shape[1]))
    np.savetxt(path, grid, delimiter=",", header=header, comments="", fmt="%.3f")
    return Path(path)


def rate_sweep(clean: AudioSignal, enhancer=None, rates=SWEEP_RATES, scheme="decimate") -> list:
    """Metrics of (optionally enhanced) low-rate inputs against `clean`, per sampling rate."""
    power = {p.sample_rate_hz: p.power_mw for p in POWER_TABLE}
    rows = []
    for rate in rates:
        inp, target = make_pretrain_pair(clean, rate, scheme)
        out = enhancer(inp) if enhancer is not None else inp
        try:
            s = stoi(target, out)
        except MetricError:
            s = ""
        rows.append({
            "sample_rate_hz": rate,
            "data_rate_kbps": data_rate(rate),
            "power_mw": power.get(rate, ""),
            "lsd": lsd(target, out),
            "snr_db": snr(target, out),
            "stoi": s,
        })
    return rows


SWEEP_FIELDS = ("sample_rate_hz", "data_rate_kbps", "power_mw", "lsd", "snr_db", "stoi")


def emit_plots_csv(run_dir) -> list:
    """Write plot-ready CSVs for everything found in `run_dir`; returns written paths."""
    run = Path(run_dir)
    if not run.is_dir():
        raise ReportError(f"{run} is not a directory")
    written = []
    log = run / "train_log.csv"
    if log.exists():
        rows = loss_curve_rows(log)
        written.append(write_rows(run / "loss_curve.csv", rows,
                                  ["epoch", "total", "mae", "stft_total", "val_total"]))
    sweep = run / "sweep.csv"
    if sweep.exists():
        written.append(sweep)
    for wav in sorted(run.glob("*.wav")):
        sig = read_wav(wav)
        if len(sig) >= LSD_RESOLUTION.window_len:
            written.append(spectrogram_grid(sig, run / f"spectrogram_{wav.stem}.csv"))
    if not written:
        raise ReportError(f"{run} contains no training logs, sweeps or audio to plot")
    return written
