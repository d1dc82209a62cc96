"""Sampling-rate, data-rate and power budget of the wearable link, plus latency."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .training import load_checkpoint


@dataclass(frozen=True)
class RatePowerPoint:
    sample_rate_hz: int
    data_rate_kbps: float
    power_mw: float


# Measured power while sampling and streaming 16-bit sensor data over the radio.
POWER_TABLE = (
    RatePowerPoint(500, 8.0, 2.49),
    RatePowerPoint(1000, 16.0, 2.58),
    RatePowerPoint(2000, 32.0, 2.75),
    RatePowerPoint(4000, 64.0, 3.21),
    RatePowerPoint(8000, 128.0, 4.09),
    RatePowerPoint(16000, 256.0, 6.48),
)
REFERENCE_RATE_HZ = 16000


@dataclass
class BudgetReport:
    points: list
    fitted_model: tuple
    residuals_mw: list
    battery_improvement_pct: float
    operating_rate_hz: int
    operating_data_rate_kbps: float
    inference_ms_per_window: float | None = None
    real_time: bool | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fitted_model"] = {"slope_mw_per_kbps": self.fitted_model[0],
                             "intercept_mw": self.fitted_model[1]}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def data_rate(sample_rate_hz, bits_per_sample=16) -> float:
    if sample_rate_hz <= 0 or bits_per_sample <= 0:
        raise ValueError("sample rate and bit depth must be positive")
    return sample_rate_hz * bits_per_sample / 1000.0


def fit_power_model(points=POWER_TABLE):
    """Least-squares affine fit power = slope * kbps + intercept.

    Returns ``(slope, intercept, residuals)``.
    """
    points = list(points)
    if len(points) < 2:
        raise ValueError("need at least two points to fit")
    x = np.array([p.data_rate_kbps for p in points], dtype=np.float64)
    y = np.array([p.power_mw for p in points], dtype=np.float64)
    if np.ptp(x) == 0:
        raise ValueError("degenerate fit: all points share one data rate")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(slope), float(intercept), (y - (slope * x + intercept)).tolist()


def predict_power(data_rate_kbps, model) -> float:
    slope, intercept = model[0], model[1]
    return slope * data_rate_kbps + intercept


def _power_at(rate_hz, table):
    for p in table:
        if p.sample_rate_hz == rate_hz:
            return p.power_mw
    raise KeyError(f"{rate_hz} Hz is not in the power table")


def battery_improvement(low_rate_hz, ref_rate_hz=REFERENCE_RATE_HZ, table=POWER_TABLE) -> float:
    """Percent battery-life gain of sampling at `low_rate_hz` instead of `ref_rate_hz`."""
    p_low = _power_at(low_rate_hz, table)
    p_ref = _power_at(ref_rate_hz, table)
    return 100.0 * (p_ref - p_low) / p_low


def budget_report(rate_hz=4000, bits_per_sample=16, table=POWER_TABLE, latency_ms=None) -> BudgetReport:
    slope, intercept, resid = fit_power_model(table)
    return BudgetReport(
        points=[asdict(p) for p in table],
        fitted_model=(slope, intercept),
        residuals_mw=resid,
        battery_improvement_pct=battery_improvement(rate_hz, table=table),
        operating_rate_hz=rate_hz,
        operating_data_rate_kbps=data_rate(rate_hz, bits_per_sample),
        inference_ms_per_window=latency_ms,
        real_time=None if latency_ms is None else latency_ms < 512.0,
    )


@dataclass
class LatencyResult:
    median_ms: float
    samples_ms: list = field(default_factory=list)
    window_ms: float = 512.0

    @property
    def real_time(self) -> bool:
        return self.median_ms < self.window_ms

    @property
    def cv(self) -> float:
        m = statistics.fmean(self.samples_ms)
        return statistics.pstdev(self.samples_ms) / m if m else 0.0


def measure_inference_latency(model, window_len=8192, sample_rate_hz=16000, runs=20, warmup=3) -> LatencyResult:
    """Median wall-clock time of a single-window forward pass."""
    if not isinstance(model, torch.nn.Module):
        model = load_checkpoint(model)[0]
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.zeros(1, window_len, dtype=dtype)
    times = []
    with torch.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            model(x)
            dt = (time.perf_counter() - t0) * 1000.0
            if i >= warmup:
                times.append(dt)
    return LatencyResult(statistics.median(times), times, 1000.0 * window_len / sample_rate_hz)
