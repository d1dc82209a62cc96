"""Pretraining / fine-tuning loops, checkpoints and windowed enhancement."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .datasets import PairManifest, window_arrays
from .dsp import AudioSignal, TailPolicy, WindowingPlan, frame_array, overlap_add, upsample_to_grid
from .model import ConfigError, HybridUNet, ModelConfig
from .objectives import DEFAULT_RESOLUTIONS, LossReport, training_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "mae", "stft_total", "total", "val_total", "wall_s")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-4
    seed: int = 0
    phase: str = "pretrain"
    max_wall_minutes: float | None = None
    grad_clip: float = 5.0
    loss_kind: str = "mae"
    target_rate_hz: int = 16000
    low_rate_hz: int = 4000
    scheme: str = "decimate"
    window_s: float = 0.512
    overlap: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be pretrain or finetune, got {self.phase!r}")
        # a zero-epoch fine-tune is a no-op and allowed; pretraining needs >= 1
        min_epochs = 0 if self.phase == "finetune" else 1
        if int(self.epochs) != self.epochs or self.epochs < min_epochs:
            raise ConfigError(f"epochs must be an integer >= {min_epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_wall_minutes is not None and self.max_wall_minutes <= 0:
            raise ConfigError("max_wall_minutes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.target_rate_hz % self.low_rate_hz:
            raise ConfigError("low_rate_hz must divide target_rate_hz")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def plan(self, tail_policy="drop") -> WindowingPlan:
        return WindowingPlan.from_duration(self.target_rate_hz, self.window_s, self.overlap, tail_policy)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    rng_state: object = None
    model_checkpoint_ref: str | None = None
    history: list = field(default_factory=list)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: HybridUNet, step=0, epoch=0, seed=0, train_cfg: TrainConfig | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "vibra-sr-checkpoint/1",
        "config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "step": int(step),
        "epoch": int(epoch),
        "seed": int(seed),
        "train_config": train_cfg.to_dict() if train_cfg else None,
    }, path)
    return path


def load_checkpoint(path):
    """Return (model, metadata) from a checkpoint written by `save_checkpoint`."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != "vibra-sr-checkpoint/1":
        raise ConfigError(f"{path}: not a vibra-sr checkpoint")
    cfg = ModelConfig.from_dict(blob["config"])
    model = HybridUNet(cfg).to(getattr(torch, blob.get("dtype", "float32")))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = {k: blob[k] for k in ("step", "epoch", "seed", "train_config")}
    return model, meta


def config_diff(a: ModelConfig, b: ModelConfig) -> list:
    da, db = a.to_dict(), b.to_dict()
    return [k for k in da if da[k] != db[k]]


# --- core loop --------------------------------------------------------------

def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def _evaluate_loss(model, X, Y, batch_size, dtype):
    if X is None or len(X) == 0:
        return None
    model.eval()
    totals = []
    with torch.no_grad():
        for i in range(0, len(X), batch_size):
            xb = torch.as_tensor(X[i:i + batch_size], dtype=dtype)
            yb = torch.as_tensor(Y[i:i + batch_size], dtype=dtype)
            _, rep = training_loss(model(xb), yb, kind="mae")
            totals.append((rep.total, len(xb)))
    model.train()
    return sum(t * n for t, n in totals) / sum(n for _, n in totals)


def fit_windows(model: HybridUNet, X, Y, cfg: TrainConfig, X_val=None, Y_val=None,
                out_dir=None, state: TrainState | None = None,
                resolutions=DEFAULT_RESOLUTIONS) -> TrainState:
    """Train `model` in place on aligned window arrays of shape (n, window_len)."""
    state = state or TrainState()
    if len(X) == 0 and cfg.epochs > 0:
        raise TrainingError("no training windows")
    dtype = cfg.torch_dtype
    model.to(dtype).train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir else None
    log_fh = writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "train_log.csv").open("w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    started = time.perf_counter()
    X_t = torch.as_tensor(np.asarray(X), dtype=dtype)
    Y_t = torch.as_tensor(np.asarray(Y), dtype=dtype)
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_wall_minutes and (time.perf_counter() - started) / 60 >= cfg.max_wall_minutes:
                log.info("wall-clock budget reached after %d epochs", epoch)
                break
            t0 = time.perf_counter()
            order = torch.randperm(len(X_t), generator=gen)
            sums = np.zeros(3)
            for bi, i in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[i:i + cfg.batch_size]
                where = f"step {state.step} (epoch {state.epoch + 1}, batch {bi})"
                try:
                    pred = model(X_t[idx])
                except FloatingPointError as exc:
                    raise TrainingError(f"non-finite activations at {where}: {exc}") from exc
                loss, rep = training_loss(pred, Y_t[idx], resolutions, kind=cfg.loss_kind)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at {where}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                state.step += 1
                sums += np.array([rep.mae, rep.stft_total, rep.total]) * len(idx)
            state.epoch += 1
            mae, stft_total, total = sums / len(X_t)
            val_total = _evaluate_loss(model, X_val, Y_val, cfg.batch_size, dtype)
            row = {"step": state.step, "epoch": state.epoch, "mae": mae, "stft_total": stft_total,
                   "total": total, "val_total": val_total if val_total is not None else "",
                   "wall_s": time.perf_counter() - t0}
            state.history.append(row)
            if writer:
                writer.writerow(row)
                log_fh.flush()
            score = val_total if val_total is not None else total
            if score < state.best_val_loss:
                state.best_val_loss = score
                if out:
                    state.model_checkpoint_ref = str(save_checkpoint(
                        out / "best.pt", model, state.step, state.epoch, cfg.seed, cfg))
            log.info("epoch %d total=%.5f val=%s", state.epoch, total, val_total)
    finally:
        if log_fh:
            log_fh.close()
    if out:
        save_checkpoint(out / "last.pt", model, state.step, state.epoch, cfg.seed, cfg)
    state.rng_state = gen.get_state()
    model.eval()
    return state


def _manifest_windows(manifest: PairManifest, cfg: TrainConfig, split: str):
    sub = manifest.subset(split)
    if not len(sub):
        return None, None
    return window_arrays(sub, cfg.plan("drop"), target_rate_hz=cfg.target_rate_hz,
                         low_rate_hz=cfg.low_rate_hz, scheme=cfg.scheme)


def pretrain(model_cfg: ModelConfig, data: PairManifest, cfg: TrainConfig, out_dir=None,
             model: HybridUNet | None = None):
    """Train from scratch on (downsampled clean, clean) pairs; returns (model, state)."""
    seed_everything(cfg.seed)
    model = model or HybridUNet(model_cfg)
    X, Y = _manifest_windows(data, cfg, "train")
    if X is None:
        raise TrainingError("manifest has no training entries")
    Xv, Yv = _manifest_windows(data, cfg, "val")
    state = fit_windows(model, X, Y, cfg, Xv, Yv, out_dir)
    return model, state


def finetune(checkpoint, user_pairs: PairManifest, cfg: TrainConfig, out_dir=None,
             expected_cfg: ModelConfig | None = None):
    """Full fine-tune of a pretrained checkpoint on a small paired set; returns (model, state)."""
    model, meta = load_checkpoint(checkpoint)
    if expected_cfg is not None:
        diff = config_diff(expected_cfg, model.cfg)
        if diff:
            raise ConfigError(f"checkpoint architecture differs in fields: {', '.join(diff)}")
    if not len(user_pairs):
        raise TrainingError("fine-tuning needs at least one paired entry")
    state = TrainState(step=meta["step"], epoch=meta["epoch"],
                       model_checkpoint_ref=str(checkpoint))
    if cfg.epochs == 0:
        return model, state
    seed_everything(cfg.seed)
    for p in model.parameters():
        p.requires_grad_(True)
    X, Y = _manifest_windows(user_pairs, cfg, "train")
    Xv, Yv = _manifest_windows(user_pairs, cfg, "val")
    state = fit_windows(model, X, Y, cfg, Xv, Yv, out_dir, state)
    return model, state


# --- inference --------------------------------------------------------------

def _as_model(model_or_ckpt):
    if isinstance(model_or_ckpt, HybridUNet):
        return model_or_ckpt
    return load_checkpoint(model_or_ckpt)[0]


def run_windows(model: HybridUNet, frames: np.ndarray, batch_size=8) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            outs.append(model(torch.as_tensor(frames[i:i + batch_size], dtype=dtype)).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0, frames.shape[1]))


def inference_plan(sample_rate_hz=16000, window_s=0.512, overlap=0.5) -> WindowingPlan:
    return WindowingPlan.from_duration(sample_rate_hz, window_s, overlap, TailPolicy.ZERO_PAD)


def enhance_grid(model, x: np.ndarray, plan: WindowingPlan | None = None, batch_size=8) -> np.ndarray:
    """Enhance a signal already on the target grid with Hann cross-faded overlap-add."""
    model = _as_model(model)
    x = np.asarray(x, dtype=np.float64)
    plan = plan or inference_plan()
    frames = frame_array(x, plan)
    return overlap_add(run_windows(model, frames, batch_size), plan, x.shape[0])


def enhance(model_or_ckpt, sig: AudioSignal, target_rate_hz=16000, method="spline",
            plan: WindowingPlan | None = None, batch_size=8) -> AudioSignal:
    """Lift `sig` onto the target grid, run the model per window and overlap-add."""
    model = _as_model(model_or_ckpt)
    grid = upsample_to_grid(sig, target_rate_hz, method)
    plan = plan or inference_plan(target_rate_hz)
    return grid.with_samples(enhance_grid(model, grid.samples, plan, batch_size))


class StreamingEnhancer:
    """Chunk-fed enhancer producing the same output as `enhance_grid`.

    Each window runs through the model as soon as its grid samples have
    arrived; the cross-faded signal is assembled by `flush`.
    """

    def __init__(self, model, plan: WindowingPlan | None = None):
        self.model = _as_model(model)
        self.plan = plan or inference_plan()
        self._buf = np.zeros(0)
        self._consumed = 0          # absolute index of _buf[0]
        self._next_start = 0
        self._frames = []

    def push(self, chunk) -> None:
        self._buf = np.concatenate([self._buf, np.asarray(chunk, dtype=np.float64)])
        win = self.plan.window_len_samples
        while self._next_start + win <= self._consumed + len(self._buf):
            rel = self._next_start - self._consumed
            frame = self._buf[rel:rel + win]
            self._frames.append(run_windows(self.model, frame[None])[0])
            self._next_start += self.plan.hop_samples
            drop = self._next_start - self._consumed
            self._buf = self._buf[drop:]
            self._consumed = self._next_start

    def flush(self) -> np.ndarray:
        """Finish the stream; returns the enhanced signal for everything pushed."""
        total = self._consumed + len(self._buf)
        win, hop = self.plan.window_len_samples, self.plan.hop_samples
        n_expected = len(frame_array(np.zeros(total), self.plan))
        while len(self._frames) < n_expected:
            rel = self._next_start - self._consumed
            frame = np.zeros(win)
            tail = self._buf[rel:rel + win]
            frame[:len(tail)] = tail
            self._frames.append(run_windows(self.model, frame[None])[0])
            self._next_start += hop
        frames = np.stack(self._frames) if self._frames else np.zeros((0, win))
        return overlap_add(frames, self.plan, total)
