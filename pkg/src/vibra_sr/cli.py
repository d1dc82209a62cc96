"""Command-line entry point: ``vibra-sr <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from . import budget as budget_mod
from .datasets import ManifestError, PairManifest, make_synthetic_corpus, manifest_from_vctk
from .dsp import SignalError, read_wav, upsample_to_grid, write_wav
from .metrics import MetricError, evaluate
from .model import ABLATIONS, ConfigError, ModelConfig, build_ablation, count_parameters, parameter_breakdown
from .reporting import SWEEP_FIELDS, ReportError, emit_plots_csv, rate_sweep, write_rows
from .training import (TrainConfig, TrainingError, enhance, enhance_grid, finetune, load_checkpoint,
                       pretrain, save_checkpoint)

log = logging.getLogger("vibra_sr")

COMMANDS = ("prepare", "pretrain", "finetune", "enhance", "evaluate", "ablate", "budget", "sweep", "plots")
SECTIONS = {"model": ModelConfig, "train": TrainConfig}


class UsageError(ValueError):
    pass


# --- configuration ----------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {"model": {}, "train": {}}
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return {s: dict(raw.get(s) or {}) for s in SECTIONS}


def apply_overrides(conf: dict, overrides) -> dict:
    """Apply ``section.key=value`` (or unambiguous ``key=value``) overrides."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if "." in key:
            section, name = key.split(".", 1)
        else:
            owners = [s for s, cls in SECTIONS.items() if name_in(cls, key)]
            if len(owners) != 1:
                raise ConfigError(f"override key {key!r} is unknown or ambiguous")
            section, name = owners[0], key
        if section not in SECTIONS or not name_in(SECTIONS[section], name):
            raise ConfigError(f"unknown config key {key!r}")
        conf[section][name] = value
    return conf


def name_in(cls, name):
    return name in {f.name for f in fields(cls)}


def resolve(args) -> tuple:
    conf = apply_overrides(load_config(args.config), args.set)
    if args.seed is not None:
        conf["train"]["seed"] = args.seed
    model_cfg = ModelConfig.from_dict(conf["model"])
    return model_cfg, conf


def write_snapshot(out: Path, conf: dict, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    snap = {k: dict(v) for k, v in conf.items()}
    if extra:
        snap["run"] = extra
    with (out / "resolved_config.yaml").open("w") as fh:
        yaml.safe_dump(snap, fh, sort_keys=True)


def _train_cfg(conf, phase) -> TrainConfig:
    d = dict(conf["train"])
    d["phase"] = phase
    return TrainConfig.from_dict(d)


# --- commands ---------------------------------------------------------------

def cmd_prepare(args, conf, model_cfg):
    out = Path(args.out)
    if args.vctk:
        manifest = manifest_from_vctk(args.vctk)
        out.mkdir(parents=True, exist_ok=True)
        manifest.write_csv(out / "manifest.csv")
    else:
        tc = _train_cfg(conf, "pretrain")
        manifest = make_synthetic_corpus(out, args.speakers, args.clips, args.duration,
                                         seed=tc.seed, sample_rate_hz=tc.target_rate_hz,
                                         low_rate_hz=tc.low_rate_hz, scheme=tc.scheme,
                                         paired=not args.unpaired)
    write_snapshot(out, conf, {"command": "prepare", "entries": len(manifest)})
    print(f"wrote {len(manifest)} entries to {out / 'manifest.csv'}")


def _write_history(out: Path, state):
    write_rows(out / "loss_curve.csv", state.history, ["epoch", "total", "mae", "stft_total", "val_total", "wall_s"])


def cmd_pretrain(args, conf, model_cfg):
    out = Path(args.out)
    manifest = PairManifest.read_csv(args.manifest).validate()
    tc = _train_cfg(conf, "pretrain")
    write_snapshot(out, {"model": model_cfg.to_dict(), "train": tc.to_dict()}, {"command": "pretrain"})
    _, state = pretrain(model_cfg, manifest, tc, out)
    _write_history(out, state)
    print(f"pretrained {state.epoch} epochs, best loss {state.best_val_loss:.5f}, checkpoint {out / 'best.pt'}")


def cmd_finetune(args, conf, model_cfg):
    out = Path(args.out)
    manifest = PairManifest.read_csv(args.manifest).validate()
    tc = _train_cfg(conf, "finetune")
    expected = model_cfg if conf["model"] else None
    write_snapshot(out, {"model": conf["model"], "train": tc.to_dict()},
                   {"command": "finetune", "checkpoint": str(args.checkpoint)})
    model, state = finetune(args.checkpoint, manifest, tc, out, expected_cfg=expected)
    if state.history:
        _write_history(out, state)
        for row in state.history:
            print(f"epoch {row['epoch']}: total={row['total']:.5f} wall_s={row['wall_s']:.3f}")
    else:
        save_checkpoint(out / "last.pt", model, state.step, state.epoch, tc.seed, tc)
    print(f"fine-tuned to epoch {state.epoch}")


def cmd_enhance(args, conf, model_cfg):
    out = Path(args.out)
    write_snapshot(out, conf, {"command": "enhance", "checkpoint": str(args.checkpoint),
                               "input": str(args.input), "target_rate_hz": args.target_rate})
    sig = read_wav(args.input)
    result = enhance(args.checkpoint, sig, args.target_rate)
    dest = out / (Path(args.input).stem + "_enhanced.wav")
    write_wav(dest, result)
    print(f"wrote {dest}")


def cmd_evaluate(args, conf, model_cfg):
    out = Path(args.out)
    write_snapshot(out, conf, {"command": "evaluate"})
    pairs = []
    if args.manifest:
        m = PairManifest.read_csv(args.manifest).validate()
        pairs = [(m.resolve(e.target_path), m.resolve(e.input_path)) for e in m.entries]
    elif args.ref and args.test:
        pairs = [(Path(args.ref), Path(args.test))]
    else:
        raise UsageError("evaluate needs REF TEST paths or --manifest")
    rows = []
    for ref_path, test_path in pairs:
        ref, test = read_wav(ref_path), read_wav(test_path)
        if test.sample_rate_hz != ref.sample_rate_hz:
            test = upsample_to_grid(test, ref.sample_rate_hz, "spline")
        n = min(len(ref), len(test))
        rep = evaluate(ref.with_samples(ref.samples[:n]), test.with_samples(test.samples[:n]),
                       ref_path, test_path)
        row = rep.to_dict()
        row["ref"], row["test"] = str(ref_path), str(test_path)
        rows.append(row)
        print(f"{test_path}: snr_db={row['snr_db']} lsd={row['lsd']:.6f} stoi={row['stoi']} "
              f"pesq={row['pesq']}")
    write_rows(out / "metrics.csv", rows, ["ref", "test", "snr_db", "lsd", "stoi", "pesq", "notes"])
    (out / "metrics.json").write_text(json.dumps(rows, indent=2))


def cmd_ablate(args, conf, model_cfg):
    out = Path(args.out)
    write_snapshot(out, {"model": model_cfg.to_dict(), "train": conf["train"]}, {"command": "ablate"})
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = []
    for v in variants:
        cfg = build_ablation(model_cfg, v)
        rows.append({"variant": v, "parameters": count_parameters(cfg),
                     "millions": round(count_parameters(cfg) / 1e6, 3),
                     "breakdown": json.dumps(parameter_breakdown(cfg))})
    print(f"{'variant':<32}{'parameters':>12}{'M':>9}")
    for r in rows:
        print(f"{r['variant']:<32}{r['parameters']:>12}{r['millions']:>9.3f}")
    write_rows(out / "ablation.csv", rows, ["variant", "parameters", "millions", "breakdown"])


def cmd_budget(args, conf, model_cfg):
    out = Path(args.out)
    write_snapshot(out, conf, {"command": "budget", "rate": args.rate})
    latency = None
    if args.checkpoint:
        latency = budget_mod.measure_inference_latency(args.checkpoint).median_ms
    rep = budget_mod.budget_report(args.rate, latency_ms=latency)
    slope, intercept = rep.fitted_model
    print(f"{'rate_hz':>8}{'kbps':>8}{'power_mw':>10}{'fit_mw':>9}")
    for p in budget_mod.POWER_TABLE:
        print(f"{p.sample_rate_hz:>8}{p.data_rate_kbps:>8.0f}{p.power_mw:>10.2f}"
              f"{budget_mod.predict_power(p.data_rate_kbps, rep.fitted_model):>9.2f}")
    print(f"fit: power_mw = {slope:.5f} * kbps + {intercept:.4f}")
    print(f"operating point: {args.rate} Hz -> {rep.operating_data_rate_kbps:g} kbps")
    print(f"battery improvement vs 16 kHz: {rep.battery_improvement_pct:.1f}%")
    if latency is not None:
        print(f"latency per 512 ms window: {latency:.2f} ms (real_time={rep.real_time})")
    (out / "budget.json").write_text(rep.to_json())


def cmd_sweep(args, conf, model_cfg):
    out = Path(args.out)
    write_snapshot(out, conf, {"command": "sweep", "clip": str(args.clip)})
    clean = read_wav(args.clip)
    enhancer = None
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)[0]
        enhancer = lambda sig: sig.with_samples(enhance_grid(model, sig.samples))
    rates = [int(r) for r in args.rates.split(",")]
    rows = rate_sweep(clean, enhancer, rates)
    write_rows(out / "sweep.csv", rows, SWEEP_FIELDS)
    for r in rows:
        print(", ".join(f"{k}={r[k]}" for k in SWEEP_FIELDS))


def cmd_plots(args, conf, model_cfg):
    for p in emit_plots_csv(args.run_dir):
        print(p)


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON file with 'model' and 'train' sections")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. model.safilm_blocks=4")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/latest")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vibra-sr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="build a manifest (synthetic corpus or VCTK tree)")
    s.add_argument("--vctk", help="VCTK-style root: <root>/<speaker>/*.wav")
    s.add_argument("--speakers", type=int, default=4)
    s.add_argument("--clips", type=int, default=3)
    s.add_argument("--duration", type=float, default=5.0)
    s.add_argument("--unpaired", action="store_true", help="leave inputs blank (pretraining mode)")

    s = sub.add_parser("pretrain", parents=[common])
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("finetune", parents=[common])
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("enhance", parents=[common])
    s.add_argument("--checkpoint", required=True)
    s.add_argument("input")
    s.add_argument("--target-rate", type=int, default=16000)

    s = sub.add_parser("evaluate", parents=[common])
    s.add_argument("ref", nargs="?")
    s.add_argument("test", nargs="?")
    s.add_argument("--manifest", help="manifest whose target is the reference and input the test")

    s = sub.add_parser("ablate", parents=[common])
    s.add_argument("--variants", default=",".join(ABLATIONS))

    s = sub.add_parser("budget", parents=[common])
    s.add_argument("--rate", type=int, default=4000)
    s.add_argument("--checkpoint", help="also measure per-window inference latency")

    s = sub.add_parser("sweep", parents=[common], help="metrics vs input sampling rate")
    s.add_argument("clip", help="clean reference WAV")
    s.add_argument("--checkpoint")
    s.add_argument("--rates", default="500,1000,2000,4000")

    s = sub.add_parser("plots", parents=[common], help="emit plot-ready CSVs for a run directory")
    s.add_argument("run_dir")
    return p


HANDLERS = {
    "prepare": cmd_prepare, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "enhance": cmd_enhance, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "budget": cmd_budget, "sweep": cmd_sweep, "plots": cmd_plots,
}

CONFIG_ERRORS = (ConfigError, UsageError, ReportError, ManifestError, FileNotFoundError)


def _fail(code, exc):
    msg = str(exc).replace("\n", " ")
    print(f"error code={code} kind={type(exc).__name__} message={json.dumps(msg)}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        model_cfg, conf = resolve(args)
        HANDLERS[args.command](args, conf, model_cfg)
    except CONFIG_ERRORS as exc:
        return _fail(2, exc)
    except (TrainingError, SignalError, MetricError, RuntimeError, ValueError, OSError) as exc:
        return _fail(1, exc)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
