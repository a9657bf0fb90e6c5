"""Command-line front end: ``edora <command> [--config FILE] [--key value ...]``.

Commands: synth, pretrain, finetune, eval, ablate, params. Results land under
``--out`` (or ``$EDORA_OUT``, default ``runs``) in one directory per command.
Result files are deterministic; wall-clock timestamps only go to ``run.log``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_adapters, load_model, save_adapters, save_model
from .config import RunConfig, load_config
from .metrics import EvalReport, evaluate
from .model import ConfigError, Model, build, check_compatible, inject_adapters
from .numerics import DimensionError
from .signal import (
    SignalConfigError,
    TrialSet,
    TrialSetFormatError,
    butterworth_bandpass,
    load_manifest,
    load_trialset,
    save_trialset,
    synth_generate,
    zscore,
)
from .train import (
    FreezePolicy,
    finetune,
    holdout_split,
    param_report,
    pretrain,
)

log = logging.getLogger("edora")

COMMANDS = ("synth", "pretrain", "finetune", "eval", "ablate", "params")


# ---------------------------------------------------------------------------
# run directory plumbing


@contextmanager
def _run_dir(path: Path, cfg: RunConfig):
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.cfg").write_text(cfg.to_text())
    handler = logging.FileHandler(path / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        yield path
    finally:
        log.removeHandler(handler)
        handler.close()


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _write_report(path: Path, report: EvalReport) -> None:
    (path / "report.txt").write_text(report.to_text())
    (path / "report.jsonl").write_text(report.to_json() + "\n")
    (path / "confusion.csv").write_text(report.confusion_csv())


# ---------------------------------------------------------------------------
# data


def _read_dataset(path: str) -> TrialSet:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"dataset not found: {p}")
    with p.open("rb") as fh:
        head = fh.read(4)
    return load_trialset(p) if head == b"EDTS" else load_manifest(p)


def _synth(cfg: RunConfig, which: str) -> TrialSet:
    shift = 0.0 if which == "source" else cfg.synth_shift
    seed = cfg.synth_seed if which == "source" else cfg.synth_seed + 1
    return synth_generate(cfg.synth_classes, cfg.synth_channels, cfg.synth_trials, cfg.synth_rate,
                          cfg.synth_window, shift, seed=seed, amplitude=cfg.synth_amplitude)


def _condition(ts: TrialSet, cfg: RunConfig) -> TrialSet:
    data = butterworth_bandpass(ts.data, ts.rate_hz, cfg.band_low, cfg.band_high, cfg.band_order)
    return TrialSet(zscore(data), ts.labels, ts.class_names, ts.rate_hz, dict(ts.meta))


def load_domain(cfg: RunConfig, which: str) -> TrialSet:
    path = cfg.source if which == "source" else cfg.target
    ts = _read_dataset(path) if path else _synth(cfg, which)
    return _condition(ts, cfg)


def _split(cfg: RunConfig, ts: TrialSet, seed: int) -> tuple[TrialSet, TrialSet]:
    tr, ho = holdout_split(ts.labels, cfg.holdout_fraction, seed, cfg.split)
    return ts.subset(tr), ts.subset(ho)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> Path:
    out = cfg.out_root() / "synth"
    with _run_dir(out, cfg):
        for which in ("source", "target"):
            ts = _synth(cfg, which)
            save_trialset(ts, out / f"{which}.edts")
            log.info("wrote %s: %d trials x %d channels x %d samples", which, len(ts),
                     ts.channels, ts.samples)
    return out


def _pretrained_path(cfg: RunConfig) -> Path:
    return Path(cfg.pretrained) if cfg.pretrained else cfg.out_root() / "pretrain" / "model.edck"


def cmd_pretrain(cfg: RunConfig) -> Path:
    source = load_domain(cfg, "source")
    model = build(cfg.model_config(source.channels, source.samples, source.num_classes), cfg.seed)
    out = cfg.out_root() / "pretrain"
    with _run_dir(out, cfg):
        log.info("pretraining %d parameters on %d trials", model.num_parameters(), len(source))
        model, history = pretrain(model, source, cfg.optim("pretrain"), cfg.holdout_fraction,
                                  cfg.seed, cfg.split)
        _write_jsonl(out / "history.jsonl", history)
        save_model(out / "model.edck", model)
        if history:
            log.info("final epoch %s", history[-1])
    return out


def _load_pretrained(cfg: RunConfig) -> Model:
    path = _pretrained_path(cfg)
    if not path.is_file():
        raise FileNotFoundError(f"pretrained checkpoint not found: {path}")
    return load_model(path)


def _policy(cfg: RunConfig) -> FreezePolicy:
    mode = "full_finetune" if cfg.method == "full" else "adapters_only"
    return FreezePolicy(mode, cfg.fresh_prefixes())


def _finetune_into(out: Path, cfg: RunConfig, pretrained: Model, target: TrialSet) -> EvalReport:
    spec = cfg.adapter_spec()
    train_set, holdout = _split(cfg, target, cfg.seed)
    result = finetune(pretrained, train_set, spec, _policy(cfg), cfg.optim("finetune"),
                      targets=cfg.target_list(), seed=cfg.seed, holdout=holdout)
    _write_jsonl(out / "history.jsonl", result.history)
    (out / "param_report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    save_model(out / "model.edck", result.model, {"method": cfg.method})
    if spec is not None:
        save_adapters(out / "adapters.edck", result.model, spec)
    report = evaluate(result.model, holdout)
    _write_report(out, report)
    log.info("holdout accuracy %.4f kappa %.4f", report.accuracy, report.kappa)
    return report


def cmd_finetune(cfg: RunConfig) -> Path:
    spec = cfg.adapter_spec()
    pretrained = _load_pretrained(cfg)
    if spec is not None:
        check_compatible(pretrained.config, spec)
    target = load_domain(cfg, "target")
    out = cfg.out_root() / "finetune" / cfg.method
    with _run_dir(out, cfg):
        log.info("fine-tuning with method %s", cfg.method)
        _finetune_into(out, cfg, pretrained, target)
    return out


def _load_finetuned(path: Path) -> Model:
    model_path = path / "model.edck"
    if not model_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {model_path}")
    model = load_model(model_path)
    if (path / "adapters.edck").is_file():
        model = load_adapters(path / "adapters.edck", model)
    return model


def cmd_eval(cfg: RunConfig) -> Path:
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else cfg.out_root() / "finetune" / cfg.method
    model = _load_finetuned(ckpt)
    if cfg.data:
        ts = _condition(_read_dataset(cfg.data), cfg)
    else:
        ts = _split(cfg, load_domain(cfg, "target"), cfg.seed)[1]
    out = cfg.out_root() / "eval"
    with _run_dir(out, cfg):
        report = evaluate(model, ts)
        _write_report(out, report)
        log.info("accuracy %.4f on %d trials", report.accuracy, report.n)
    return out


def ablation_cells(cfg: RunConfig, tokens: int) -> list[tuple[int, int]]:
    ranks, segs = cfg.int_list("ranks"), cfg.int_list("segment_list")
    if not ranks or not segs:
        raise ConfigError("ablation needs at least one rank and one segment count")
    cells, bad = [], []
    for r in ranks:
        for n in segs:
            reasons = []
            if r < 1 or n < 1:
                reasons.append("rank and segments must be positive")
            elif r % n:
                reasons.append(f"rank {r} not divisible by {n}")
            if n >= 1 and tokens % n:
                reasons.append(f"{tokens} tokens not divisible by {n}")
            if cfg.method in ("lora", "dora") and n != 1:
                reasons.append(f"{cfg.method} takes a single segment")
            if reasons:
                bad.append(f"(r={r}, n={n}): " + "; ".join(reasons))
            else:
                cells.append((r, n))
    if bad:
        raise ConfigError("invalid ablation cells: " + " | ".join(bad))
    return cells


def summarize(rows: list[dict]) -> list[dict]:
    """Per-cell mean and sample standard deviation of accuracy over seeds."""
    cells: dict[tuple[int, int], list[float]] = {}
    for row in rows:
        cells.setdefault((row["rank"], row["segments"]), []).append(row["accuracy"])
    out = []
    for (r, n), accs in sorted(cells.items()):
        a = np.asarray(accs)
        sd = float(a.std(ddof=1)) if a.size > 1 else float("nan")
        out.append({"rank": r, "segments": n, "seeds": int(a.size),
                    "accuracy_mean": float(a.mean()), "accuracy_sd": sd})
    return out


def cmd_ablate(cfg: RunConfig) -> Path:
    if cfg.method not in ("lora", "dora", "edora"):
        raise ConfigError("ablation grid needs an adapter method (lora, dora or edora)")
    pretrained = _load_pretrained(cfg)
    cells = ablation_cells(cfg, pretrained.config.tokens)
    seeds = cfg.int_list("seeds")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    target = load_domain(cfg, "target")
    out = cfg.out_root() / "ablate"
    rows = []
    with _run_dir(out, cfg):
        for r, n in cells:
            for s in seeds:
                cell_cfg = replace(cfg, rank=r, segments=n, seed=s)
                cell = out / f"r{r}_n{n}" / f"seed{s}"
                cell.mkdir(parents=True, exist_ok=True)
                (cell / "config.cfg").write_text(cell_cfg.to_text())
                log.info("cell r=%d n=%d seed=%d", r, n, s)
                report = _finetune_into(cell, cell_cfg, pretrained, target)
                rows.append({"rank": r, "segments": n, "seed": s, "accuracy": report.accuracy,
                             "kappa": report.kappa, "auc": report.auc_ovr_macro})
        _write_jsonl(out / "runs.jsonl", rows)
        summary = summarize(rows)
        _write_jsonl(out / "summary.jsonl", summary)
        lines = ["rank\tsegments\tseeds\taccuracy_mean\taccuracy_sd"]
        lines += [f"{c['rank']}\t{c['segments']}\t{c['seeds']}\t{c['accuracy_mean']:.4f}\t"
                  f"{c['accuracy_sd']:.4f}" for c in summary]
        (out / "summary.tsv").write_text("\n".join(lines) + "\n")
    return out


def params_report(cfg: RunConfig) -> dict:
    """Parameter report for the fine-tuning setup described by ``cfg``, without training."""
    spec = cfg.adapter_spec()
    model = build(cfg.model_config(cfg.synth_channels, cfg.samples(), cfg.synth_classes), cfg.seed)
    policy = _policy(cfg)
    if spec is not None:
        check_compatible(model.config, spec)
    if policy.mode == "full_finetune":
        return param_report(model)
    fresh = policy.resolve(model.config.channels, model.config.channels)
    tuned = inject_adapters(model, spec, cfg.target_list() if spec else (), seed=cfg.seed,
                            keep_trainable=fresh)
    return param_report(tuned, spec, cfg.target_list())


def cmd_params(cfg: RunConfig) -> dict:
    report = params_report(cfg)
    for key in sorted(report):
        value = report[key]
        print(f"{key:20s} {value:.6f}" if isinstance(value, float) else f"{key:20s} {value}")
    return report


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edora", description="decomposed low-rank adapter runs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                           metavar=f.type.upper())
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name) is not None}
    try:
        cfg = load_config(args.config, overrides)
        {"synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
         "eval": cmd_eval, "ablate": cmd_ablate, "params": cmd_params}[args.command](cfg)
    except (ConfigError, SignalConfigError, DimensionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, TrialSetFormatError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
