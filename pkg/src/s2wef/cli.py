"""Command-line front end.

Subcommands: run a configured experiment, run an ablation pair on shared
seeds, replay a detector over a recorded trace, or re-print the summary of
an existing metrics file.  Configs are versioned JSON validated fail-closed
(unknown keys are rejected) before any output file is created; the only
environment knob is S2WEF_THREADS, which caps the training worker count.
Exit codes: 0 success, 1 runtime failure or replay divergence, 2 invalid
config or malformed trace.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attacks import AttackParams
from .errors import ConfigurationError, S2wefError, TraceError
from .fedsim import DatasetParams, MetricsReport, SimConfig, run_simulation
from .nn import TrainConfig
from .trace import (
    read_metrics_csv,
    read_trace,
    replay_trace,
    write_metrics_csv,
    write_trace,
)

CONFIG_VERSION = 1


def _take(raw: dict, context: str, known: dict):
    """Pop known keys with defaults; reject anything left over."""
    data = dict(raw)
    out = {}
    for key, default in known.items():
        out[key] = data.pop(key) if key in data else default
    if data:
        raise ConfigurationError(f"{context}: unknown keys {sorted(data)}")
    return out


def config_from_dict(raw: dict) -> SimConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    top = _take(
        raw,
        "config",
        {
            "version": None,
            "clients": 10,
            "free_rider_ratio": 0.3,
            "scenario": "S1",
            "attack": None,
            "partition": "IID",
            "dirichlet_beta": 0.5,
            "rounds": 20,
            "train": {},
            "detector": "S2WEF",
            "accumulate_wef": False,
            "seeds": [1, 2, 3],
            "dataset": {},
            "hidden_layers": [256],
        },
    )
    if top["version"] != CONFIG_VERSION:
        raise ConfigurationError(f"config: version must be {CONFIG_VERSION}, got {top['version']!r}")

    attack = None
    if top["attack"] is not None:
        a = _take(
            top["attack"],
            "config.attack",
            {
                "kind": None,
                "rwa_range": 1e-3,
                "spa_sigma": 1e-3,
                "adwa_sigma": 1e-3,
                "awca_sigma": 1e-5,
                "counterfeit_abs": True,
            },
        )
        if a["kind"] is None:
            raise ConfigurationError("config.attack: 'kind' is required")
        attack = AttackParams(**a)

    t = _take(
        top["train"],
        "config.train",
        {"learning_rate": 0.1, "momentum": 0.0, "batch_size": 32, "local_iterations": 5},
    )
    d = _take(
        top["dataset"],
        "config.dataset",
        {"samples": 2000, "features": 16, "classes": 10, "spread": 0.2},
    )
    return SimConfig(
        clients=top["clients"],
        free_rider_ratio=top["free_rider_ratio"],
        scenario=top["scenario"],
        attack=attack,
        partition=top["partition"],
        dirichlet_beta=top["dirichlet_beta"],
        rounds=top["rounds"],
        train=TrainConfig(**t),
        detector=top["detector"],
        accumulate_wef=top["accumulate_wef"],
        seeds=tuple(top["seeds"]),
        dataset=DatasetParams(**d),
        hidden_layers=tuple(top["hidden_layers"]),
    )


def config_to_dict(cfg: SimConfig) -> dict:
    out = {
        "version": CONFIG_VERSION,
        "clients": cfg.clients,
        "free_rider_ratio": cfg.free_rider_ratio,
        "scenario": cfg.scenario,
        "attack": None,
        "partition": cfg.partition,
        "dirichlet_beta": cfg.dirichlet_beta,
        "rounds": cfg.rounds,
        "train": {
            "learning_rate": cfg.train.learning_rate,
            "momentum": cfg.train.momentum,
            "batch_size": cfg.train.batch_size,
            "local_iterations": cfg.train.local_iterations,
        },
        "detector": cfg.detector,
        "accumulate_wef": cfg.accumulate_wef,
        "seeds": list(cfg.seeds),
        "dataset": {
            "samples": cfg.dataset.samples,
            "features": cfg.dataset.features,
            "classes": cfg.dataset.classes,
            "spread": cfg.dataset.spread,
        },
        "hidden_layers": list(cfg.hidden_layers),
    }
    if cfg.attack is not None:
        out["attack"] = {
            "kind": cfg.attack.kind,
            "rwa_range": cfg.attack.rwa_range,
            "spa_sigma": cfg.attack.spa_sigma,
            "adwa_sigma": cfg.attack.adwa_sigma,
            "awca_sigma": cfg.attack.awca_sigma,
            "counterfeit_abs": cfg.attack.counterfeit_abs,
        }
    return out


def load_config(path: str | Path) -> SimConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


def _fmt(value: float) -> str:
    return "-" if value != value else f"{value:.2f}"  # NaN-safe


def summary_lines(report: MetricsReport) -> list[str]:
    cfg = report.cfg
    attack = cfg.attack.kind if cfg.attack else "none"
    lines = [
        f"detector={cfg.detector} scenario={cfg.scenario} attack={attack} "
        f"ratio={cfg.free_rider_ratio:.2f} partition={cfg.partition} "
        f"clients={cfg.clients} rounds={cfg.rounds} trials={len(cfg.seeds)}",
        f"{'trial':>6}  {'f1':>5}  {'f1_attack':>9}  {'precision':>9}  "
        f"{'recall':>6}  {'fpr':>5}  {'final_acc':>9}",
    ]
    for seed in cfg.seeds:
        lines.append(
            f"{seed:>6}  {_fmt(report.trial_mean(seed, 'f1')):>5}  "
            f"{_fmt(report.trial_mean(seed, 'f1', attack_only=True)):>9}  "
            f"{_fmt(report.trial_mean(seed, 'precision')):>9}  "
            f"{_fmt(report.trial_mean(seed, 'recall')):>6}  "
            f"{_fmt(report.trial_mean(seed, 'fpr')):>5}  "
            f"{report.final_accuracy(seed):>9.4f}"
        )
    lines.append(
        f"{'mean':>6}  {_fmt(report.mean('f1')):>5}  "
        f"{_fmt(report.mean('f1', attack_only=True)):>9}  "
        f"{_fmt(report.mean('precision')):>9}  "
        f"{_fmt(report.mean('recall')):>6}  "
        f"{_fmt(report.mean('fpr')):>5}  "
        f"{report.mean_final_accuracy():>9.4f}"
    )
    lines.append("(f1/precision/recall/fpr over rounds >= 1; f1_attack over rounds with true free-riders)")
    return lines


def _apply_overrides(cfg: SimConfig, args) -> SimConfig:
    from dataclasses import replace

    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "detector", None):
        cfg = replace(cfg, detector=args.detector)
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        report = run_simulation(cfg)
    except S2wefError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    write_trace(report, out / "trace.jsonl")
    write_metrics_csv(report, out / "metrics.csv")
    (out / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8"
    )
    lines = summary_lines(report)
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not args.quiet:
        print("\n".join(lines))
    return 0


_ABLATION_PAIRS = {
    "l1": ("COS_ONLY_CLUSTER", "CLUSTER_ONLY"),
    "vote": ("CLUSTER_ONLY", "S2WEF"),
}


def cmd_ablate(args) -> int:
    from dataclasses import replace

    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    mode = args.mode or ("vote" if cfg.scenario == "CLEAN" else "l1")
    first, second = _ABLATION_PAIRS[mode]
    out = Path(args.out)
    try:
        reports = {name: run_simulation(replace(cfg, detector=name)) for name in (first, second)}
    except S2wefError as exc:
        print(f"ablation failed: {exc}", file=sys.stderr)
        return 1

    out.mkdir(parents=True, exist_ok=True)
    lines = [f"ablation={mode} seeds={list(cfg.seeds)}"]
    if mode == "l1":
        lines.append(f"{'detector':>18}  {'precision':>9}  {'recall':>6}  {'f1':>5}")
        rows = {
            name: {
                "precision": rep.mean("precision", attack_only=True),
                "recall": rep.mean("recall", attack_only=True),
                "f1": rep.mean("f1", attack_only=True),
            }
            for name, rep in reports.items()
        }
        for name, row in rows.items():
            lines.append(
                f"{name:>18}  {_fmt(row['precision']):>9}  "
                f"{_fmt(row['recall']):>6}  {_fmt(row['f1']):>5}"
            )
    else:
        lines.append(f"{'detector':>18}  {'fpr':>6}")
        rows = {name: {"fpr": rep.mean("fpr")} for name, rep in reports.items()}
        for name, row in rows.items():
            lines.append(f"{name:>18}  {row['fpr']:>6.3f}")

    meta = {
        "mode": mode,
        "seeds": list(cfg.seeds),
        "detectors": [first, second],
        "results": rows,
    }
    (out / "ablation.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (out / "ablation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not args.quiet:
        print("\n".join(lines))
    return 0


def cmd_detect_trace(args) -> int:
    try:
        records = read_trace(args.trace)
        results = replay_trace(records, args.detector)
    except (TraceError, ConfigurationError) as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 2
    diverged = [r for r in results if r["diverged"]]
    if not args.quiet:
        for r in results:
            status = "DIVERGED" if r["diverged"] else "ok"
            print(
                f"trial {r['trial']} round {r['round']}: recorded={r['recorded']} "
                f"replayed={r['replayed']} {status}"
            )
    if diverged:
        rounds = [(r["trial"], r["round"]) for r in diverged]
        print(f"{len(diverged)} diverging rounds: {rounds}", file=sys.stderr)
        return 1
    print(f"replay consistent over {len(results)} rounds")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    try:
        rows = read_metrics_csv(out / "metrics.csv")
    except TraceError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 2
    print(f"{'trial':>6} {'round':>6} {'f1':>6} {'fpr':>6} {'accuracy':>9}")
    for row in rows:
        print(
            f"{row['trial']:>6} {row['round']:>6} {float(row['f1']):>6.2f} "
            f"{float(row['fpr']):>6.2f} {float(row['accuracy']):>9.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2wef",
        description="Federated-learning free-rider detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the trial seed list")
        p.add_argument("--detector", default=None, help="override the configured detector")
        p.add_argument("--quiet", action="store_true")

    p_run = sub.add_parser("run", help="run a configured experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_abl = sub.add_parser("ablate", help="run a detector-pair ablation on shared seeds")
    common(p_abl)
    p_abl.add_argument("--mode", choices=sorted(_ABLATION_PAIRS), default=None)
    p_abl.set_defaults(func=cmd_ablate)

    p_det = sub.add_parser("detect-trace", help="replay a detector over a recorded trace")
    p_det.add_argument("--trace", required=True, help="trace.jsonl path")
    p_det.add_argument("--detector", default="S2WEF")
    p_det.add_argument("--quiet", action="store_true")
    p_det.set_defaults(func=cmd_detect_trace)

    p_rep = sub.add_parser("report", help="print the summary of a finished run")
    p_rep.add_argument("--out", required=True, help="directory holding metrics.csv")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
