"""Operator command line: dataset generation, training, evaluation, analysis, sweeps.

Every command prints one machine-readable JSON summary line on success
and exits non-zero (with the error on stderr) otherwise. Relative
``--out`` paths are resolved under ``$OTPUSH_OUT_ROOT`` when that is set.
Report paths render matplotlib figures next to their CSV outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, model as model_mod, pushmini, trainer
from .numkit import ContractError

SETTINGS = ("base", "purple", "purple_mirrored")


def _resolve_out(path: str) -> Path:
    root = os.environ.get("OTPUSH_OUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _summary(command: str, **fields) -> None:
    line = {"command": command, "status": "ok"}
    line.update(fields)
    print(json.dumps(line))


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _load_mixture(spec: str):
    if spec == "paper":
        return pushmini.paper_mixture()
    raw = json.loads(Path(spec).read_text(encoding="utf-8"))
    cells = []
    for cell in raw["cells"]:
        cells.append((cell["domain"], cell["variant"], int(cell["count"])))
    return cells


def cmd_gen_data(args) -> int:
    out_dir = _resolve_out(args.out)
    cells = _load_mixture(args.spec)
    datasets, report = pushmini.generate_dataset(cells, seed=args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for domain, dataset in sorted(datasets.items()):
        data_path = out_dir / f"{domain}.jsonl"
        pushmini.write_dataset(data_path, dataset)
        files.append(str(data_path))
        if dataset.episodes:
            from .geometry import fit_norm_stats

            stats_path = out_dir / f"norm_stats_{domain}.json"
            stats = {
                "action": fit_norm_stats(dataset, "action").to_dict(),
                "proprio": fit_norm_stats(dataset, "proprio").to_dict(),
            }
            stats_path.write_text(json.dumps(stats, sort_keys=True) + "\n",
                                  encoding="utf-8")
            files.append(str(stats_path))
    _summary("gen-data", out=str(out_dir), seed=args.seed,
             counts=dict(sorted(report.counts.items())), retries=report.retries,
             files=files)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = trainer.load_config(args.config)
    out_dir = _resolve_out(args.out)
    result = trainer.train(config, out_dir)
    _write_loss_figure(out_dir / "loss_curves.svg", result.log)
    last = result.log.rows[-1].breakdown if result.log.rows else None
    _summary(
        "train", out=str(out_dir), method=config.method, steps=config.max_iters,
        checkpoint=str(out_dir / "checkpoint.ckpt"),
        log=str(out_dir / "train_log.csv"),
        final_total=None if last is None else last.total,
        final_bc_r=None if last is None else last.bc_r,
    )
    return 0


def _write_loss_figure(path, log: trainer.TrainLog) -> None:
    if not log.rows:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "otpush"
    steps = [r.step for r in log.rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.breakdown.bc_h for r in log.rows], label="bc_H", lw=0.8)
    ax.plot(steps, [r.breakdown.bc_r for r in log.rows], label="bc_R", lw=0.8)
    ax.plot(steps, [r.breakdown.ot_joint for r in log.rows], label="alignment", lw=0.8)
    ax.plot(steps, [r.breakdown.total for r in log.rows], label="total", lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_setting(setting: str) -> tuple[str, str]:
    domain, sep, variant = setting.partition(":")
    if not sep:
        domain, variant = "target", setting
    if domain not in pushmini.DOMAINS or variant not in pushmini.VARIANTS:
        raise ContractError(f"unknown setting {setting!r}")
    return domain, variant


def _parse_seeds(spec: str) -> list[int]:
    if spec == "paper":
        return pushmini.paper_eval_seeds()
    try:
        return [int(s) for s in spec.split(",") if s.strip()]
    except ValueError as exc:
        raise ContractError(f"bad seed list {spec!r}") from exc


def _eval_one(checkpoint: str, domain: str, variant: str, seeds) -> pushmini.EvalResult:
    if checkpoint == "expert":
        return pushmini.evaluate_expert(variant, seeds, domain=domain)
    ckpt = model_mod.load_checkpoint(checkpoint)
    return trainer.evaluate_checkpoint(ckpt, variant, seeds, domain=domain)


def _write_per_seed_csv(path, result: pushmini.EvalResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["seed", "max_iou"])
        for seed, value in result.per_seed:
            w.writerow([seed, repr(float(value))])


def cmd_eval(args) -> int:
    domain, variant = _parse_setting(args.setting)
    seeds = _parse_seeds(args.seeds)
    result = _eval_one(args.checkpoint, domain, variant, seeds)
    out_dir = _resolve_out(args.out) if args.out else Path.cwd()
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"eval_{domain}_{variant}.csv"
    _write_per_seed_csv(csv_path, result)
    print(f"mean max-IoU: {result.mean_reward:.4f}  "
          f"success rate: {result.success_rate:.2%}  ({len(seeds)} seeds)")
    _summary("eval", checkpoint=args.checkpoint, setting=f"{domain}:{variant}",
             seeds=len(seeds), mean_reward=result.mean_reward,
             success_rate=result.success_rate, csv=str(csv_path))
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    ckpt = model_mod.load_checkpoint(args.checkpoint)
    datasets = [pushmini.read_dataset(args.source), pushmini.read_dataset(args.target)]
    dump = analysis.dump_latents(ckpt, datasets, max_per_domain=args.max_per_domain,
                                 seed=args.seed)
    report = analysis.latent_alignment_report(dump, k=args.knn)
    out_dir = _resolve_out(args.out)
    files = analysis.write_alignment_outputs(out_dir, dump, report)
    _summary("analyze", checkpoint=args.checkpoint, out=str(out_dir),
             samples=len(dump), w2_mean=report.w2_mean,
             knn1_variant_match=report.knn1_variant_match,
             files=[str(f) for f in files])
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def trend_checks(success: dict) -> dict:
    """The benchmark's ordinal comparisons, evaluated on a method->setting table."""
    def sr(method: str, setting: str):
        return success.get(method, {}).get(setting)

    checks: dict[str, bool] = {}
    have = lambda *ms: all(m in success for m in ms)
    if have("egobridge", "cotrain", "target_only"):
        checks["in_dist_order"] = (
            sr("egobridge", "base") >= sr("cotrain", "base") >= sr("target_only", "base")
        )
    if have("target_only"):
        checks["purple_target_only_floor"] = sr("target_only", "purple") <= 0.05
    if have("egobridge", "cotrain"):
        checks["purple_ego_ge_cotrain"] = sr("egobridge", "purple") >= sr("cotrain", "purple")
    if have("egobridge", "standard_ot"):
        checks["purple_ego_vs_standard_ot"] = (
            sr("egobridge", "purple") - sr("standard_ot", "purple") >= 0.10
        )
    if have("egobridge", "cotrain", "standard_ot"):
        checks["mirrored_order"] = (
            sr("egobridge", "purple_mirrored") >= sr("cotrain", "purple_mirrored")
            >= sr("standard_ot", "purple_mirrored")
        )
    if have("egobridge"):
        checks["mirrored_ego_floor"] = sr("egobridge", "purple_mirrored") >= 0.20
    if have("egobridge", "mse_pair"):
        checks["mirrored_mse_le_ego"] = (
            sr("mse_pair", "purple_mirrored") <= sr("egobridge", "purple_mirrored")
        )
    return checks


def cmd_sweep(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if len(set(methods)) != len(methods):
        raise ContractError("duplicate method names in --methods")
    for m in methods:
        if m not in trainer.METHODS:
            raise ContractError(f"unknown method {m!r}")
    base_config = trainer.load_config(args.config)
    seeds = _parse_seeds(args.seeds)
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table: list[dict] = []
    success: dict[str, dict[str, float]] = {}
    for method in methods:
        config = replace(base_config, method=method)
        if method in ("cotrain", "target_only"):
            config = replace(config, alpha=0.0)
        run_dir = out_dir / method
        result = trainer.train(config, run_dir)
        _write_loss_figure(run_dir / "loss_curves.svg", result.log)
        success[method] = {}
        for setting in SETTINGS:
            eval_result = trainer.evaluate_checkpoint(result.checkpoint, setting, seeds)
            _write_per_seed_csv(run_dir / f"eval_target_{setting}.csv", eval_result)
            success[method][setting] = eval_result.success_rate
            table.append({
                "method": method, "setting": setting,
                "mean_reward": eval_result.mean_reward,
                "success_rate": eval_result.success_rate,
            })
    results_path = out_dir / "results.csv"
    with open(results_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["method", "setting", "mean_reward", "success_rate"])
        for row in table:
            w.writerow([row["method"], row["setting"],
                        repr(row["mean_reward"]), repr(row["success_rate"])])
    _write_sweep_figure(out_dir / "results.svg", methods, success)
    checks = trend_checks(success)
    _summary("sweep", out=str(out_dir), methods=methods, settings=list(SETTINGS),
             results=str(results_path), trends=checks,
             trends_ok=all(checks.values()) if checks else None)
    return 0


def _write_sweep_figure(path, methods, success) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "otpush"
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(SETTINGS))
    for i, method in enumerate(methods):
        rates = [success[method][s] for s in SETTINGS]
        ax.bar(x + i * width, rates, width=width, label=method)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(SETTINGS)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otpush",
        description="Cross-domain imitation learning benchmark toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert datasets")
    p.add_argument("--spec", required=True,
                   help="mixture JSON file, or 'paper' for the benchmark mixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one method from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint path, or 'expert' for the scripted expert")
    p.add_argument("--setting", required=True, help="domain:variant, e.g. target:base")
    p.add_argument("--seeds", default="paper", help="'paper' or comma-separated ints")
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="latent alignment report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source-domain dataset file")
    p.add_argument("--target", required=True, help="target-domain dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--max-per-domain", type=int, default=256)
    p.add_argument("--knn", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("sweep", help="train + evaluate several methods on one config")
    p.add_argument("--methods", required=True, help="comma-separated method names")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="paper")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ContractError, trainer.TrainAbort, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
