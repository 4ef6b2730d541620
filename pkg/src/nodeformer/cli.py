"""Command-line front end for datasets, training runs, ensembles and sweeps.

Commands write plot-ready CSV/JSON into an output directory; nothing is
interactive. Every JSON artifact embeds the run parameters (seeds, learning
rates, lambda, epoch budget) so results stay attributable. Exit codes:
0 success, 1 usage error, 2 experiment-level failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import checkpoint as ckpt
from .data import bits_to_tokens, gen_dataset, write_dataset
from .experiment import ExperimentSpec, load_spec
from .model import TransformerClassifier, loglog_slope, residual_decay_probe
from .training import TrainConfig, Trainer, default_lambda_grid, run_ensemble

USAGE_ERROR = 1
EXPERIMENT_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage instead of argparse's 2
        raise UsageError(message)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int, default=None, help="embedding dimension (even)")
    p.add_argument("--n-blocks", type=int, default=None, help="number of encoder blocks")
    p.add_argument("--arch", choices=("vanilla", "node"), default=None)
    p.add_argument("--variant", choices=("basic", "mhsa_skip", "euler_analogue"),
                   default=None, help="ODE right-hand side variant")
    p.add_argument("--mhsa-td", action=argparse.BooleanOptionalAction, default=None,
                   help="time-dependent attention projections")
    p.add_argument("--atol", type=float, default=None)
    p.add_argument("--rtol", type=float, default=None)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-len", type=int, default=None, help="longest bit string")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="trajectory regularization coefficient")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed-base", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="nodeformer", description=__doc__)
    parser.add_argument("--config", type=str, default=None,
                        help="experiment spec file; explicit flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the exhaustive parity dataset")
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="output file path")

    p = sub.add_parser("train", help="one training run; saves record and checkpoint")
    _add_model_flags(p)
    _add_run_flags(p)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ensemble", help="learning-rate x seed grid, trim-averaged")
    _add_model_flags(p)
    _add_run_flags(p)
    p.add_argument("--lr-grid", type=str, default=None, help="comma-separated learning rates")
    p.add_argument("--seeds", type=int, default=None, help="seeds per learning rate")
    p.add_argument("--drop-k", type=int, default=None)

    p = sub.add_parser("compare", help="vanilla vs node over a (d, N) grid")
    _add_run_flags(p)
    p.add_argument("--d", type=str, default=None, help="comma-separated embedding dims")
    p.add_argument("--n-blocks", type=str, default=None, help="comma-separated block counts")
    p.add_argument("--runs", type=int, default=None, help="total runs per cell")
    p.add_argument("--drop-k", type=int, default=None)
    p.add_argument("--lr-grid", type=str, default=None)

    p = sub.add_parser("variants", help="histograms for the four ODE variants")
    _add_run_flags(p)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--n-blocks", type=int, default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--drop-k", type=int, default=None)
    p.add_argument("--lr-grid", type=str, default=None)

    p = sub.add_parser("reg-sweep", help="regularization coefficient sweep at fixed (d, N)")
    _add_model_flags(p)
    _add_run_flags(p)
    p.add_argument("--lambda-grid", type=str, default=None,
                   help="comma-separated coefficients (default: 4, 1, ..., 4**-13)")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--drop-k", type=int, default=None)
    p.add_argument("--lr-grid", type=str, default=None)

    p = sub.add_parser("residual-probe", help="Euler residual decay of a trained checkpoint")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--bits", type=str, default=None, help="input bit string, e.g. 101101")
    p.add_argument("--step-counts", type=str, default=None, help="comma-separated step counts")
    p.add_argument("--out", type=str, default=None)

    return parser


_SPEC_FOR_FLAG = {
    "d": "d", "n_blocks": "n_blocks", "arch": "architecture", "variant": "rhs_variant",
    "mhsa_td": "mhsa_time_dependent", "atol": "atol", "rtol": "rtol",
    "max_len": "max_len", "epochs": "max_epochs", "lam": "lam", "workers": "workers",
    "seed_base": "seed_base", "out": "out_dir", "lr": "learning_rate", "seed": "seed",
    "seeds": "seeds_per_lr", "drop_k": "drop_k", "checkpoint": "checkpoint",
    "bits": "bits",
}


def _apply_args(spec: ExperimentSpec, args: argparse.Namespace) -> ExperimentSpec:
    """Overlay explicitly-given CLI flags onto the spec."""
    updates: dict = {"command": args.command}
    for flag, field in _SPEC_FOR_FLAG.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[field] = value
    if getattr(args, "lr_grid", None) is not None:
        updates["lr_grid"] = tuple(float(p) for p in args.lr_grid.split(","))
    if getattr(args, "lambda_grid", None) is not None:
        updates["lambda_grid"] = tuple(float(p) for p in args.lambda_grid.split(","))
    if getattr(args, "step_counts", None) is not None:
        updates["step_counts"] = tuple(int(p) for p in args.step_counts.split(","))
    if args.command == "compare":
        if getattr(args, "d", None) is not None:
            updates["d_list"] = tuple(int(p) for p in args.d.split(","))
            updates.pop("d", None)
        if getattr(args, "n_blocks", None) is not None:
            updates["n_list"] = tuple(int(p) for p in args.n_blocks.split(","))
            updates.pop("n_blocks", None)
    if getattr(args, "runs", None) is not None:
        updates["_runs_total"] = args.runs
    runs_total = updates.pop("_runs_total", None)
    valid = {f.name for f in fields(ExperimentSpec)}
    spec = replace(spec, **{k: v for k, v in updates.items() if k in valid})
    if runs_total is not None:
        if runs_total % len(spec.lr_grid) != 0:
            raise UsageError(
                f"--runs {runs_total} not divisible by the {len(spec.lr_grid)} learning rates"
            )
        spec = replace(spec, seeds_per_lr=runs_total // len(spec.lr_grid))
    return spec


def _outdir(spec: ExperimentSpec) -> Path:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _runs_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lr", "seed", "lambda", "best_accuracy", "time_to_best_s",
                    "epoch_of_best", "mean_steps_per_block", "final_reg_integral", "valid"])
        for r in records:
            w.writerow([r.learning_rate, r.seed, r.lam, f"{r.best_accuracy:.6f}",
                        f"{r.time_to_best:.3f}", r.epoch_of_best,
                        "" if r.mean_steps_per_block is None else f"{r.mean_steps_per_block:.3f}",
                        f"{r.final_reg_integral:.8g}", int(r.valid)])


def _ensemble_meta(spec: ExperimentSpec) -> dict:
    return {
        "lr_grid": list(spec.lr_grid),
        "seeds_per_lr": spec.seeds_per_lr,
        "seed_base": spec.seed_base,
        "max_epochs": spec.max_epochs,
        "lambda": spec.lam,
        "drop_k": spec.drop_k,
        "max_len": spec.max_len,
    }


def cmd_gen_data(spec: ExperimentSpec) -> int:
    out = Path(spec.out_dir)
    if out.suffix == "":  # directory given: use a default file name
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"parity_maxlen{spec.max_len}.txt"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(gen_dataset(spec.max_len), out)
    print(f"wrote {out}")
    return 0


def cmd_train(spec: ExperimentSpec) -> int:
    data = gen_dataset(spec.max_len)
    trainer = Trainer(spec.model_config(),
                      TrainConfig(learning_rate=spec.learning_rate, max_epochs=spec.max_epochs,
                                  lam=spec.lam, seed=spec.seed),
                      data)
    record = trainer.run()
    out = _outdir(spec)
    _write_json(out / "run.json", record.to_dict())
    ckpt.save_checkpoint(out / "model.ckpt", trainer.model, metadata={
        "learning_rate": spec.learning_rate, "seed": spec.seed, "lambda": spec.lam,
        "best_accuracy": record.best_accuracy, "epoch_of_best": record.epoch_of_best,
        "max_len": spec.max_len,
    })
    print(f"best accuracy {record.best_accuracy:.4f} at epoch {record.epoch_of_best} "
          f"({record.time_to_best:.1f}s); artifacts in {out}")
    return 0 if record.valid else EXPERIMENT_ERROR


def cmd_ensemble(spec: ExperimentSpec) -> int:
    data = gen_dataset(spec.max_len)
    summary = run_ensemble(
        spec.model_config(), data, list(spec.lr_grid), spec.seeds_per_lr,
        lam=spec.lam, drop_k=spec.drop_k, max_epochs=spec.max_epochs,
        seed_base=spec.seed_base, workers=spec.workers,
    )
    out = _outdir(spec)
    _write_json(out / "ensemble.json", {"meta": _ensemble_meta(spec), **summary.to_dict()})
    _runs_csv(out / "runs.csv", summary.runs)
    print(f"trimmed avg accuracy {summary.avg_accuracy:.4f} over "
          f"{len(summary.runs) - summary.drop_k}/{len(summary.runs)} runs; artifacts in {out}")
    return EXPERIMENT_ERROR if all(not r.valid for r in summary.runs) else 0


def cmd_compare(spec: ExperimentSpec) -> int:
    data = gen_dataset(spec.max_len)
    out = _outdir(spec)
    rows = []
    errors = []
    for d in spec.d_list:
        for n in spec.n_list:
            for arch in ("vanilla", "node"):
                mcfg = spec.model_config(d=d, n_blocks=n, architecture=arch)
                params = TransformerClassifier(mcfg, seed=0).params.count()
                try:
                    s = run_ensemble(
                        mcfg, data, list(spec.lr_grid), spec.seeds_per_lr,
                        lam=spec.lam, drop_k=spec.drop_k, max_epochs=spec.max_epochs,
                        seed_base=spec.seed_base, workers=spec.workers,
                    )
                    rows.append({
                        "d": d, "N": n, "arch": arch,
                        "avg_acc": s.avg_accuracy, "avg_time_s": s.avg_time,
                        "params": params, "avg_steps": s.avg_steps,
                    })
                except Exception as e:  # keep the grid going; cell marked failed
                    errors.append({"d": d, "N": n, "arch": arch, "error": str(e)})
                    rows.append({"d": d, "N": n, "arch": arch, "avg_acc": None,
                                 "avg_time_s": None, "params": params, "avg_steps": None})
    with open(out / "compare.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["d", "N", "arch", "avg_acc", "avg_time_s", "params", "avg_steps"])
        for r in rows:
            w.writerow([
                r["d"], r["N"], r["arch"],
                "" if r["avg_acc"] is None else f"{r['avg_acc']:.6f}",
                "" if r["avg_time_s"] is None else f"{r['avg_time_s']:.3f}",
                r["params"],
                "" if r["avg_steps"] is None else f"{r['avg_steps']:.3f}",
            ])
    _write_json(out / "compare.json",
                {"meta": _ensemble_meta(spec), "rows": rows, "errors": errors})
    print(f"{len(rows)} grid cells written to {out}")
    return EXPERIMENT_ERROR if errors and len(errors) == len(rows) else 0


_VARIANTS = [
    ("basic", False, "basic-ti"),
    ("basic", True, "basic-td"),
    ("mhsa_skip", False, "mhsa_skip-ti"),
    ("mhsa_skip", True, "mhsa_skip-td"),
]


def cmd_variants(spec: ExperimentSpec) -> int:
    data = gen_dataset(spec.max_len)
    out = _outdir(spec)
    payload = {"meta": _ensemble_meta(spec), "variants": {}}
    for rhs_variant, td, key in _VARIANTS:
        mcfg = spec.model_config(architecture="node", rhs_variant=rhs_variant,
                                 mhsa_time_dependent=td)
        s = run_ensemble(
            mcfg, data, list(spec.lr_grid), spec.seeds_per_lr,
            lam=spec.lam, drop_k=spec.drop_k, max_epochs=spec.max_epochs,
            seed_base=spec.seed_base, workers=spec.workers,
        )
        payload["variants"][key] = {
            "histogram": s.histogram,
            "bin_edges": s.bin_edges,
            "avg_accuracy": s.avg_accuracy,
            "avg_time_s": s.avg_time,
            "runs": len(s.runs),
        }
    _write_json(out / "variants.json", payload)
    print(f"variant histograms written to {out}")
    return 0


def cmd_reg_sweep(spec: ExperimentSpec) -> int:
    data = gen_dataset(spec.max_len)
    out = _outdir(spec)
    grid = list(spec.lambda_grid) if spec.lambda_grid else default_lambda_grid()
    grid = sorted(set(grid), reverse=True)
    node_cfg = spec.model_config(architecture="node")
    vanilla_cfg = spec.model_config(architecture="vanilla")

    rows = []
    errors = []

    def one(cfg, lam):
        return run_ensemble(
            cfg, data, list(spec.lr_grid), spec.seeds_per_lr,
            lam=lam, drop_k=spec.drop_k, max_epochs=spec.max_epochs,
            seed_base=spec.seed_base, workers=spec.workers,
        )

    try:
        s = one(vanilla_cfg, 0.0)
        rows.append({"lambda": None, "arch": "vanilla", "avg_acc": s.avg_accuracy,
                     "avg_time_s": s.avg_time, "avg_reg_integral": s.avg_reg_integral,
                     "avg_steps": s.avg_steps})
    except Exception as e:
        errors.append({"lambda": None, "arch": "vanilla", "error": str(e)})
    for lam in [0.0] + grid:
        try:
            s = one(node_cfg, lam)
            rows.append({"lambda": lam, "arch": "node", "avg_acc": s.avg_accuracy,
                         "avg_time_s": s.avg_time, "avg_reg_integral": s.avg_reg_integral,
                         "avg_steps": s.avg_steps})
        except Exception as e:
            errors.append({"lambda": lam, "arch": "node", "error": str(e)})

    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lambda", "arch", "avg_acc", "avg_time_s", "avg_reg_integral", "avg_steps"])
        for r in rows:
            w.writerow([
                "" if r["lambda"] is None else repr(r["lambda"]),
                r["arch"],
                f"{r['avg_acc']:.6f}",
                f"{r['avg_time_s']:.3f}",
                f"{r['avg_reg_integral']:.8g}",
                "" if r["avg_steps"] is None else f"{r['avg_steps']:.3f}",
            ])
    _write_json(out / "sweep.json", {"meta": _ensemble_meta(spec), "rows": rows,
                                     "errors": errors, "lambda_grid": grid})
    print(f"sweep over {len(grid) + 1} coefficients written to {out}")
    return EXPERIMENT_ERROR if errors and not rows else 0


def cmd_residual_probe(spec: ExperimentSpec) -> int:
    if not spec.checkpoint or not spec.bits:
        raise UsageError("residual-probe needs --checkpoint and --bits")
    model, metadata = ckpt.load_checkpoint(spec.checkpoint)
    tokens = bits_to_tokens(int(ch) for ch in spec.bits)
    rows = residual_decay_probe(model, tokens, list(spec.step_counts))
    slope = loglog_slope(rows) if len(rows) > 1 else None
    out = _outdir(spec)
    with open(out / "probe.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n_steps", "max_residual"])
        for n, r in rows:
            w.writerow([n, f"{r:.10g}"])
    _write_json(out / "probe.json", {
        "bits": spec.bits,
        "step_counts": [n for n, _ in rows],
        "max_residuals": [r for _, r in rows],
        "loglog_slope": slope,
        "degenerate": slope is None,
        "checkpoint_metadata": metadata,
    })
    print(f"residual decay slope: {slope}; artifacts in {out}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ensemble": cmd_ensemble,
    "compare": cmd_compare,
    "variants": cmd_variants,
    "reg-sweep": cmd_reg_sweep,
    "residual-probe": cmd_residual_probe,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        spec = load_spec(args.config) if args.config else ExperimentSpec()
        spec = _apply_args(spec, args)
        return _COMMANDS[args.command](spec)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError, ckpt.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXPERIMENT_ERROR


if __name__ == "__main__":
    sys.exit(main())
