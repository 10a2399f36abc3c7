"""Command-line entry point.

Subcommands: gen-data, train, eval, attack, sweep.  Every command exits 0 on
success; failures print one machine-parsable JSON error line to stderr and
exit nonzero.  An optional ``--config`` key/value file supplies defaults for
any command; explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .. import fdia
from ..attacks import perturbation_metrics, run_attack  # noqa: F401 (re-export for scripts)
from ..errors import FdialabError, PlanError
from ..gridcase import (MeterConfig, build_grid_model, load_bundled_case,
                        load_grid, parse_matpower_case, save_grid)
from ..neural.network import NalModel, default_architecture, load_model, save_model
from ..neural.training import TrainConfig, evaluate, standardization_from, train
from ..rng import derive_rng, derive_seed
from .plan import (emit_report, generate_attack_pool, parse_config_text,
                   plan_from_config, run_cell, run_plan, select_attack_pool)

DEFAULT_CALIBRATION_SAMPLES = 500


def _read_case_text(case: str) -> tuple[str, str | None]:
    path = Path(case)
    if path.exists():
        return path.read_text(), None
    try:
        return load_bundled_case(case), case
    except FileNotFoundError:
        raise FileNotFoundError(f"case file or bundled case {case!r} not found")


def _load_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    return parse_config_text(Path(path).read_text())


def _opt(args_value, cfg: dict[str, str], key: str, cast, default):
    """Flag value if given, else config value, else default."""
    if args_value is not None:
        return args_value
    if key in cfg:
        return cast(cfg[key])
    return default


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    text, bundled_name = _read_case_text(args.case)
    raw = parse_matpower_case(text, case_name=bundled_name)
    grid = build_grid_model(raw, MeterConfig())

    n_cal = _opt(None, cfg, "calibration_samples", int, DEFAULT_CALIBRATION_SAMPLES)
    pool = fdia.calibration_pool(grid, n_cal, derive_rng(args.seed, "calibration"))
    grid = fdia.calibrate_noise(grid, pool)

    dataset = fdia.generate_dataset(grid, fdia.GenerationConfig(
        n_normal=args.n_normal, n_attacked_per_scale=args.n_attacked_per_scale,
        seed=args.seed))
    out = Path(args.out)
    fdia.save_dataset(dataset, out)
    save_grid(grid, out / "grid.json")
    print(f"wrote {len(dataset)} samples ({dataset.meta['counts']['attacked']} attacked) "
          f"and grid.json to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    data_dir = Path(args.data)
    grid = load_grid(data_dir / "grid.json")
    dataset = fdia.load_dataset(data_dir, grid)

    train_idx, test_idx = dataset.split_indices()
    z_train, y_train = dataset.z[train_idx], dataset.y[train_idx]
    mean, std = standardization_from(z_train)

    kernels = cfg.get("arch_kernels")
    widths = cfg.get("arch_widths")
    arch = default_architecture(
        dataset.n_meter, grid.n_bus,
        kernels=tuple(int(v) for v in kernels.split(",")) if kernels else None,
        widths=tuple(int(v) for v in widths.split(",")) if widths else None)
    model = NalModel.initialize(arch, mean, std, derive_rng(args.seed, "init"),
                                case_name=grid.case_name)

    config = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                         lr=args.lr, seed=args.seed)
    eval_z = dataset.z[test_idx] if len(test_idx) else None
    eval_y = dataset.y[test_idx] if len(test_idx) else None
    report = train(model, z_train, y_train, config, eval_z=eval_z, eval_y=eval_y)

    model.training_meta = {"seed": args.seed, "epochs": args.epochs,
                           "lr": args.lr, "batch": args.batch,
                           "n_train": int(len(train_idx)), "n_test": int(len(test_idx)),
                           "data": str(data_dir)}
    save_model(model, args.out)
    print(f"trained {config.epochs} epochs: loss={report.final_loss:.6f} "
          f"meter_accuracy={report.meter_accuracy:.4f} "
          f"row_accuracy={report.row_accuracy:.4f} model={args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = fdia.load_dataset(args.data)
    _, test_idx = dataset.split_indices()
    if len(test_idx) == 0:
        test_idx = np.arange(len(dataset))
    meter_acc, row_acc = evaluate(model, dataset.z[test_idx], dataset.y[test_idx])
    print(f"meter_accuracy={meter_acc:.6f} row_accuracy={row_acc:.6f} "
          f"split=test n={len(test_idx)}")
    return 0


def cmd_attack(args) -> int:
    model = load_model(args.model)
    grid = load_grid(args.grid)
    if grid.noise_sigma is None:
        raise PlanError("grid.json lacks noise_sigma; run gen-data first")
    scale = fdia.SCALE_NAMES[args.scale]

    dataset, pool = generate_attack_pool(model, grid, scale, args.n,
                                         derive_seed(args.seed, "pool", scale))
    cell, results = run_cell(model, grid, dataset, pool, args.variant, scale,
                             args.lr, args.mu, seed=args.seed,
                             uncontrolled_frac=args.uncontrolled_frac,
                             max_iter=args.max_iter)
    if args.trace:
        for k, idx in enumerate(pool):
            sample = dataset.sample(idx)
            job_seed = derive_seed(args.seed, "attack", args.variant, scale,
                                   args.lr, args.mu, k)
            from ..attacks import AttackConfig, sample_uncontrolled_meters
            uncontrolled: frozenset[int] = frozenset()
            if args.uncontrolled_frac > 0:
                uncontrolled = sample_uncontrolled_meters(
                    sample.fdia, args.uncontrolled_frac,
                    derive_rng(job_seed, "uncontrolled"))
            config = AttackConfig(variant=args.variant, mu=args.mu, lr=args.lr,
                                  max_iter=args.max_iter, seed=job_seed,
                                  uncontrolled_meters=uncontrolled,
                                  record_trace=True)
            result = run_attack(model, grid, sample.z, sample.fdia, config)
            name = "trace.csv" if k == 0 else f"trace_{k}.csv"
            with open(name, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["iteration", "loss", "bdd_statistic",
                                 "n_violated_labels"])
                for row in result.trace:
                    writer.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])

    metrics = perturbation_metrics(results)
    rho_c = "none" if metrics.rho_c is None else f"{metrics.rho_c:.6f}"
    rho_a = "none" if metrics.rho_a is None else f"{metrics.rho_a:.6f}"
    print(f"variant={args.variant} scale={args.scale} n={cell.n} "
          f"success_rate={cell.success_rate:.4f} rho_c={rho_c} rho_a={rho_a} "
          f"mean_iters={cell.mean_iters:.1f} wall_s={cell.wall_s:.2f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config_text(Path(args.plan).read_text())
    for key in ("model", "grid"):
        if key not in cfg:
            raise PlanError(f"plan config must set '{key}'")
        if not Path(cfg[key]).exists():
            raise PlanError(f"plan references missing artifact {cfg[key]!r}")
    model = load_model(cfg["model"])
    grid = load_grid(cfg["grid"])
    plan = plan_from_config(cfg, grid.case_name)

    dataset = None
    pool_indices = None
    if "data" in cfg:
        if not Path(cfg["data"]).exists():
            raise PlanError(f"plan references missing artifact {cfg['data']!r}")
        dataset = fdia.load_dataset(cfg["data"], grid)
        _, pool_indices = dataset.split_indices()

    cells = run_plan(plan, model, grid, dataset, pool_indices)
    csv_path, json_path = emit_report(cells, args.out)
    for cell in cells:
        print(f"variant={cell.variant} scale={cell.scale} lr={cell.lr} "
              f"mu={cell.mu} success_rate={cell.success_rate:.4f}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdialab",
        description="False-data-injection attack laboratory for DC state estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled dataset and grid.json")
    p.add_argument("--case", required=True, help=".m case file path or bundled name")
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int, required=True)
    p.add_argument("--n-attacked-per-scale", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a locator on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="print meter/row accuracy of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("attack", help="run one attack cell against fresh samples")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--variant", required=True,
                   choices=["lesson1", "lesson2", "lesson3", "lesson4"])
    p.add_argument("--scale", required=True, choices=["small", "medium", "large"])
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--uncontrolled-frac", type=float, default=0.0)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser("sweep", help="run an experiment plan and emit reports")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (FdialabError, FileNotFoundError, OSError, ValueError) as exc:
        line = json.dumps({"error": {"type": type(exc).__name__,
                                     "message": str(exc)}})
        print(line, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
