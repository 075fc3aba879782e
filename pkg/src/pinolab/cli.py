"""Command-line entry point: dataset generation, training, test-time
optimization, inversion, and evaluation.

Every command resolves its configuration (JSON config file, overridden by
flags), writes it to ``run.json`` in the output directory, and can be
replayed from that file.  All randomness derives from the run seed.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import fno, inverse, losses, simulate, train
from .fieldio import load_field, save_field
from .grids import Field


def _write_run_record(out_dir: Path, command: str, resolved: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config": resolved}
    (out_dir / "run.json").write_text(json.dumps(record, indent=1))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _resolve(args, keys, config_file):
    """Config-file values overridden by explicitly passed flags."""
    resolved = dict(config_file)
    for key in keys:
        value = getattr(args, key)
        if value is not None:
            resolved[key] = value
    return resolved


_MODEL_DEFAULTS = {
    # mirrors the reported experimental setup: Adam at 1e-3 halved every
    # 100 epochs for 500 epochs, width 64, 20 retained modes
    "epochs": 500,
    "lr": 1e-3,
    "lr_half_every": 100,
    "width": 64,
    "modes": 20,
    "layers": 4,
    "alpha": 1.0,
    "beta": 1.0,
    "K": 0,
    "seed": 0,
    "data_weight": 1.0,
    "pde_weight": 1.0,
    "nt": 65,
}


def _problem_dims(problem: str) -> int:
    return {"burgers": 2, "darcy": 2}.get(problem, 3)


def _problem_in_channels(problem: str) -> int:
    return {"burgers": 3, "darcy": 3}.get(problem, 4)


def cmd_gen(args) -> int:
    config = _resolve(
        args, ["problem", "count", "res", "nt", "horizon", "seed", "nu", "jobs"],
        _load_config_file(args.config),
    )
    config.setdefault("nt", 65)
    config.setdefault("horizon", 1.0)
    config.setdefault("seed", 0)
    config.setdefault("jobs", 1)
    config.setdefault("nu", None)
    out_dir = Path(args.out)
    problem = config["problem"]
    grf_name = {"burgers": "burgers", "darcy": "darcy",
                "ns-taylor-green": "ns-transient",
                "ns-kolmogorov": "ns-kolmogorov"}[problem]
    grf = simulate.grf_preset(grf_name, config["res"], config["seed"])
    solver = simulate.SolverConfig(
        resolution=config["res"], time_steps=config["nt"], horizon=config["horizon"]
    )
    _write_run_record(out_dir, "gen", config)
    manifest = simulate.generate_dataset(
        problem, config["count"], grf, solver, out_dir,
        nu=config["nu"], jobs=config["jobs"],
    )
    failed = sum(1 for entry in manifest.instances if entry["failed"])
    print(f"manifest: {out_dir / 'manifest.json'}")
    print(f"instances: {manifest.count - failed} ok, {failed} failed")
    _print_residual_summary(out_dir)
    if failed * 2 > manifest.count:
        print("error: more than half of the instances failed", file=sys.stderr)
        return 1
    return 0


def _print_residual_summary(out_dir: Path):
    from .autodiff import Tape

    pairs = simulate.load_dataset(out_dir / "manifest.json")
    if not pairs:
        return
    residuals = []
    for inst, target in pairs[: min(len(pairs), 8)]:
        report = losses.pde_loss(target, inst, losses.LossWeights(), Tape())
        residuals.append(report.interior)
    print(f"solver residual (interior MSE, first {len(residuals)}): "
          f"mean {np.mean(residuals):.3e} max {np.max(residuals):.3e}")


def _train_config(config: dict) -> train.TrainConfig:
    return train.TrainConfig(
        epochs=config["epochs"],
        learning_rate=config["lr"],
        lr_halving_period=config["lr_half_every"],
        virtual_per_pair=config["K"],
        alpha=config["alpha"],
        beta=config["beta"],
        data_weight=config["data_weight"],
        pde_weight=config["pde_weight"],
        seed=config["seed"],
        time_steps=config["nt"],
    )


def cmd_train(args) -> int:
    file_config = _load_config_file(args.config)
    config = dict(_MODEL_DEFAULTS)
    config.update(file_config)
    config.update(
        {k: v for k, v in vars(args).items()
         if k in ("problem", "epochs", "lr", "lr_half_every", "K", "width",
                  "modes", "layers", "alpha", "beta", "seed", "data_weight",
                  "pde_weight", "nt", "res") and v is not None}
    )
    out_dir = Path(args.out)
    problem = config["problem"]
    pde_only = args.pde_only or not args.manifest
    dataset = []
    template = None
    if args.manifest:
        dataset = simulate.load_dataset(args.manifest)
        config.setdefault("res", dataset[0][1].grid.resolution[0])
        if args.nt is None and "nt" not in file_config and not isinstance(
            dataset[0][0], losses.Darcy
        ):
            config["nt"] = dataset[0][1].grid.resolution[-1]
    if pde_only:
        if "res" not in config:
            print("error: --pde-only requires --res", file=sys.stderr)
            return 2
        dataset_for_training = []
    else:
        dataset_for_training = dataset
    grf_name = {"burgers": "burgers", "darcy": "darcy",
                "ns-taylor-green": "ns-transient",
                "ns-kolmogorov": "ns-kolmogorov"}[problem]
    resolution = config.get("res") or dataset[0][1].grid.resolution[0]
    sampler = simulate.grf_preset(grf_name, resolution, config["seed"] + 1)
    if pde_only or config["K"] > 0:
        template = _template_instance(problem, resolution, config)
    model_config = fno.FnoConfig(
        in_channels=_problem_in_channels(problem),
        out_channels=1,
        width=config["width"],
        modes=config["modes"],
        layers=config["layers"],
        dims=_problem_dims(problem),
    )
    params = fno.init_params(model_config, config["seed"])
    tconfig = _train_config(config)
    if pde_only:
        tconfig = train.TrainConfig(
            **{**asdict(tconfig), "virtual_per_pair": max(1, config["K"])}
        )
    _write_run_record(out_dir, "train", config)
    history = train.pretrain(
        params, dataset_for_training, tconfig, sampler=sampler, template=template
    )
    history.save_csv(out_dir / "history.csv")
    fno.save_model(out_dir / "model.ckpt", params)
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    print(f"history: {out_dir / 'history.csv'} ({len(history.rows)} steps)")
    if history.rows:
        first, last = history.rows[0], history.rows[-1]
        print(f"total loss: {first['total']:.4e} -> {last['total']:.4e}")
    return 0


def _template_instance(problem: str, resolution: int, config: dict):
    rng = np.random.default_rng(config["seed"] + 2)
    grf_name = {"burgers": "burgers", "darcy": "darcy",
                "ns-taylor-green": "ns-transient",
                "ns-kolmogorov": "ns-kolmogorov"}[problem]
    grf = simulate.grf_preset(grf_name, resolution, config["seed"] + 2)
    input_field = simulate.sample_problem_input(problem, grf, rng)
    manifest = simulate.DatasetManifest(
        problem=problem, count=0, grf={}, solver={"horizon": config.get("horizon", 1.0)},
        nu=config.get("nu") or simulate._DEFAULT_NU.get(problem), seed=0, instances=[],
    )
    forcing = (
        simulate.kolmogorov_forcing(resolution) if problem == "ns-kolmogorov" else None
    )
    return simulate.make_instance(manifest, input_field, forcing)


def cmd_finetune(args) -> int:
    config = _resolve(
        args,
        ["steps", "lr", "anchor_weight", "alpha", "beta", "nt", "seed", "instance"],
        _load_config_file(args.config),
    )
    config.setdefault("steps", 200)
    config.setdefault("lr", 1e-3)
    config.setdefault("anchor_weight", 0.0)
    config.setdefault("alpha", 1.0)
    config.setdefault("beta", 1.0)
    config.setdefault("seed", 0)
    out_dir = Path(args.out)
    params = fno.load_model(args.checkpoint)
    pairs = simulate.load_dataset(args.manifest)
    index = config.get("instance", 0)
    inst, target = pairs[index]
    nt = None if isinstance(inst, losses.Darcy) else target.grid.resolution[-1]
    tconfig = train.TrainConfig(
        epochs=config["steps"], learning_rate=config["lr"],
        lr_halving_period=max(1, config["steps"] // 2),
        anchor_weight=config["anchor_weight"], alpha=config["alpha"],
        beta=config["beta"], seed=config["seed"], time_steps=nt,
    )
    _write_run_record(out_dir, "finetune", config)
    result = train.finetune(params, inst, tconfig)
    save_field(out_dir / "solution", result.solution)
    fno.save_model(out_dir / "model.ckpt", result.params)
    rel = float(
        np.linalg.norm(result.solution.values - target.values)
        / np.linalg.norm(target.values)
    )
    report = {
        "status": result.status,
        "equation_error_before": result.equation_error_before,
        "equation_error_after": result.equation_error_after,
        "relative_l2_vs_reference": rel,
    }
    (out_dir / "finetune.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report, indent=1))
    return 0


def cmd_invert(args) -> int:
    config = _resolve(
        args,
        ["mode", "steps", "lr", "tv_weight", "anchor_weight", "instance", "seed"],
        _load_config_file(args.config),
    )
    config.setdefault("mode", "forward")
    config.setdefault("steps", 200)
    config.setdefault("lr", 0.05)
    config.setdefault("tv_weight", 0.0)
    config.setdefault("anchor_weight", 0.0)
    config.setdefault("instance", 0)
    config.setdefault("seed", 0)
    out_dir = Path(args.out)
    params = fno.load_model(args.checkpoint)
    pairs = simulate.load_dataset(args.manifest)
    inst, target = pairs[config["instance"]]
    iconfig = inverse.InverseConfig(
        mode=config["mode"], steps=config["steps"], learning_rate=config["lr"],
        tv_weight=config["tv_weight"], anchor_weight=config["anchor_weight"],
        seed=config["seed"],
    )
    _write_run_record(out_dir, "invert", config)
    if config["mode"] == "forward":
        result = inverse.invert_forward(params, target, iconfig)
    else:
        result = inverse.invert_backward(params, target, iconfig)
    accuracy, classified = inverse.coefficient_classify(
        result.a_hat, inst.a, iconfig.threshold
    )
    save_field(out_dir / "a_hat", result.a_hat)
    save_field(out_dir / "a_classified", classified)
    history_file = out_dir / "objective.csv"
    history_file.write_text(
        "step,objective\n"
        + "\n".join(f"{i},{v}" for i, v in enumerate(result.objective_history))
    )
    report = {
        "classification_accuracy": accuracy,
        "steps": config["steps"],
        "status": result.status,
        "objective_history_file": str(history_file),
    }
    (out_dir / "invert.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report, indent=1))
    return 0


def cmd_eval(args) -> int:
    config = _resolve(args, ["res", "alpha", "beta"], _load_config_file(args.config))
    out_dir = Path(args.out)
    params = fno.load_model(args.checkpoint)
    pairs = simulate.load_dataset(args.manifest)
    resolutions = None
    if config.get("res"):
        resolutions = [int(r) for r in str(config["res"]).split(",")]
    weights = losses.LossWeights(
        alpha=config.get("alpha", 1.0), beta=config.get("beta", 1.0)
    )
    _write_run_record(out_dir, "eval", config)
    reports = train.evaluate(params, pairs, resolutions, weights)
    payload = []
    lines = ["resolution,index,relative_l2,degenerate"]
    for report in reports:
        payload.append(
            {
                "resolution": report.resolution,
                "relative_l2_mean": report.relative_l2_mean,
                "equation_error_mean": report.equation_error_mean,
                "entries": [asdict(e) for e in report.entries],
            }
        )
        for entry in report.entries:
            lines.append(
                f"{report.resolution},{entry.index},{entry.relative_l2},"
                f"{int(entry.degenerate)}"
            )
    (out_dir / "eval.json").write_text(json.dumps(payload, indent=1))
    (out_dir / "eval.csv").write_text("\n".join(lines) + "\n")
    for report in reports:
        print(
            f"res {report.resolution}: relative_l2 {report.relative_l2_mean:.4f} "
            f"equation_error {report.equation_error_mean:.4f}"
        )
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    for name in ("run.json", "eval.json", "finetune.json", "invert.json"):
        path = out_dir / name
        if path.exists():
            print(f"== {name}")
            print(path.read_text())
    history = out_dir / "history.csv"
    if history.exists():
        lines = history.read_text().strip().splitlines()
        print(f"== history.csv ({len(lines) - 1} steps)")
        print(lines[0])
        for line in lines[1:3] + lines[-2:]:
            print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pinolab",
        description="Spectral PDE / neural-operator laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a solver dataset")
    gen.add_argument("--problem", choices=simulate.PROBLEMS, required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--res", type=int, required=True)
    gen.add_argument("--nt", type=int)
    gen.add_argument("--horizon", type=float)
    gen.add_argument("--nu", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--jobs", type=int)
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="pre-train an operator")
    tr.add_argument("--problem", choices=simulate.PROBLEMS, required=True)
    tr.add_argument("--manifest")
    tr.add_argument("--pde-only", action="store_true")
    tr.add_argument("--res", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--lr-half-every", type=int, dest="lr_half_every")
    tr.add_argument("--K", type=int, dest="K")
    tr.add_argument("--width", type=int)
    tr.add_argument("--modes", type=int)
    tr.add_argument("--layers", type=int)
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--beta", type=float)
    tr.add_argument("--data-weight", type=float, dest="data_weight")
    tr.add_argument("--pde-weight", type=float, dest="pde_weight")
    tr.add_argument("--nt", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--config")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ft = sub.add_parser("finetune", help="test-time optimization on one instance")
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--manifest", required=True)
    ft.add_argument("--instance", type=int)
    ft.add_argument("--steps", type=int)
    ft.add_argument("--lr", type=float)
    ft.add_argument("--anchor-weight", type=float, dest="anchor_weight")
    ft.add_argument("--alpha", type=float)
    ft.add_argument("--beta", type=float)
    ft.add_argument("--nt", type=int)
    ft.add_argument("--seed", type=int)
    ft.add_argument("--config")
    ft.add_argument("--out", required=True)
    ft.set_defaults(func=cmd_finetune)

    inv = sub.add_parser("invert", help="recover a Darcy coefficient")
    inv.add_argument("--checkpoint", required=True)
    inv.add_argument("--manifest", required=True)
    inv.add_argument("--mode", choices=("forward", "backward"))
    inv.add_argument("--instance", type=int)
    inv.add_argument("--steps", type=int)
    inv.add_argument("--lr", type=float)
    inv.add_argument("--tv-weight", type=float, dest="tv_weight")
    inv.add_argument("--anchor-weight", type=float, dest="anchor_weight")
    inv.add_argument("--seed", type=int)
    inv.add_argument("--config")
    inv.add_argument("--out", required=True)
    inv.set_defaults(func=cmd_invert)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--res", help="comma-separated resolutions, e.g. 32,64,128")
    ev.add_argument("--alpha", type=float)
    ev.add_argument("--beta", type=float)
    ev.add_argument("--config")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
