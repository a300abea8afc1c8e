"""Command-line driver for data generation, training, evaluation, and reports.

Every command exits 0 on success and nonzero with the failing stage named on
stderr. Reports are deterministic JSON; timing goes to a sidecar file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def cmd_gen_data(args) -> int:
    from .nbody import GeneratorConfig, build_dataset, save_dataset

    overrides = _load_config(args.config).get("generator", {})
    cfg = GeneratorConfig.from_dict({**GeneratorConfig().to_dict(), **overrides})
    ds = build_dataset(args.trajectories, cfg, seed=args.seed)
    out = Path(args.out) / "planets.mtd" if Path(args.out).suffix == "" else Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    print(f"wrote {ds.n_trajectories} trajectories to {out}")
    return 0


def cmd_validate(args) -> int:
    from .nbody import load_dataset, validate_dataset

    ds = load_dataset(args.dataset)
    report = validate_dataset(ds)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def _experiment_config(args):
    from .experiments import ExperimentConfig

    overrides = _load_config(args.config).get("experiment", {})
    base = ExperimentConfig().to_dict()
    base.update(overrides)
    if args.dataset is not None:
        base["dataset_path"] = args.dataset
    if args.seed is not None:
        base["seeds"] = [args.seed]
    if args.mode is not None:
        base["train_mode"] = args.mode
    if args.steps is not None:
        base["train_inner_steps"] = args.steps
    if args.inner_lr is not None:
        base["inner_lr"] = args.inner_lr
    if args.outer_lr is not None:
        base["outer_lr"] = args.outer_lr
    if args.out is not None:
        base["out_dir"] = args.out
    from .experiments import ExperimentConfig as EC

    return EC.from_dict(base)


def cmd_train(args) -> int:
    from . import autodiff as ad
    from .engine import TailorConfig, TrainData, train_cngrad, train_inductive, train_mammoth
    from .experiments import _resolve_dataset
    from .losses import conservation_inner, conservation_tailor_loss_per_row, mse
    from .net import save_checkpoint

    cfg = _experiment_config(args)
    ds = _resolve_dataset(cfg)
    data = TrainData(*ds.train_pairs)
    model_cfg = cfg.model_config()
    inner = conservation_inner(ds.stats, ds.config.g_const)
    seed = cfg.seeds[0]
    mode = cfg.train_mode
    if mode in ("inductive", "inductive_aux"):
        aux = None
        weight = 0.0
        if mode == "inductive_aux":
            weight = cfg.aux_weight if cfg.aux_weight > 0 else 2e-3
            aux = lambda xb, pred: ad.mean_all(
                conservation_tailor_loss_per_row(xb, pred, ds.stats, ds.config.g_const)
            )
        params, log = train_inductive(
            data, model_cfg, mse, aux_loss=aux, aux_weight=weight,
            epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
            outer_lr=cfg.outer_lr, momentum=cfg.momentum,
        )
    elif mode in ("cngrad1", "cngrad2", "mammoth1", "mammoth2"):
        tc = TailorConfig(
            steps=cfg.train_inner_steps, inner_lr=cfg.inner_lr, outer_lr=cfg.outer_lr,
            order="second" if mode.endswith("2") else "first",
            outer_momentum=cfg.momentum,
        )
        trainer = train_cngrad if mode.startswith("cngrad") else train_mammoth
        params, log = trainer(
            data, model_cfg, mse, inner, tc,
            epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
        )
    elif mode == "metalearn":
        from .experiments import SinusoidConfig, sinusoid_experiment

        report = sinusoid_experiment(SinusoidConfig(seed=seed))
        _write_json(Path(cfg.out_dir) / "metalearn.json", report)
        print(json.dumps(report["config"], sort_keys=True))
        print(f"adapted {report['adapted_query_mse']:.4f} vs unadapted "
              f"{report['unadapted_query_mse']:.4f} (ratio {report['ratio']:.3f})")
        return 0
    else:
        raise ValueError(f"unknown mode {mode}")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / f"{mode}_seed{seed}.ckpt", model_cfg, params)
    log.save_jsonl(out / f"{mode}_seed{seed}_trainlog.jsonl")
    print(f"trained {mode} (seed {seed}); final train loss "
          f"{log.records[-1].train_loss:.6e}")
    return 0


def cmd_eval(args) -> int:
    from .experiments import _resolve_dataset, tailored_eval_curve, _plain_test_mse
    from .net import load_checkpoint

    cfg = _experiment_config(args)
    ds = _resolve_dataset(cfg)
    model_cfg, params = load_checkpoint(args.checkpoint)
    steps = sorted(set(cfg.eval_steps))
    curve = tailored_eval_curve(model_cfg, params, ds, cfg.inner_lr, steps)
    payload = {
        "checkpoint": str(args.checkpoint),
        "plain_mse": _plain_test_mse(model_cfg, params, ds),
        "curve": {str(s): curve[s] for s in steps},
    }
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def cmd_ladder(args) -> int:
    from .experiments import LADDER_MODES, compare_trend, run_ladder

    cfg = _experiment_config(args)
    report, timings = run_ladder(cfg)
    out = Path(cfg.out_dir)
    report.save(out)
    _write_json(out / "timings.json", timings)
    verdict = compare_trend(
        report,
        [
            ("inductive", 0),
            ("output_opt", cfg.output_opt_steps),
            ("batch_ttt", cfg.ttt_steps),
            ("tailoring", cfg.tailor_eval_steps),
            ("meta_tailoring", cfg.meta_eval_steps),
        ],
    )
    _write_json(out / "trend.json", verdict)
    print(json.dumps(verdict, indent=1, sort_keys=True))
    return 0 if verdict["pass"] else 4


def cmd_pendulum(args) -> int:
    from .experiments import PendulumExperimentConfig, pendulum_experiment

    overrides = _load_config(args.config).get("pendulum", {})
    cfg = PendulumExperimentConfig()
    for key, value in overrides.items():
        setattr(cfg, key, value)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    report = pendulum_experiment(cfg)
    if args.out:
        _write_json(Path(args.out) / "pendulum.json", report)
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, indent=1, sort_keys=True))
    return 0


def cmd_expressivity(args) -> int:
    from .expressivity import AugmentationSet, check_condition, corollary_rank_survey
    from .net import ModelConfig

    rng = np.random.default_rng(args.seed or 0)
    n_g, width = args.augmentations, args.width
    cfg = ModelConfig(widths=[args.input_dim, width, width, 1])
    aug = AugmentationSet.random_unit(n_g, args.input_dim, rng)
    if not check_condition(aug):
        print("expressivity: augmentation condition failed", file=sys.stderr)
        return 3
    report = corollary_rank_survey(cfg, aug, n_draws=args.draws, seed=args.seed or 0)
    report["condition_ok"] = True
    report["n_g"] = n_g
    report["hidden_width"] = width
    if args.out:
        _write_json(Path(args.out) / "expressivity.json", report)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    doc = json.loads(Path(args.report).read_text())
    rows = doc.get("aggregates", {})
    print(f"{'method':<24}{'loss':>12}{'relative':>10}{'stderr':>8}")
    for key, row in sorted(rows.items(), key=lambda kv: kv[1]["mean_relative_improvement"]):
        print(
            f"{key:<24}{row['mean_mse']:>12.6f}"
            f"{row['mean_relative_improvement']:>10.4f}"
            f"{row['stderr_relative_improvement']:>8.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metatailor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if dataset:
            p.add_argument("--dataset", default=None, help="dataset file path")
            p.add_argument("--mode", default=None)
            p.add_argument("--steps", type=int, default=None)
            p.add_argument("--inner-lr", dest="inner_lr", type=float, default=None)
            p.add_argument("--outer-lr", dest="outer_lr", type=float, default=None)

    p = sub.add_parser("gen-data", help="generate a planetary dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out/planets.mtd")
    p.add_argument("--trajectories", type=int, default=200)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("validate", help="replay a dataset and re-check its invariants")
    p.add_argument("dataset")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with adaptation step ladder")
    common(p)
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ladder", help="full comparison pipeline (table + curves)")
    common(p)
    p.set_defaults(fn=cmd_ladder)

    p = sub.add_parser("pendulum", help="long-horizon pendulum comparison")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_pendulum)

    p = sub.add_parser("expressivity", help="last-layer affine expressivity survey")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--augmentations", type=int, default=4)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--input-dim", dest="input_dim", type=int, default=4)
    p.set_defaults(fn=cmd_expressivity)

    p = sub.add_parser("report", help="render a saved report as a table")
    p.add_argument("report")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - single exit funnel with stage name
        print(f"metatailor {stage}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
