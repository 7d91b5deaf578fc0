"""Batch command-line interface tying the pipeline together.

Subcommands: gen-data, label, train, eval, plan, plot.  Configuration layers
as file < MMNTP_SEED environment variable < flags; every artifact embeds the
resolved run configuration and seed.  Exit codes: 0 ok, 2 config error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import (
    RunConfig,
    derive_seed,
    layered_get,
    load_config_file,
    resolve_seed,
)
from .dataset import (
    DatasetConfig,
    balance_dataset,
    build_dataset,
    class_counts,
    read_samples_jsonl,
    split_dataset,
    write_samples_jsonl,
)
from .errors import ConfigError, DataError, MmntpError
from .features import extract_features
from .manoeuvre import ManoeuvreType, auto_label_trajectory
from .metrics import build_evaluation_batch, build_report
from .model import ModelConfig, desk_config, load_checkpoint, new_model, save_checkpoint
from .planner import (
    EgoState,
    PlannerConfig,
    plan_contingency,
    plan_from_json_dict,
    plan_to_json,
    select_target_vehicle,
)
from .scene import GeneratorConfig, LaneGeometry, generate_scene, scene_from_csv, scene_to_csv
from .training import TrainConfig, fit, history_to_csv


def _section(args) -> dict[str, str]:
    if getattr(args, "config", None):
        sections = load_config_file(args.config)
        return sections.get(args.cmd_section, {})
    return {}


def _run_config(args, seed: int, keys: dict) -> RunConfig:
    return RunConfig(command=args.command, seed=seed,
                     params={k: v for k, v in keys.items() if v is not None})


# ----------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    section = _section(args)
    flags = vars(args)
    get = lambda key, cast, default: layered_get(section, flags, key.replace("-", "_"), cast, default)

    seed = resolve_seed(args.seed, section.get("seed"))
    gen_cfg = GeneratorConfig(
        lanes=get("lanes", int, 3),
        lane_width=get("lane_width", float, 3.5),
        fps=get("fps", int, 5),
        duration_s=get("duration_s", float, 40.0),
        n_vehicles=get("n_vehicles", int, 12),
        lc_rate=get("lc_rate", float, 0.4),
        speed_min=get("speed_min", float, 18.0),
        speed_max=get("speed_max", float, 30.0),
    )
    data_cfg = DatasetConfig(
        t_obs=get("t_obs", int, 15),
        t_pred=get("t_pred", int, 25),
        t_change=get("t_change", int, 13),
        stride=get("stride", int, 5),
    )
    n_scenes = get("n_scenes", int, 8)
    balance = get("balance", bool, True)
    test_fraction = get("test_fraction", float, 0.2)

    rc = _run_config(args, seed, {
        "gen": vars(gen_cfg), "dataset": vars(data_cfg), "n_scenes": n_scenes,
        "balance": balance, "test_fraction": test_fraction,
    })
    rc_dict = rc.to_json_dict()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes, refs = [], []
    for i in range(n_scenes):
        scene = generate_scene(gen_cfg, derive_seed(seed, f"scene_{i}"))
        ref = f"scene_{i:04d}"
        scene_to_csv(scene, out / f"{ref}.csv", run_config=rc_dict)
        scenes.append(scene)
        refs.append(ref)

    samples = build_dataset(scenes, data_cfg, refs)
    if balance:
        samples = balance_dataset(samples, derive_seed(seed, "balance"))
    train, test = split_dataset(samples, test_fraction, derive_seed(seed, "split"))
    write_samples_jsonl(train, out / "samples_train.jsonl", run_config=rc_dict)
    write_samples_jsonl(test, out / "samples_test.jsonl", run_config=rc_dict)

    meta = {
        "run_config": rc_dict,
        "n_scenes": n_scenes,
        "n_train": len(train),
        "n_test": len(test),
        "class_counts": {str(k): v for k, v in sorted(class_counts(samples).items())},
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote {n_scenes} scenes, {len(train)} train / {len(test)} test samples to {out}")
    return 0


# ----------------------------------------------------------------------
# label
# ----------------------------------------------------------------------

def cmd_label(args) -> int:
    section = _section(args)
    seed = resolve_seed(args.seed, section.get("seed"))
    geometry = None
    if args.markings:
        markings = [float(v) for v in args.markings.split(",")]
        geometry = LaneGeometry(
            lane_count=len(markings) - 1,
            lane_width=float(np.mean(np.diff(markings))),
            marking_lats=np.asarray(markings),
            road_bounds=(markings[0], markings[-1]),
        )
    scene = scene_from_csv(args.scene, fps=args.fps, geometry=geometry)
    rc = _run_config(args, seed, {"scene": str(args.scene), "eps": args.eps})

    lines = ["# mmntp: " + json.dumps({"run_config": rc.to_json_dict()}, sort_keys=True)]
    lines.append("frame,id,label")
    for vid in scene.vehicle_ids():
        track = scene.tracks[vid]
        labels = auto_label_trajectory(
            track.states[:, :2], scene.geometry.marking_lats, scene.fps,
            lateral_speed_eps=args.eps,
        )
        for offset, value in enumerate(labels):
            lines.append(f"{track.first_frame + offset},{vid},{ManoeuvreType(int(value)).code}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"labelled {len(scene.tracks)} tracks into {args.out}")
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------

def _resolve_data_path(path_str: str) -> Path:
    path = Path(path_str)
    if path.is_dir():
        candidate = path / "samples_train.jsonl"
        if not candidate.exists():
            raise DataError(f"{path} has no samples_train.jsonl")
        return candidate
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    return path


def cmd_train(args) -> int:
    section = _section(args)
    flags = vars(args)
    get = lambda key, cast, default: layered_get(section, flags, key, cast, default)

    seed = resolve_seed(args.seed, section.get("seed"))
    samples = read_samples_jsonl(_resolve_data_path(args.data))
    if not samples:
        raise DataError("training set is empty")

    t_obs, n_features = samples[0].features.shape
    t_pred = samples[0].future_traj.shape[0]
    base = desk_config() if get("desk", bool, True) else ModelConfig()
    model_cfg = ModelConfig(
        n_features=n_features,
        t_obs=t_obs,
        t_pred=t_pred,
        t_change=get("t_change", int, 13),
        fps=get("fps", int, 5),
        n_modes=get("n_modes", int, base.n_modes),
        d_model=get("d_model", int, base.d_model),
        n_heads=get("n_heads", int, base.n_heads),
        n_layers=get("n_layers", int, base.n_layers),
        d_ff=get("d_ff", int, base.d_ff),
        mlp_hidden=get("mlp_hidden", int, base.mlp_hidden),
        manoeuvre_conditioning=not get("no_manoeuvre_conditioning", bool, False),
    )
    train_cfg = TrainConfig(
        epochs=get("epochs", int, 20),
        batch_size=get("batch_size", int, 32),
        learning_rate=get("learning_rate", float, 1e-3),
        warmup_epochs=get("warmup_epochs", int, 10),
        seed=derive_seed(seed, "train"),
        mode_selection=get("mode_selection", str, "MMP"),
    )
    rc = _run_config(args, seed, {
        "data": str(args.data), "model": vars(model_cfg),
        "train": {**vars(train_cfg)},
    })
    rc_dict = rc.to_json_dict()

    model = new_model(model_cfg, derive_seed(seed, "init"))
    history = fit(model, samples, train_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, run_config=rc_dict)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    history_to_csv(history, loss_csv, run_config=rc_dict)
    print(f"trained {train_cfg.epochs} epochs on {len(samples)} samples; "
          f"final L_total={history[-1].l_total:.4f}; checkpoint {out}")
    return 0


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------

def _load_scenes_dir(path_str: str | None) -> dict:
    if path_str is None:
        return {}
    path = Path(path_str)
    if not path.is_dir():
        raise DataError(f"scene directory {path} does not exist")
    return {p.stem: scene_from_csv(p) for p in sorted(path.glob("scene_*.csv"))}


def cmd_eval(args) -> int:
    section = _section(args)
    seed = resolve_seed(args.seed, section.get("seed"))
    model, header = load_checkpoint(args.ckpt)
    samples = read_samples_jsonl(_resolve_data_path(args.data)
                                 if not Path(args.data).is_dir()
                                 else Path(args.data) / "samples_test.jsonl")
    scenes = _load_scenes_dir(args.scenes)
    ks = sorted({int(v) for v in args.k.split(",")})
    if any(k < 1 or k > model.config.n_modes for k in ks):
        raise ConfigError(f"k values {ks} outside [1, {model.config.n_modes}]")

    rc = _run_config(args, seed, {
        "ckpt": str(args.ckpt), "data": str(args.data), "k": ks,
        "model": header.get("config", {}),
    })
    rc_dict = rc.to_json_dict()

    batch = build_evaluation_batch(model, samples, scenes)
    report = build_report(
        batch, ks=ks,
        meta={"run_config": rc_dict, "seed": seed},
        plausibility=bool(scenes),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(
        "# mmntp: " + json.dumps({"run_config": rc_dict}, sort_keys=True) + "\n" + report.to_csv()
    )
    (out / "metrics.txt").write_text(report.to_text_table())
    if args.figures:
        from .plotting import render_metric_curves

        render_metric_curves(out / "rmse_horizons.svg", report,
                             description={"run_config": rc_dict})
    print(report.to_text_table())
    return 0


# ----------------------------------------------------------------------
# plan
# ----------------------------------------------------------------------

def _parse_ego(text: str) -> EgoState:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise ConfigError("--ego expects 'x,lat,vx,vlat'")
    return EgoState(position=(parts[0], parts[1]), velocity=(parts[2], parts[3]))


def cmd_plan(args) -> int:
    section = _section(args)
    seed = resolve_seed(args.seed, section.get("seed"))
    model, _ = load_checkpoint(args.ckpt)
    scene = scene_from_csv(args.scene)
    ego = _parse_ego(args.ego)
    frame = args.frame

    tv_id = args.tv if args.tv is not None else select_target_vehicle(scene, ego, frame)
    features = extract_features(scene, tv_id, frame, model.config.t_obs)
    modes = model.infer(features)

    planner_cfg = PlannerConfig(
        dt=1.0 / model.config.fps,
        horizon=args.horizon or model.config.t_pred,
        tv_id=tv_id,
        frame=frame,
        target_lat=args.target_lat,
        desired_speed=args.desired_speed,
        w_prox=args.w_prox,
    )
    rc = _run_config(args, seed, {
        "ckpt": str(args.ckpt), "scene": str(args.scene), "frame": frame,
        "tv_id": tv_id, "ego": args.ego,
    })
    plan = plan_contingency(ego, modes, scene, planner_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(plan_to_json(plan, run_config=rc.to_json_dict(), seed=seed))
    if args.figure:
        from .plotting import render_plan_figure

        render_plan_figure(args.figure, plan, scene=scene, frame=frame,
                           description={"run_config": rc.to_json_dict()})
    print(f"planned {len(plan.branches)} branches for TV {tv_id}; "
          f"objective {plan.objective:.4f}, KKT residual {plan.kkt_residual:.2e}")
    return 0


# ----------------------------------------------------------------------
# plot
# ----------------------------------------------------------------------

def cmd_plot(args) -> int:
    from . import plotting

    section = _section(args)
    seed = resolve_seed(args.seed, section.get("seed"))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = args.format
    scene = scene_from_csv(args.scene)
    rc = _run_config(args, seed, {"scene": str(args.scene), "frame": args.frame})
    desc = {"run_config": rc.to_json_dict()}

    written = []
    plotting.render_scene_figure(out_dir / f"scene.{fmt}", scene, args.frame, description=desc)
    written.append(f"scene.{fmt}")

    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        tv_id = args.tv if args.tv is not None else select_target_vehicle(
            scene, _parse_ego(args.ego) if args.ego else
            EgoState(position=(0.0, scene.geometry.lane_center(0)), velocity=(20.0, 0.0)),
            args.frame,
        )
        modes = model.infer(extract_features(scene, tv_id, args.frame, model.config.t_obs))
        plotting.render_prediction_figure(
            out_dir / f"prediction.{fmt}", scene, args.frame, tv_id, modes, description=desc)
        written.append(f"prediction.{fmt}")

    if args.plan:
        with open(args.plan, encoding="utf-8") as fh:
            plan = plan_from_json_dict(json.load(fh))
        plotting.render_plan_figure(out_dir / f"plan.{fmt}", plan, scene=scene,
                                    frame=args.frame, description=desc)
        written.append(f"plan.{fmt}")
    print(f"wrote {', '.join(written)} to {out_dir}")
    return 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmntp",
        description="Multimodal manoeuvre/trajectory prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, section):
        p.add_argument("--config", help="INI config file; flags override file values")
        p.add_argument("--seed", type=int, default=None,
                       help="root seed (overrides MMNTP_SEED and config file)")
        p.set_defaults(cmd_section=section)

    p = sub.add_parser("gen-data", help="generate synthetic scenes and dataset splits")
    add_common(p, "gen")
    p.add_argument("--out", required=True)
    for name, cast in (
        ("lanes", int), ("lane-width", float), ("fps", int), ("duration-s", float),
        ("n-vehicles", int), ("lc-rate", float), ("speed-min", float), ("speed-max", float),
        ("n-scenes", int), ("t-obs", int), ("t-pred", int), ("t-change", int), ("stride", int),
        ("test-fraction", float),
    ):
        p.add_argument(f"--{name}", type=cast, default=None)
    p.add_argument("--balance", action="store_true", default=None)
    p.add_argument("--no-balance", dest="balance", action="store_false")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("label", help="auto-label a highD-schema recording")
    add_common(p, "label")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=int, default=None)
    p.add_argument("--markings", help="comma-separated lateral marking positions")
    p.add_argument("--eps", type=float, default=0.05, help="lateral speed threshold [m/s]")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a model on a samples file")
    add_common(p, "train")
    p.add_argument("--data", required=True, help="samples JSONL or gen-data output dir")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", default=None)
    for name, cast in (
        ("epochs", int), ("batch-size", int), ("learning-rate", float),
        ("warmup-epochs", int), ("n-modes", int), ("d-model", int), ("n-heads", int),
        ("n-layers", int), ("d-ff", int), ("mlp-hidden", int), ("t-change", int), ("fps", int),
    ):
        p.add_argument(f"--{name}", type=cast, default=None)
    p.add_argument("--mode-selection", choices=["MMP", "MTP"], default=None)
    p.add_argument("--desk", action="store_true", default=None,
                   help="desk-scale model dims (default)")
    p.add_argument("--full", dest="desk", action="store_false",
                   help="full-scale model dims")
    p.add_argument("--no-manoeuvre-conditioning", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the metric suite")
    add_common(p, "eval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="samples JSONL or gen-data output dir")
    p.add_argument("--scenes", default=None, help="directory of scene CSVs for plausibility metrics")
    p.add_argument("--out", required=True)
    p.add_argument("--k", default="1,3", help="comma-separated K values")
    p.add_argument("--figures", action="store_true", default=True)
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="contingency-plan against predicted modes")
    add_common(p, "plan")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--ego", required=True, help="'x,lat,vx,vlat'")
    p.add_argument("--out", required=True)
    p.add_argument("--tv", type=int, default=None, help="target vehicle id (default: auto)")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--target-lat", type=float, default=None)
    p.add_argument("--desired-speed", type=float, default=None)
    p.add_argument("--w-prox", type=float, default=4.0)
    p.add_argument("--figure", default=None, help="optional plan figure path")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("plot", help="render scene/prediction/plan figures")
    add_common(p, "plot")
    p.add_argument("--scene", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--tv", type=int, default=None)
    p.add_argument("--ego", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=["svg", "pdf"], default="svg")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MmntpError as exc:
        print(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": exc.exit_code,
        }), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - unexpected failures
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 1}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
