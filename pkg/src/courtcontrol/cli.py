"""Command-line entry point: one subcommand per pipeline stage.

Every run writes a manifest next to its primary output capturing the fully
resolved configuration and SHA-256 digests of the inputs; re-running with
the same manifest reproduces the outputs byte for byte (no timestamps ever
enter primary artifacts).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import analysis as an
from . import dataset as ds
from .checkpoint import save_checkpoint
from .encoder import VARIANTS
from .geometry import CourtGrid, cell_to_court, fit_homography, parse_calibration_file
from .infer import build_model_config, load_pipeline, pipeline_metadata, predict_map, predict_maps
from .positioning import recommend_both_levels
from .training import (
    AblationResult,
    FocalConfig,
    LossConfig,
    TrainConfig,
    ablation_run,
    evaluate_l1,
    train,
)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def write_manifest(out_path, subcommand: str, config: dict, inputs: list, outputs: list) -> None:
    manifest = {
        "tool": "courtcontrol",
        "subcommand": subcommand,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    _write_json(manifest, str(out_path) + ".manifest.json")


def _grid_from_args(args) -> CourtGrid:
    return CourtGrid(rows=args.grid_rows, cols=args.grid_cols)


def _add_grid_flags(p):
    p.add_argument("--grid-rows", type=int, default=112, help="grid rows along court length")
    p.add_argument("--grid-cols", type=int, default=56, help="grid cols along court width")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-6, help="Adam learning rate")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch", type=int, default=16, help="batch size")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--variant", choices=VARIANTS, default="full", help="input feature set")
    p.add_argument("--no-flip", action="store_true", help="disable horizontal-flip augmentation")
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")
    p.add_argument("--widths", default="4,8,16", help="U-Net channel widths c1,c2,c3")
    p.add_argument("--pose-dim", type=int, default=4, help="pose embedding size D")
    p.add_argument("--sigma", type=float, default=3.0, help="stamp std in cells")
    p.add_argument("--mu", type=float, default=0.03, help="spatial continuity weight")
    p.add_argument("--alpha", type=float, default=0.8, help="focal loss alpha")
    p.add_argument("--gamma", type=float, default=3.0, help="focal loss gamma")
    p.add_argument("--hit-ratio", type=float, default=0.8, help="hit samples train ratio")
    p.add_argument("--drop-ratio", type=float, default=0.5, help="drop samples train ratio")
    p.add_argument("--config", help="JSON run config; flags set explicitly override it")


def _train_configs(args, parser_defaults: dict) -> tuple[TrainConfig, LossConfig, dict]:
    cfg = {
        "lr": args.lr, "epochs": args.epochs, "batch": args.batch, "seed": args.seed,
        "variant": args.variant, "flip": not args.no_flip, "precision": args.precision,
        "widths": [int(w) for w in str(args.widths).split(",")],
        "pose_dim": args.pose_dim, "sigma": args.sigma,
        "mu": args.mu, "alpha": args.alpha, "gamma": args.gamma,
        "hit_ratio": args.hit_ratio, "drop_ratio": args.drop_ratio,
    }
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise SystemExit(f"error: unknown config keys: {sorted(unknown)}")
        for k, v in file_cfg.items():
            # explicit flags win over the config file
            if k not in _explicit_flags(parser_defaults, cfg):
                cfg[k] = v
    tc = TrainConfig(
        lr=cfg["lr"], epochs=cfg["epochs"], batch=cfg["batch"], seed=cfg["seed"],
        precision=cfg["precision"], flip=cfg["flip"], variant=cfg["variant"],
        widths=tuple(cfg["widths"]), pose_embed_dim=cfg["pose_dim"], sigma_cells=cfg["sigma"],
    )
    lc = LossConfig(mu=cfg["mu"], focal=FocalConfig(alpha=cfg["alpha"], gamma=cfg["gamma"]))
    return tc, lc, cfg


def _explicit_flags(defaults: dict, cfg: dict) -> set:
    return {k for k, v in cfg.items() if k in defaults and v != defaults[k]}


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(args) -> int:
    grid = _grid_from_args(args)
    errors = []
    calibration = None
    if args.calibration:
        pairs = parse_calibration_file(args.calibration)
        calibration, rms = fit_homography(pairs)
        print(f"calibration: {len(pairs)} pairs, RMS reprojection {rms:.4f} m")
    rallies = []
    if args.data:
        for name in sorted(os.listdir(args.data)):
            rdir = os.path.join(args.data, name)
            if not os.path.isdir(rdir) or not os.path.exists(os.path.join(rdir, "shuttle.csv")):
                continue
            game_id = name.rsplit("_", 1)[0]
            rallies.append((name, game_id, os.path.join(rdir, "shuttle.csv"),
                            os.path.join(rdir, "players.csv"),
                            os.path.join(rdir, "poses.csv")))
        if not rallies:
            print(f"error: no rally directories with shuttle.csv under {args.data}", file=sys.stderr)
            return 1
    else:
        problems = [f"--{flag} is required without --data" for flag in ("shuttle", "players")
                    if getattr(args, flag) is None]
        if problems:
            for p in problems:
                print(f"error: {p}", file=sys.stderr)
            return 1
        rallies.append((args.rally_id, args.game_id, args.shuttle, args.players, args.poses))

    samples = []
    inputs = [p for p in [args.calibration] if p]
    for rally_id, game_id, shuttle_path, players_path, poses_path in rallies:
        try:
            shuttle = ds.parse_shuttle_csv(shuttle_path)
            boxes = ds.parse_player_csv(players_path)
            poses = ds.parse_pose_csv(poses_path) if poses_path and os.path.exists(poses_path) else None
            rally = ds.Rally(rally_id, shuttle, boxes, poses, game_id=game_id)
            samples.extend(
                ds.extract_samples(rally, calibration, grid, include_prepare_states=args.prepare_states)
            )
            inputs.extend([shuttle_path, players_path] + ([poses_path] if poses else []))
        except (ds.ParseError, ds.AmbiguousReceiver, ds.InsufficientFrames) as e:
            errors.append(f"{rally_id}: {e}")
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        if not samples:
            return 1
    ds.write_samples(samples, args.out)
    labeled = sum(1 for s in samples if s.label >= 0)
    print(f"wrote {len(samples)} samples ({labeled} labeled) to {args.out}")
    write_manifest(args.out, "ingest", {"grid": [grid.rows, grid.cols], "prepare_states": args.prepare_states},
                   inputs, [args.out])
    return 0


def cmd_synth(args) -> int:
    grid = _grid_from_args(args)
    oracle = ds.SyntheticOracle(reach_m=args.reach, softness_m=args.softness, velocity_gain=args.velocity_gain)
    cfg = ds.SynthConfig(near_fraction=args.near_fraction, velocity_noise=args.velocity_noise)
    samples = ds.synth_generate(oracle, args.n, args.seed, grid, cfg)
    ds.write_samples(samples, args.out)
    hits = sum(s.label for s in samples)
    print(f"wrote {len(samples)} samples ({hits} hit / {len(samples) - hits} drop) to {args.out}")
    write_manifest(
        args.out, "synth",
        {"n": args.n, "seed": args.seed, "grid": [grid.rows, grid.cols],
         "oracle": dataclasses.asdict(oracle), "generator": dataclasses.asdict(cfg)},
        [], [args.out],
    )
    return 0


def cmd_train(args, parser_defaults) -> int:
    grid = _grid_from_args(args)
    tc, lc, cfg = _train_configs(args, parser_defaults)
    samples = [s for s in ds.read_samples(args.samples) if s.label in (0, 1)]
    train_set, test_set = ds.split_dataset(samples, cfg["hit_ratio"], cfg["drop_ratio"], tc.seed)
    print(f"training on {len(train_set)} samples ({len(test_set)} held out)")
    result = train(train_set, tc, lc, grid, log=print)

    model_cfg = build_model_config(grid, result.encoder_cfg, tc.widths, tc.gcn_hidden)
    meta = pipeline_metadata(grid, result.encoder_cfg, model_cfg,
                             {**tc.to_dict(), "mu": lc.mu, "alpha": lc.focal.alpha, "gamma": lc.focal.gamma})
    save_checkpoint(result.model.param_arrays(), meta, args.out)
    outputs = [args.out]
    if args.test_out:
        ds.write_samples(test_set, args.test_out)
        outputs.append(args.test_out)
    if args.report:
        report = {"curve": result.report.curve, "best_epoch": result.report.best_epoch}
        if test_set:
            ev = evaluate_l1(result.model, result.encoder_cfg, grid, test_set)
            report["l1"] = ev.to_dict()
            print(format_eval_table({"(this run)": ev}))
        _write_json(report, args.report)
        outputs.append(args.report)
    write_manifest(args.out, "train", cfg, [args.samples], outputs)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pipeline = load_pipeline(args.checkpoint)
    samples = [s for s in ds.read_samples(args.samples) if s.label in (0, 1)]
    ev = evaluate_l1(pipeline.model, pipeline.encoder_cfg, pipeline.grid, samples)
    print(format_eval_table({"(checkpoint)": ev}))
    _write_json({"l1": ev.to_dict(), "checkpoint_id": pipeline.checkpoint_id}, args.out)
    write_manifest(args.out, "eval", {}, [args.checkpoint, args.samples], [args.out])
    return 0


def format_eval_table(reports: dict) -> str:
    cols = list(reports)
    lines = ["{:<20}".format("Error") + "".join(f"{c:>18}" for c in cols)]
    for key, label in (("l1_hit", "Control (hit)"), ("l1_drop", "Non-control (drop)"), ("l1_all", "All")):
        row = f"{label:<20}"
        for c in cols:
            v = getattr(reports[c], key)
            row += f"{v:>18.4f}" if v is not None else f"{'-':>18}"
        lines.append(row)
    return "\n".join(lines)


def cmd_ablate(args, parser_defaults) -> int:
    grid = _grid_from_args(args)
    tc, lc, cfg = _train_configs(args, parser_defaults)
    samples = [s for s in ds.read_samples(args.samples) if s.label in (0, 1)]
    variants = args.variants.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = ablation_run(samples, variants, seeds, tc, lc, grid,
                          cfg["hit_ratio"], cfg["drop_ratio"], log=print)
    means = {v: dataclassish(result, v) for v in variants}
    print(format_eval_table(means))
    _write_json(result.to_dict(), args.out)
    write_manifest(args.out, "ablate", {**cfg, "variants": variants, "seeds": seeds},
                   [args.samples], [args.out])
    return 0


def dataclassish(result: AblationResult, variant: str):
    from .training import EvalReport

    def mean(key):
        vals = [getattr(result.reports[variant][s], key) for s in result.seeds]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    return EvalReport(
        l1_all=mean("l1_all"), l1_hit=mean("l1_hit"), l1_drop=mean("l1_drop"),
        n_hit=result.reports[variant][result.seeds[0]].n_hit,
        n_drop=result.reports[variant][result.seeds[0]].n_drop,
    )


def cmd_analyze(args) -> int:
    pipeline = load_pipeline(args.checkpoint)
    grid = pipeline.grid
    samples = ds.read_samples(args.samples)
    games_meta = {}
    with open(args.games) as f:
        header = f.readline().strip().split(",")
        for line in f:
            if not line.strip():
                continue
            rec = dict(zip(header, line.strip().split(",")))
            games_meta[(rec["game_id"], rec["side"])] = rec

    by_game_side: dict[tuple, list] = {}
    for s in samples:
        if s.game_id is None:
            continue
        by_game_side.setdefault((s.game_id, s.side), []).append(s)

    games = []
    for (game_id, side), group in sorted(by_game_side.items()):
        meta = games_meta.get((game_id, side))
        if meta is None:
            continue
        group = sorted(group, key=lambda s: (s.rally_id, s.frame))
        maps = predict_maps(pipeline, group)
        receive, prepare, aims = [], [], []
        by_rally: dict[str, list] = {}
        for s, m in zip(group, maps):
            by_rally.setdefault(s.rally_id, []).append((s, m))
        for rally_id, items in sorted(by_rally.items()):
            for s, m in items:
                shuttle = cell_to_court(grid, s.target)
                if s.label >= 0:
                    receive.append((shuttle, m))
                else:
                    prepare.append(m)
        games.append(
            an.GameRecord(
                game_id=game_id, pair_id=meta["pair_id"], side=side,
                score=float(meta["score"]),
                receive_events=receive, prepare_events=prepare, aim_events=[],
            )
        )
    # aim events: a team's hit aims at the opposing side's next event spot
    recs = {(g.game_id, g.side): g for g in games}
    _attach_aim_events(samples, recs, pipeline, grid)

    report = an.score_correlation_suite(games, grid, tau=args.tau)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    _write_json(report, report_path)
    lines = [f"tau = {report['tau']}"]
    for name, entry in report["analyses"].items():
        for level, res in entry.items():
            if "rho" in res:
                lines.append(
                    f"{name:>14} ({level}): rho={res['rho']:+.3f} p={res['p_value']:.4f} n={res['n']}"
                )
                an.write_scatter_csv(res["points"], os.path.join(args.out, f"scatter_{name}_{level}.csv"))
            else:
                lines.append(f"{name:>14} ({level}): {res['error']}")
    text = "\n".join(lines)
    print(text)
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(text + "\n")
    write_manifest(report_path, "analyze", {"tau": args.tau},
                   [args.checkpoint, args.samples, args.games], [report_path])
    return 0


def _attach_aim_events(samples, recs, pipeline, grid) -> None:
    """A hit by team X aims where the other side's next event happens; the
    opposing control area is that event's predicted map."""
    by_rally: dict[str, list] = {}
    for s in samples:
        if s.game_id is not None and s.label >= 0:
            by_rally.setdefault(s.rally_id, []).append(s)
    for rally_id, events in sorted(by_rally.items()):
        events = sorted(events, key=lambda s: s.frame)
        for prev, nxt in zip(events, events[1:]):
            if prev.label != 1 or nxt.side == prev.side:
                continue
            aimer = recs.get((prev.game_id, prev.side))
            if aimer is None:
                continue
            opp_map = predict_map(pipeline, nxt)
            aimer.aim_events.append((rally_id, cell_to_court(grid, nxt.target), opp_map))


def cmd_recommend(args) -> int:
    pipeline = load_pipeline(args.checkpoint)
    samples = {s.sample_id: s for s in ds.read_samples(args.samples)}
    if args.sample_id not in samples:
        print(f"error: sample {args.sample_id!r} not found", file=sys.stderr)
        return 1
    sample = samples[args.sample_id]
    levels = tuple(float(p) for p in args.p.split(","))
    recs = recommend_both_levels(pipeline, sample, args.fixed_player, args.n, levels)
    body = {
        "sample_id": args.sample_id,
        "checkpoint_id": pipeline.checkpoint_id,
        "moved_player": 1 - args.fixed_player,
        "recommendations": {str(p): r.to_dict() for p, r in recs.items()},
    }
    _write_json(body, args.out)
    for p, r in recs.items():
        flag = " (fallback)" if r.fallback else ""
        print(f"p={p}: ({r.x_rec:.3f}, {r.y_rec:.3f}) m, achieved P_c={r.achieved_pc:.3f}{flag}")
    write_manifest(args.out, "recommend",
                   {"p": list(levels), "n": args.n, "fixed_player": args.fixed_player,
                    "sample_id": args.sample_id},
                   [args.checkpoint, args.samples], [args.out])
    return 0


def cmd_export_heatmap(args) -> int:
    pipeline = load_pipeline(args.checkpoint)
    samples = {s.sample_id: s for s in ds.read_samples(args.samples)}
    if args.sample_id not in samples:
        print(f"error: sample {args.sample_id!r} not found", file=sys.stderr)
        return 1
    control_map = predict_map(pipeline, samples[args.sample_id])
    an.write_pgm(control_map, args.out)
    print(f"wrote {pipeline.grid.rows}x{pipeline.grid.cols} heatmap to {args.out}")
    write_manifest(args.out, "export-heatmap", {"sample_id": args.sample_id},
                   [args.checkpoint, args.samples], [args.out])
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_service

    app = build_service(args.checkpoint, args.samples)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="courtcontrol",
        description="Control-area maps, analyses, and positioning recommendations for doubles badminton",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    q = sub.add_parser("ingest", help="parse rally CSVs into a sample file",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--data", help="dataset dir with <game>_<rally>/ subdirs of shuttle/players/poses CSVs")
    q.add_argument("--shuttle"), q.add_argument("--players"), q.add_argument("--poses")
    q.add_argument("--rally-id", default="rally0"), q.add_argument("--game-id", default="game0")
    q.add_argument("--calibration", help="text file of `u v x y` image-to-court pairs")
    q.add_argument("--prepare-states", action="store_true",
                   help="also emit unlabeled opposing-team states at hit moments")
    q.add_argument("--out", required=True)
    _add_grid_flags(q)

    q = sub.add_parser("synth", help="generate oracle-labeled synthetic samples",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--n", type=int, required=True), q.add_argument("--seed", type=int, default=0)
    q.add_argument("--reach", type=float, default=1.5, help="oracle reach radius (m)")
    q.add_argument("--softness", type=float, default=0.3, help="oracle logistic softness (m)")
    q.add_argument("--velocity-gain", type=float, default=0.15, help="oracle velocity credit (s)")
    q.add_argument("--near-fraction", type=float, default=0.88, help="targets placed near a receiver")
    q.add_argument("--velocity-noise", type=float, default=0.45, help="observation noise (m/s)")
    q.add_argument("--out", required=True)
    _add_grid_flags(q)

    q = sub.add_parser("train", help="train a control-map model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--samples", required=True), q.add_argument("--out", required=True)
    q.add_argument("--report"), q.add_argument("--test-out")
    _add_train_flags(q), _add_grid_flags(q)

    q = sub.add_parser("eval", help="L1 classification loss of a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--checkpoint", required=True), q.add_argument("--samples", required=True)
    q.add_argument("--out", required=True)

    q = sub.add_parser("ablate", help="train input-feature ablations and compare",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--samples", required=True), q.add_argument("--out", required=True)
    q.add_argument("--variants", default=",".join(VARIANTS))
    q.add_argument("--seeds", default="0,1,2")
    _add_train_flags(q), _add_grid_flags(q)

    q = sub.add_parser("analyze", help="score-vs-control-area correlation suite",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--checkpoint", required=True), q.add_argument("--samples", required=True)
    q.add_argument("--games", required=True, help="CSV: game_id,pair_id,side,score")
    q.add_argument("--tau", type=float, default=0.5, help="control-area threshold")
    q.add_argument("--out", required=True, help="output directory")

    q = sub.add_parser("recommend", help="optimal positioning for a sample",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--checkpoint", required=True), q.add_argument("--samples", required=True)
    q.add_argument("--sample-id", required=True)
    q.add_argument("--p", default="0.75,0.95", help="control probability levels p")
    q.add_argument("--n", type=int, default=5, help="n nearest qualifying cells")
    q.add_argument("--fixed-player", type=int, default=0, choices=[0, 1])
    q.add_argument("--out", required=True)

    q = sub.add_parser("export-heatmap", help="write a sample's control map as PGM",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--checkpoint", required=True), q.add_argument("--samples", required=True)
    q.add_argument("--sample-id", required=True), q.add_argument("--out", required=True)

    q = sub.add_parser("serve", help="run the HTTP service",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    q.add_argument("--checkpoint", required=True), q.add_argument("--samples")
    q.add_argument("--port", type=int, default=8000), q.add_argument("--host", default="127.0.0.1")

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    train_defaults = {
        "lr": 1e-6, "epochs": 30, "batch": 16, "seed": 0, "variant": "full",
        "flip": True, "precision": "f32", "widths": [4, 8, 16], "pose_dim": 4,
        "sigma": 3.0, "mu": 0.03, "alpha": 0.8, "gamma": 3.0,
        "hit_ratio": 0.8, "drop_ratio": 0.5,
    }
    try:
        if args.cmd == "ingest":
            return cmd_ingest(args)
        if args.cmd == "synth":
            return cmd_synth(args)
        if args.cmd == "train":
            return cmd_train(args, train_defaults)
        if args.cmd == "eval":
            return cmd_eval(args)
        if args.cmd == "ablate":
            return cmd_ablate(args, train_defaults)
        if args.cmd == "analyze":
            return cmd_analyze(args)
        if args.cmd == "recommend":
            return cmd_recommend(args)
        if args.cmd == "export-heatmap":
            return cmd_export_heatmap(args)
        if args.cmd == "serve":
            return cmd_serve(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
