"""Command-line entry point: synth | train | eval | gradcheck | bench."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, RunConfig


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.data.seed = args.seed
    errs = cfg.validate()
    if errs:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
    return cfg


def _scene_config(cfg: RunConfig):
    from .data import SceneConfig
    d = cfg.data
    return SceneConfig(image_size=d.image_size, min_instances=d.min_instances,
                       max_instances=d.max_instances, min_side=d.min_side,
                       max_side=d.max_side, noise=d.noise)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    from . import data as D
    out = Path(args.out)
    scfg = _scene_config(cfg)
    for split, count, offset in (("train", cfg.data.train_scenes, 0),
                                 ("eval", cfg.data.eval_scenes, 1)):
        scenes = D.make_dataset(scfg, count, base_seed=cfg.data.seed * 2 + offset)
        D.save_dataset(scenes, out / split, scene_config=scfg)
        print(f"{split}: {count} scenes of {cfg.data.image_size}x{cfg.data.image_size} "
              f"-> {out / split}")
    print(f"classes: {D.CLASS_NAMES}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    from . import data as D
    from . import report
    from .train import train_run
    scenes = D.load_dataset(Path(args.data) / "train")
    out = Path(args.out)
    summary = train_run(cfg, scenes, out)
    report.write_metrics_csv(out / "metrics.csv", summary["rows"])
    report.render_metrics_figure(summary["rows"], out / "loss_curves.png")
    cfg.to_json(out / "config.json")
    last = summary["rows"][-1]
    print(f"trained {cfg.optimizer.steps} steps; final total loss {last[3]:.4f}")
    print(f"metrics -> {out / 'metrics.csv'}; checkpoint -> {out / 'checkpoint_final.ptns'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    from . import data as D
    from . import report
    from .model import Model
    from .pipeline import evaluate_model
    model = Model.from_config(cfg.model, seed=cfg.data.seed)
    if args.checkpoint:
        model.load(Path(args.checkpoint))
    scenes = D.load_dataset(Path(args.data) / "eval")
    rep = evaluate_model(model, scenes, cfg.eval, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_ap_csv(rep, out / "ap_report.csv")
    report.render_ap_figure(rep, out / "ap_report.png")
    for name, value in rep.rows():
        print(f"{name:22s} {value:.4f}")
    print(f"report -> {out / 'ap_report.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    from .gradcheck import format_results, run_suite
    results = run_suite(trials=args.trials, inject_fault=args.inject_fault)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    return 1 if failed else 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    from . import data as D
    from . import report
    from .evalbench import DENSE_VANILLA, POINTINS_SAMPLED, flop_count, throughput_bench
    from .model import Model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()

    dense = flop_count(cfg.model, DENSE_VANILLA, image_size=cfg.data.image_size,
                       sample_points=cfg.bench.sample_points)
    sampled = flop_count(cfg.model, POINTINS_SAMPLED, image_size=cfg.data.image_size,
                         sample_points=cfg.bench.sample_points)
    report.write_cost_csv([dense, sampled], out / "cost_report.csv", config_hash=chash)
    report.render_cost_figure([dense, sampled], out / "cost_report.png")
    ratio = sampled.multiply_adds / dense.multiply_adds
    print(f"mask-feature multiply-adds: dense {dense.multiply_adds:,} vs "
          f"sampled {sampled.multiply_adds:,} (ratio {ratio:.4f})")
    print(f"with mask heads: dense {dense.total_multiply_adds:,} vs "
          f"sampled {sampled.total_multiply_adds:,}")

    model = Model.from_config(cfg.model, seed=cfg.data.seed)
    scfg = _scene_config(cfg)
    scenes = D.make_dataset(scfg, cfg.bench.bench_scenes, base_seed=cfg.data.seed * 2 + 7)
    results = []
    for p in cfg.bench.point_sweep:
        res = throughput_bench(model, scenes, cfg.bench.repetitions, p)
        results.append(res)
        print(f"P={p:4d}: {res.points_per_sec_median:9.1f} points/s "
              f"(IQR {res.points_per_sec_iqr:.1f}), "
              f"{res.images_per_sec_median:6.2f} images/s")
    report.write_bench_csv(results, out / "throughput.csv", config_hash=chash)
    report.render_bench_figure(results, out / "throughput.png")
    print(f"reports -> {out / 'cost_report.csv'}, {out / 'throughput.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointmask",
        description="Point-based instance segmentation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=False, checkpoint=False):
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="overrides data.seed")
        p.add_argument("--threads", type=int, default=1)
        if data:
            p.add_argument("--data", type=str, required=True, help="dataset directory")
        if out:
            p.add_argument("--out", type=str, required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=str, default=None,
                           help="checkpoint prefix (without extension)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, out=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train and write metrics + checkpoints")
    common(p, data=True, out=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate mask AP for a checkpoint")
    common(p, data=True, out=True, checkpoint=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    common(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt one backward pass as a negative control")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="cost model and throughput tables")
    common(p, out=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
