"""Command-line entry points: gen-data, train, eval, gradcheck,
export-features.

Config precedence: built-in defaults < --config JSON file < command-line
flags. Log level comes from the CM2_LOG environment variable
(error | info | debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}


def _setup_logging():
    level = os.environ.get("CM2_LOG", "error").lower()
    if level not in LOG_LEVELS:
        print(f"warning: unknown CM2_LOG level {level!r}, using 'error'",
              file=sys.stderr)
        level = "error"
    logging.basicConfig(level=LOG_LEVELS[level],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _apply_threads(n):
    # best effort: honored only if numpy's thread pools can still be resized
    if n is None:
        return
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _add_global_flags(p):
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file (overrides defaults)")
    p.add_argument("--seed", type=int, default=None, help="master RNG seed")
    p.add_argument("--out", type=str, default=".", help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="numeric thread count (determinism is per count)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cm2net",
        description="Continual cross-modal training on a synthetic "
                    "lossy-modality benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_global_flags(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--d-latent", type=int, default=32)
    p.add_argument("--d-obs", type=int, default=32)
    p.add_argument("--sigma-x", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=3.0)
    for i in range(3):
        p.add_argument(f"--preset-m{i}", type=str,
                       default=("high_fidelity", "mid", "degraded")[i],
                       choices=("high_fidelity", "mid", "degraded"))
    p.add_argument("--dataset-out", dest="dataset_out", type=str,
                   default=None, help="output file (default <out>/data.cm2)")

    p = sub.add_parser("train", help="run continual training stages")
    _add_global_flags(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--resume", type=str, default=None,
                   help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--omega", type=str, default=None,
                   help="comma-separated prompt-source weights")

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    _add_global_flags(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--split", type=str, default="test",
                   choices=("train", "val", "test"))

    p = sub.add_parser("gradcheck",
                       help="verify all gradients against finite differences")
    _add_global_flags(p)

    p = sub.add_parser("export-features",
                       help="export frozen-encoder features to CSV")
    _add_global_flags(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--modality", type=int, required=True)
    p.add_argument("--split", type=str, default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--csv-out", dest="csv_out", type=str, default=None,
                   help="output CSV (default <out>/features_m<id>.csv)")
    return parser


def _load_config(args):
    from .persistence import config_from_dict
    from .trainer import TrainConfig
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    cfg = config_from_dict(base) if base else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, attr in (("epochs", "epochs"), ("lr", "lr"),
                       ("batch_size", "batch_size")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, attr, val)
    for flag, attr in (("lam", "lam"), ("epsilon", "eps"), ("tau", "tau")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg.weights, attr, val)
    omega = getattr(args, "omega", None)
    if omega is not None:
        cfg.weights.omega = [float(x) for x in omega.split(",") if x]
    return cfg


def cmd_gen_data(args):
    from . import persistence, synthetic
    seed = args.seed if args.seed is not None else 0
    spec = synthetic.LatentActionSpec(
        num_classes=args.classes, d_latent=args.d_latent,
        separation=args.separation, sigma_x=args.sigma_x,
        frames=args.frames, seed=seed)
    presets = [getattr(args, f"preset_m{i}") for i in range(3)]
    channels = [synthetic.make_channel(
        mid, args.d_obs, args.d_latent, seed=seed,
        **synthetic.degradation_preset(name, args.d_latent))
        for mid, name in enumerate(presets)]
    data = synthetic.gen_dataset(spec, channels, args.per_class, seed)
    out = args.dataset_out or os.path.join(args.out, "data.cm2")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    persistence.save_dataset(data, out)
    print(f"wrote {out} ({data.num_samples} samples, "
          f"{len(data.modality_ids)} modalities)")
    print(f"sha256 {persistence.file_hash(out)}")
    return 0


def cmd_train(args):
    from . import persistence, trainer
    cfg = _load_config(args)
    data = persistence.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)

    if args.resume:
        state, cfg_loaded, meta = persistence.load_checkpoint(
            args.resume, expect_cfg=cfg)
        cfg = cfg_loaded
        start = meta["completed_stages"]
    else:
        state = trainer.new_state(cfg, data.class_names)
        start = 0
    if args.stages > len(cfg.modality_order):
        raise SystemExit(f"--stages {args.stages} exceeds configured "
                         f"modality order of length {len(cfg.modality_order)}")
    if start > args.stages:
        raise SystemExit(f"checkpoint already has {start} stages, beyond "
                         f"--stages {args.stages}")

    d_obs = {m: data.observations[m].shape[2] for m in data.modality_ids}
    metrics_path = os.path.join(args.out, "metrics.csv")
    for m in range(start, args.stages):
        report = (trainer.train_stage0(state, data, cfg) if m == 0
                  else trainer.train_stage_m(state, data, cfg, m))
        ckpt = os.path.join(args.out, f"stage{m}.ckpt")
        persistence.save_checkpoint(state, cfg, ckpt, d_obs)
        persistence.append_metrics(metrics_path, report.rows)
        print(f"stage {m} (modality {report.modality_id}): "
              f"val top1 {report.final_val_top1:.4f} "
              f"mean1 {report.final_val_mean1:.4f} "
              f"[{report.wall_clock:.1f}s] -> {ckpt}")
    return 0


def cmd_eval(args):
    from . import evaluation, persistence
    data = persistence.load_dataset(args.data)
    state, cfg, meta = persistence.load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)

    idx = data.indices(args.split)
    targets = data.labels[idx]
    num_classes = len(data.class_names)
    lines = ["modality,top1,mean1"]
    recall_lines = ["modality,class,recall"]
    score_list = []
    for st in state.stages:
        scores = evaluation.predict_unimodal(state, data, st.modality_id,
                                             args.split)
        score_list.append(scores)
        t1 = evaluation.top1(scores, targets)
        m1 = evaluation.mean1(scores, targets)
        lines.append(f"m{st.modality_id},{t1:.17g},{m1:.17g}")
        for c, rec in enumerate(evaluation.per_class_recall(
                scores, targets, num_classes)):
            recall_lines.append(f"m{st.modality_id},{c},"
                                f"{'' if np.isnan(rec) else format(rec, '.17g')}")
    if len(score_list) >= 2:
        fused = evaluation.late_fuse(score_list)
        lines.append(f"fused,{evaluation.top1(fused, targets):.17g},"
                     f"{evaluation.mean1(fused, targets):.17g}")

    report = "\n".join(lines) + "\n"
    print(report, end="")
    report_path = os.path.join(args.out, f"eval_{args.split}.csv")
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report)
    recalls_path = os.path.join(args.out, f"recalls_{args.split}.csv")
    with open(recalls_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(recall_lines) + "\n")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite
    results = run_suite()
    failed = 0
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:24s} "
              f"max rel err {err:.3e} (tol {TOLERANCE:.0e})")
        failed += not ok
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_export_features(args):
    from . import evaluation, persistence
    data = persistence.load_dataset(args.data)
    state, _, _ = persistence.load_checkpoint(args.checkpoint)
    out = args.csv_out or os.path.join(args.out,
                                       f"features_m{args.modality}.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    evaluation.export_features(state, data, args.modality, out,
                               split=args.split)
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-features": cmd_export_features,
}


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
