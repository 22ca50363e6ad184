"""Command-line entry point: ``mamba-va <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import data as dio
from .checkpoint import load_model
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, MambaVAError
from .gradcheck import CHECKS, run_checks
from .metrics import fold_report
from .scan import SCAN_VARIANTS, benchmark_scan
from .training import fit, predict_video, validate

log = logging.getLogger("mamba_va")

EXIT_USAGE = 2


def _add_run_flags(p: argparse.ArgumentParser):
    defaults = RunConfig()
    for key in RunConfig.keys():
        default = getattr(defaults, key)
        if key == "dilations":
            shown = ",".join(str(d) for d in default)
        elif key == "seed":
            shown = "$MAMBA_VA_SEED or 0"
        else:
            shown = default
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V",
                       help=f"override config key {key} (default: {shown})")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.update({k: getattr(args, k) for k in RunConfig.keys() if getattr(args, k, None) is not None})
    return cfg.validate()


def _read_official_split(path):
    train, val = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            (train if row["split"].strip() == "train" else val).append(row["video_id"].strip())
    return train, val


def _fold(cfg: RunConfig, video_ids):
    official = _read_official_split(cfg.official_split) if cfg.official_split else None
    folds = dio.kfold_split(video_ids, cfg.k_folds, cfg.resolved_seed, official)
    return folds[cfg.fold]


def _require_dir(path, what):
    if path is None:
        raise ConfigError(f"{what} is not set")
    if not Path(path).is_dir():
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _require_dir(cfg.feature_dir, "feature directory")
    _require_dir(cfg.annotation_dir, "annotation directory")
    videos = dio.load_dataset(cfg.feature_dir, cfg.annotation_dir)
    if not videos:
        raise ConfigError(f"no .fvec files in {cfg.feature_dir}")
    by_id = {v.video_id: v for v in videos}
    fold = _fold(cfg, list(by_id))
    missing = sorted(set(fold.train_ids + fold.val_ids) - set(by_id))
    if missing:
        raise ConfigError(f"split names videos with no features in {cfg.feature_dir}: {', '.join(missing[:5])}")
    train = [by_id[i] for i in fold.train_ids]
    val = [by_id[i] for i in fold.val_ids]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    log.info("fold %d: %d train / %d val videos", fold.index, len(train), len(val))

    split = {"data.k_folds": cfg.k_folds, "data.split_seed": cfg.resolved_seed}
    if cfg.official_split:
        split["data.official_split"] = cfg.official_split
    result = fit(train, val, cfg.tcn_config(), cfg.mamba_config(), cfg.train_config(), out_dir=out, meta=split)
    report = validate(result.best_model, val, cfg.window, cfg.stride)
    table = fold_report([(fold.index, report)])
    (out / "report.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "report.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text(), end="")
    return 0


def _windowing(args, config):
    w = args.window or int(config.get("data.window", RunConfig.window))
    s = args.stride or int(config.get("data.stride", RunConfig.stride))
    return int(w), int(s)


def _load_checkpoint(args):
    expect = None
    if args.config:
        cfg = load_config(args.config).validate()
        expect = (cfg.tcn_config(), cfg.mamba_config())
    return load_model(args.checkpoint, expect)


def cmd_evaluate(args) -> int:
    model, config, _ = _load_checkpoint(args)
    _require_dir(args.feature_dir, "feature directory")
    _require_dir(args.annotation_dir, "annotation directory")
    videos = dio.load_dataset(args.feature_dir, args.annotation_dir)
    fold_name = "all"
    if args.fold is not None:
        if args.config:
            cfg = load_config(args.config)
        else:
            # rebuild the folds the checkpoint was trained with
            cfg = RunConfig()
            cfg.update({k: config[f"data.{k}"] for k in ("k_folds", "official_split") if f"data.{k}" in config})
            if "data.split_seed" in config:
                cfg.update({"seed": config["data.split_seed"]})
        cfg.update({"fold": args.fold})
        fold = _fold(cfg.validate(), [v.video_id for v in videos])
        videos = [v for v in videos if v.video_id in set(fold.val_ids)]
        fold_name = str(fold.index)
    w, s = _windowing(args, config)
    report = validate(model, videos, w, s)
    print("fold,ccc_valence,ccc_arousal,p_va")
    print(report.row(fold_name))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table = fold_report([(fold_name, report)])
        (out / "report.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / "report.txt").write_text(table.to_text(), encoding="utf-8")
    return 0


def cmd_predict(args) -> int:
    model, config, _ = _load_checkpoint(args)
    seq = dio.load_features(args.features)
    w, s = _windowing(args, config)
    pred = predict_video(model, seq.data, w, s)
    lines = ["frame,valence,arousal\n"]
    lines += [f"{i + 1},{float(v)!r},{float(a)!r}\n" for i, (v, a) in enumerate(pred)]
    text = "".join(lines)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_synthetic(args) -> int:
    seed = args.seed if args.seed is not None else RunConfig().resolved_seed
    dio.generate_synthetic_dataset(
        args.out, seed=seed, n_videos=args.n_videos, frames_range=(args.frames_min, args.frames_max), dim=args.dim
    )
    print(f"manifest_sha256={dio.manifest_digest(Path(args.out) / 'manifest.txt')}")
    return 0


GRAD_SCOPES = {
    "full": list(CHECKS),
    "ops": [n for n in CHECKS if n not in ("mamba_block", "model")],
    "model": ["mamba_block", "model"],
}


def cmd_grad_check(args) -> int:
    names = []
    for scope in args.scope:
        if scope in GRAD_SCOPES:
            names += GRAD_SCOPES[scope]
        elif scope in CHECKS:
            names.append(scope)
        else:
            raise ConfigError(f"unknown grad-check scope {scope!r}; choose from {sorted(GRAD_SCOPES) + list(CHECKS)}")
    results = run_checks(list(dict.fromkeys(names)), seed=args.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<26} max_rel_err={r.error:.3e}  tol={r.tolerance:.0e}  {status}")
    return 0 if all(r.passed for r in results) else 1


def _int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x]


def cmd_bench_scan(args) -> int:
    sizes = [(t, d, n) for t in _int_list(args.T) for d in _int_list(args.d_inner) for n in _int_list(args.N)]
    variants = args.variants.split(",")
    for v in variants:
        if v not in SCAN_VARIANTS:
            raise ConfigError(f"unknown scan variant {v!r}")
    rows = benchmark_scan(sizes, variants, repeats=args.repeats, seed=args.seed)
    lines = ["variant,T,d_inner,N,nanos_per_element\n"]
    lines += [f"{r['variant']},{r['T']},{r['d_inner']},{r['N']},{r['nanos_per_element']:.3f}\n" for r in rows]
    text = "".join(lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mamba-va", description="Valence/arousal regression with a TCN + Mamba stack.",
                                     allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", allow_abbrev=False, help="train on one fold and write checkpoints, log and report")
    p.add_argument("--config", help="flat key = value config file")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "score a checkpoint on labelled videos"),
        ("predict", cmd_predict, "write per-frame predictions for one feature file"),
    ):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--checkpoint", required=True, help="model checkpoint (.ckpt)")
        p.add_argument("--config", help="check the checkpoint against this run config")
        p.add_argument("--window", type=int, help="segment window (default: from checkpoint)")
        p.add_argument("--stride", type=int, help="segment stride (default: from checkpoint)")
        if name == "evaluate":
            p.add_argument("--feature-dir", required=True)
            p.add_argument("--annotation-dir", required=True)
            p.add_argument("--fold", type=int, help="evaluate only this fold's validation videos")
            p.add_argument("--out", help="directory for report.csv / report.txt")
        else:
            p.add_argument("--features", required=True, help="feature file (.fvec)")
            p.add_argument("--out", help="output CSV (default: stdout)")
        p.set_defaults(func=func)

    p = sub.add_parser("gen-synthetic", allow_abbrev=False, help="write a seeded synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="seed (default: $MAMBA_VA_SEED or 0)")
    p.add_argument("--n-videos", type=int, default=20)
    p.add_argument("--frames-min", type=int, default=450)
    p.add_argument("--frames-max", type=int, default=550)
    p.add_argument("--dim", type=int, default=32)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("grad-check", allow_abbrev=False, help="finite-difference check of every differentiable op")
    p.add_argument("scope", nargs="*", default=["full"], help="full, ops, model, or individual check names")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench-scan", allow_abbrev=False, help="time the sequential and parallel scans")
    p.add_argument("--T", default="128,512,2048", help="comma-separated sequence lengths")
    p.add_argument("--d-inner", default="4,256", help="comma-separated channel counts")
    p.add_argument("--N", default="8", help="comma-separated state sizes")
    p.add_argument("--variants", default="sequential,parallel")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_bench_scan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MambaVAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
