"""Command-line pipeline driver.

Subcommands cover every stage — synth, spm, train, predict, eval — plus
`pipeline` to run them end to end and `ablate` to compare the grouping-loss
variants on shared proposals. Human-readable logging goes to stderr;
machine-readable results go to files. Exit codes: 0 ok, 1 stage failure,
2 bad input, 3 bad config.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace

from .config import ConfigError, RunConfig, config_help_text, make_config
from .imaging import (
    ImagingError,
    load_image,
    load_label_map,
    load_mask,
    save_label_map,
    save_mask,
    slice_patches,
)
from .metrics import EvalReport, evaluate_dataset, write_report_csv, write_report_json
from .msg import load_model, predict, save_model, train_segmentation
from .spm import SpmConfig, mine_report
from .synthgen import generate_dataset

IMAGE_SUFFIXES = (".png", ".ppm")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _resolve(workdir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(workdir, path)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _walk_files(root: str) -> list[str]:
    out = []
    for base, _dirs, files in os.walk(root):
        out += [os.path.join(base, f) for f in files]
    return sorted(out)


def _write_config_snapshot(cfg: RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.flat_text())


def _image_dir(path: str) -> str:
    """Accept either a plain image directory or a dataset root with images/."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"input directory not found: {path}")
    nested = os.path.join(path, "images")
    return nested if os.path.isdir(nested) else path


def _list_images(img_dir: str) -> list[str]:
    names = sorted(f for f in os.listdir(img_dir)
                   if f.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise FileNotFoundError(f"no images found in {img_dir}")
    return names


def _mine_one(img_path: str, spm_cfg: SpmConfig, invert: bool):
    return mine_report(load_image(img_path), spm_cfg, invert_gray=invert)


def stage_synth(cfg: RunConfig, out_dir: str, count: int, seed: int) -> dict:
    manifest = generate_dataset(out_dir, count, cfg.synth_config(), seed=seed)
    _write_config_snapshot(cfg, out_dir)
    _log(f"synth: wrote {count} items to {out_dir}")
    return manifest


def stage_spm(cfg: RunConfig, in_dir: str, out_dir: str, jobs: int = 1) -> None:
    img_dir = _image_dir(in_dir)
    names = _list_images(img_dir)
    os.makedirs(out_dir, exist_ok=True)
    base = cfg.spm_config()
    invert = cfg["gray.invert"]
    tasks = [(os.path.join(img_dir, name),
              replace(base, seed=base.seed + i, kmeans_seed=base.kmeans_seed + i))
             for i, name in enumerate(names)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_mine_one, [t[0] for t in tasks],
                                    [t[1] for t in tasks], [invert] * len(tasks)))
    else:
        reports = [_mine_one(path, c, invert) for path, c in tasks]
    for name, (_, item_cfg), rep in zip(names, tasks, reports):
        stem = os.path.splitext(name)[0]
        save_label_map(rep.proposal, os.path.join(out_dir, f"{stem}.png"))
        sidecar = {
            "image": name,
            "seed": item_cfg.seed,
            "kmeans_seed": item_cfg.kmeans_seed,
            "border_region": rep.border_region,
            "region_gray": [None if math.isnan(g) else g for g in rep.region_gray],
            "region_counts": list(rep.regions.counts),
            "underpopulated": rep.regions.underpopulated,
            "loss_curve": [float(v) for v in rep.loss_curve],
        }
        with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _write_config_snapshot(cfg, out_dir)
    _log(f"spm: mined {len(names)} proposals into {out_dir}")


def stage_train(cfg: RunConfig, patches_dir: str, proposals_dir: str,
                model_path: str) -> list[dict]:
    img_dir = _image_dir(patches_dir)
    names = _list_images(img_dir)
    if not os.path.isdir(proposals_dir):
        raise FileNotFoundError(f"proposal directory not found: {proposals_dir}")
    mcfg = cfg.msg_config()
    pairs = []
    for name in names:
        stem = os.path.splitext(name)[0]
        img = load_image(os.path.join(img_dir, name))
        prop = load_label_map(os.path.join(proposals_dir, f"{stem}.png"))
        pairs += slice_patches(img, prop, mcfg.patch, mcfg.stride)
    model, history = train_segmentation(pairs, mcfg, seed=mcfg.seed)
    os.makedirs(os.path.dirname(model_path) or ".", exist_ok=True)
    save_model(model_path, model)
    with open(model_path + ".log.jsonl", "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    _write_config_snapshot(cfg, os.path.dirname(model_path) or ".")
    if history:
        _log(f"train: {len(pairs)} patches, final losses "
             f"msgo={history[-1]['loss_msgo']:.4f} msgv={history[-1]['loss_msgv']:.4f}")
    _log(f"train: model written to {model_path}")
    return history


def stage_predict(cfg: RunConfig, model_path: str, in_dir: str, out_dir: str) -> None:
    if not os.path.isfile(model_path):
        raise FileNotFoundError(f"model checkpoint not found: {model_path}")
    mcfg = cfg.msg_config()
    model = load_model(model_path, dtype=mcfg.dtype)
    img_dir = _image_dir(in_dir)
    names = _list_images(img_dir)
    os.makedirs(out_dir, exist_ok=True)
    for name in names:
        stem = os.path.splitext(name)[0]
        img = load_image(os.path.join(img_dir, name))
        gland, labels = predict(img, model, mcfg.patch, mcfg.stride)
        save_label_map(labels, os.path.join(out_dir, f"{stem}_label.png"))
        save_mask(gland, os.path.join(out_dir, f"{stem}_mask.png"))
    _write_config_snapshot(cfg, out_dir)
    _log(f"predict: wrote {len(names)} predictions to {out_dir}")


def stage_eval(cfg: RunConfig, pred_dir: str, gt_dir: str, out_json: str,
               out_csv: str | None = None) -> EvalReport:
    if not os.path.isdir(pred_dir):
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    if not os.path.isdir(gt_dir):
        raise FileNotFoundError(f"ground-truth directory not found: {gt_dir}")
    pairs = []
    for name in _list_images(gt_dir):
        stem = os.path.splitext(name)[0]
        pred_path = os.path.join(pred_dir, f"{stem}_mask.png")
        if not os.path.isfile(pred_path):
            pred_path = os.path.join(pred_dir, name)
        if not os.path.isfile(pred_path):
            raise FileNotFoundError(f"no prediction for {name} in {pred_dir}")
        pairs.append((stem, load_mask(pred_path),
                      load_mask(os.path.join(gt_dir, name))))
    report = evaluate_dataset(pairs, iou_threshold=cfg["eval.iou_threshold"],
                              fingerprint=cfg.fingerprint())
    os.makedirs(os.path.dirname(out_json) or ".", exist_ok=True)
    write_report_json(report, out_json)
    if out_csv:
        write_report_csv(report, out_csv)
    _log(f"eval: {report.count} images, mean f1={report.mean_f1:.4f} "
         f"dice={report.mean_dice:.4f} miou={report.mean_miou:.4f}")
    return report


def cmd_synth(args, cfg: RunConfig) -> int:
    count = args.count if args.count is not None else cfg["synth.count"]
    stage_synth(cfg, _resolve(args.workdir, args.out), count, cfg["synth.seed"])
    return 0


def cmd_spm(args, cfg: RunConfig) -> int:
    jobs = args.jobs if args.jobs is not None else cfg["pipeline.jobs"]
    stage_spm(cfg, _resolve(args.workdir, args.inp),
              _resolve(args.workdir, args.out), jobs=jobs)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    stage_train(cfg, _resolve(args.workdir, args.patches),
                _resolve(args.workdir, args.proposals),
                _resolve(args.workdir, args.out))
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    stage_predict(cfg, _resolve(args.workdir, args.model),
                  _resolve(args.workdir, args.inp),
                  _resolve(args.workdir, args.out))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    stage_eval(cfg, _resolve(args.workdir, args.pred),
               _resolve(args.workdir, args.gt),
               _resolve(args.workdir, args.out),
               _resolve(args.workdir, args.csv) if args.csv else None)
    return 0


def cmd_pipeline(args, cfg: RunConfig) -> int:
    wd = args.workdir
    os.makedirs(wd, exist_ok=True)
    manifest: dict = {"fingerprint": cfg.fingerprint(),
                      "config": {k: v for k, v in cfg.values},
                      "stages": [], "status": "ok"}
    train_dir = os.path.join(wd, "data_train")
    eval_dir = os.path.join(wd, "data_eval")
    proposals = os.path.join(wd, "proposals")
    model_path = os.path.join(wd, "model.mssg")
    pred_dir = os.path.join(wd, "pred")
    report_json = os.path.join(wd, "report.json")
    report_csv = os.path.join(wd, "report.csv")
    base_seed = cfg["synth.seed"]
    n_train = cfg["pipeline.train_count"]
    n_eval = cfg["pipeline.eval_count"]
    stages = [
        ("synth_train", lambda: stage_synth(cfg, train_dir, n_train, base_seed),
         [train_dir]),
        ("synth_eval", lambda: stage_synth(cfg, eval_dir, n_eval, base_seed + n_train),
         [eval_dir]),
        ("spm", lambda: stage_spm(cfg, train_dir, proposals, cfg["pipeline.jobs"]),
         [proposals]),
        ("train", lambda: stage_train(cfg, train_dir, proposals, model_path),
         [model_path, model_path + ".log.jsonl"]),
        ("predict", lambda: stage_predict(cfg, model_path, eval_dir, pred_dir),
         [pred_dir]),
        ("eval", lambda: stage_eval(cfg, pred_dir, os.path.join(eval_dir, "gt"),
                                    report_json, report_csv),
         [report_json, report_csv]),
    ]
    try:
        for name, fn, artifacts in stages:
            t0 = time.monotonic()
            try:
                fn()
            except Exception as e:
                manifest["status"] = "failed"
                manifest["stages"].append({"stage": name, "status": "failed",
                                           "seconds": round(time.monotonic() - t0, 3),
                                           "error": f"{type(e).__name__}: {e}"})
                raise
            checks = {}
            for art in artifacts:
                files = _walk_files(art) if os.path.isdir(art) else [art]
                for f in files:
                    checks[os.path.relpath(f, wd)] = _sha256(f)
            manifest["stages"].append({"stage": name, "status": "ok",
                                       "seconds": round(time.monotonic() - t0, 3),
                                       "artifacts": checks})
    finally:
        _write_config_snapshot(cfg, wd)
        with open(os.path.join(wd, "run_manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


ABLATION_VARIANTS = [
    ("none", {"msg.beta": 1.5, "msg.lambda_v": 0.0}),
    ("v_only", {"msg.beta": 1.5}),
    ("o_only", {"msg.lambda_v": 0.0}),
    ("both", {}),
]


def cmd_ablate(args, cfg: RunConfig) -> int:
    wd = args.workdir
    os.makedirs(wd, exist_ok=True)
    train_dir = os.path.join(wd, "data_train")
    eval_dir = os.path.join(wd, "data_eval")
    proposals = os.path.join(wd, "proposals")
    base_seed = cfg["synth.seed"]
    n_train = cfg["pipeline.train_count"]
    n_eval = cfg["pipeline.eval_count"]
    stage_synth(cfg, train_dir, n_train, base_seed)
    stage_synth(cfg, eval_dir, n_eval, base_seed + n_train)
    stage_spm(cfg, train_dir, proposals, cfg["pipeline.jobs"])
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        vcfg = cfg.with_overrides(**overrides)
        vdir = os.path.join(wd, f"variant_{name}")
        model_path = os.path.join(vdir, "model.mssg")
        pred_dir = os.path.join(vdir, "pred")
        stage_train(vcfg, train_dir, proposals, model_path)
        stage_predict(vcfg, model_path, eval_dir, pred_dir)
        report = stage_eval(vcfg, pred_dir, os.path.join(eval_dir, "gt"),
                            os.path.join(vdir, "report.json"))
        rows.append({"variant": name,
                     "msgv": vcfg["msg.lambda_v"] > 0,
                     "msgo": vcfg["msg.beta"] <= 1.0,
                     "miou": report.mean_miou})
    baseline = rows[0]["miou"]
    for row in rows:
        row["delta"] = row["miou"] - baseline
    table = {"fingerprint": cfg.fingerprint(), "seed": cfg["msg.seed"], "rows": rows}
    with open(os.path.join(wd, "ablation.json"), "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(wd, "ablation.csv"), "w") as fh:
        fh.write("variant,msgv,msgo,miou,delta\n")
        for row in rows:
            fh.write(f"{row['variant']},{str(row['msgv']).lower()},"
                     f"{str(row['msgo']).lower()},{row['miou']:.6f},"
                     f"{row['delta']:.6f}\n")
    _log("ablate: " + "  ".join(f"{r['variant']}={r['miou']:.4f}" for r in rows))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".",
                        help="base directory for relative paths (default: .)")
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable; wins over --config)")
    parser = argparse.ArgumentParser(
        prog="glandseg",
        description="Unsupervised gland segmentation: proposal mining, "
                    "semantic grouping, synthetic benchmark.",
        epilog=config_help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=None,
                   help="items to generate (default: synth.count)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spm", parents=[common],
                       help="mine a 3-class proposal map per image")
    p.add_argument("--in", dest="inp", required=True, help="image directory")
    p.add_argument("--out", required=True, help="proposal output directory")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: pipeline.jobs)")
    p.set_defaults(func=cmd_spm)

    p = sub.add_parser("train", parents=[common],
                       help="train the segmentation network on proposals")
    p.add_argument("--patches", required=True, help="training image directory")
    p.add_argument("--proposals", required=True, help="proposal map directory")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common],
                       help="predict label maps and gland masks")
    p.add_argument("--model", required=True, help="model checkpoint path")
    p.add_argument("--in", dest="inp", required=True, help="image directory")
    p.add_argument("--out", required=True, help="prediction output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common],
                       help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction mask directory")
    p.add_argument("--gt", required=True, help="ground-truth mask directory")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", default=None, help="optional CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common],
                       help="run synth, spm, train, predict, eval end to end")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", parents=[common],
                       help="compare grouping-loss variants on shared proposals")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = make_config(
            _resolve(args.workdir, args.config) if args.config else None,
            args.set)
        return args.func(args, cfg)
    except ConfigError as e:
        _log(f"config error: {e}")
        return 3
    except (FileNotFoundError, NotADirectoryError, ImagingError) as e:
        _log(f"input error: {e}")
        return 2
    except Exception as e:
        _log(f"stage failure: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
