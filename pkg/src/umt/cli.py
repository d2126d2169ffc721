"""Command-line interface: ``umt <verb> [options]``.

Verbs: ``gen-data``, ``train``, ``eval``, ``ablation``, ``translate``.
Exit codes: 0 success, 1 other failure (e.g. refusing to overwrite),
2 configuration error, 3 missing prerequisite artifact, 4 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, checkpoint, plots, synth
from .config import VARIANTS, ExperimentConfig, load_config
from .engine import NumericalError, TrainData, read_metrics, run_training
from .evaluation import (bias_diagnostic, classification_errors, detect, evaluate_detections,
                         iou_sweep, localization_errors)
from .params import ConfigError

log = logging.getLogger("umt")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _write_manifest(path, cfg: ExperimentConfig, command: str, artifacts, timings=None,
                    extra=None) -> Path:
    """RunManifest: provenance plus every artifact the command wrote."""
    path = Path(path)
    base = path.parent
    arts = sorted({Path(a).resolve().relative_to(base.resolve()).as_posix()
                   for a in artifacts if a is not None})
    for a in arts:
        if not (base / a).exists():
            raise FileNotFoundError(f"manifest references missing artifact {a}")
    doc = {"command": command, "code_version": __version__, "config_digest": cfg.digest(),
           "config": cfg.to_dict(), "artifacts": arts, "timings_s": timings or {},
           "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **(extra or {})}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _data_root(args, cfg: ExperimentConfig) -> Path:
    return Path(args.data or cfg.data.root)


def _load_data(root: Path, cfg: ExperimentConfig) -> dict:
    man = synth.read_manifest(root)
    if man["scene"]["image_size"] != cfg.model.image_size:
        raise ConfigError(f"dataset {root} has image size {man['scene']['image_size']}, "
                          f"config expects {cfg.model.image_size}")
    return synth.load_datasets(root)


# -- verbs ------------------------------------------------------------------

def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    seed = cfg.data.seed if args.seed is None else args.seed
    root = _data_root(args, cfg)
    try:
        synth.generate_datasets(root, cfg.scene, cfg.shift, cfg.data.n_source, cfg.data.n_target,
                                cfg.data.n_eval, seed, force=args.force)
    except FileExistsError as e:
        log.error("%s", e)
        return EXIT_FAIL
    man = synth.read_manifest(root)
    print(f"dataset written to {root}: {man['counts']}")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, splits: dict, run_dir: Path, variant: str, seed: int,
               force: bool) -> dict:
    if force and run_dir.exists():
        shutil.rmtree(run_dir)
    tcfg = cfg.train.replace(variant=variant, seed=seed)
    t0 = time.perf_counter()
    state = run_training(tcfg, TrainData.from_splits(splits), run_dir, cfg.model)
    elapsed = time.perf_counter() - t0
    metrics = run_dir / "metrics.csv"
    png = plots.loss_curves(read_metrics(metrics), run_dir / "loss.png")
    arts = [run_dir / "init.ckpt", run_dir / "last.ckpt", run_dir / "final.ckpt", metrics, png]
    return {"state": state, "artifacts": arts, "seconds": elapsed}


def cmd_train(args, cfg: ExperimentConfig) -> int:
    variant = args.variant or cfg.train.variant
    seed = cfg.train.seed if args.seed is None else args.seed
    splits = _load_data(_data_root(args, cfg), cfg)
    run_dir = Path(args.out or cfg.out) / variant / f"seed{seed}"
    res = _train_one(cfg, splits, run_dir, variant, seed, args.force)
    _write_manifest(run_dir / "run.json", cfg, "train", res["artifacts"],
                    {"train": res["seconds"]},
                    {"variant": variant, "seed": seed,
                     "checkpoints": {"final": "final.ckpt"}})
    print(f"trained {variant} seed {seed} for {res['state'].step} steps -> {run_dir / 'final.ckpt'}")
    return EXIT_OK


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def evaluate_to_dir(params, scenes, cfg: ExperimentConfig, out: Path, *, sweep=None,
                    error_analysis=False, sourcelike=None, dump=0, metadata=None):
    """Evaluate ``params`` on ``scenes``; write JSON/CSV (and optional PNG) files.

    Returns the report and the list of files written.
    """
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg.eval
    C = params.arch.num_classes
    dets = detect(params, scenes, ev.nms_iou)
    rep = evaluate_detections(dets, scenes, C, ev.iou_threshold)
    rep.metadata = dict(metadata or {})
    files = [_write_csv(out / "per_class_ap.csv", ["class_id", "class_name", "ap"],
                        [[c, synth.CLASS_NAMES[c - 1], repr(a)] for c, a in rep.per_class_ap.items()]
                        + [["mean", "mAP", repr(rep.map)]])]
    if sweep:
        rep.sweep = iou_sweep(params, scenes, sweep, ev.nms_iou, dets=dets)
        files.append(_write_csv(out / "sweep.csv", ["iou_threshold", "map"],
                                [[repr(t), repr(m)] for t, m in rep.sweep]))
        files.append(plots.sweep_curve(rep.sweep, out / "sweep.png"))
    if error_analysis:
        rep.localization = localization_errors(dets, scenes, C, ev.top_k_rule)
        rep.classification = classification_errors(dets, scenes, C)
        files.append(_write_csv(out / "localization_errors.csv", ["category", "count", "fraction"],
                                [[k, rep.localization["counts"][k], repr(v)]
                                 for k, v in rep.localization["fractions"].items()]))
        conf = rep.classification["confusion"]
        files.append(_write_csv(out / "classification_confusion.csv",
                                ["gt_class", "missed", *synth.CLASS_NAMES[:C]],
                                [[synth.CLASS_NAMES[i], *row] for i, row in enumerate(conf)]))
    if sourcelike is not None:
        rep.bias = bias_diagnostic(params, scenes, sourcelike, ev.iou_threshold, ev.nms_iou)
        files.append(_write_csv(out / "bias.csv", ["map_target", "map_sourcelike", "difference"],
                                [[repr(rep.bias[k]) for k in
                                  ("map_target", "map_sourcelike", "difference")]]))
    if dump:
        d = out / "dumps"
        d.mkdir(exist_ok=True)
        for sc, det in list(zip(scenes, dets))[:dump]:
            files.append(plots.dump_detections(sc.image, det.boxes, det.scores, det.labels,
                                               d / f"{sc.id}.png", ev.dump_threshold))
    (out / "report.json").write_text(rep.to_json())
    files.append(out / "report.json")
    return rep, files


def _eval_metadata(ckpt_path: Path, root: Path, split: str, model: str, cfg) -> dict:
    return {"checkpoint_sha256": _sha256(ckpt_path),
            "dataset_sha256": _sha256(root / "manifest.json"), "split": split, "model": model,
            "iou_threshold": cfg.eval.iou_threshold, "nms_iou": cfg.eval.nms_iou}


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    ckpt_path = Path(args.checkpoint)
    state = checkpoint.load(ckpt_path, cfg.model)
    model = args.model or cfg.train.eval_model
    params = state.teacher if model == "teacher" else state.student
    root = _data_root(args, cfg)
    synth.read_manifest(root)
    scenes = synth.load_split(root, args.split)
    sweep = _parse_floats(args.sweep) if args.sweep else None
    sourcelike = None
    if args.bias_diagnostic:
        shift = synth.DomainShiftSpec(**{**synth.read_manifest(root)["shift"],
                                         "epsilon": args.bias_epsilon})
        sourcelike = synth.source_like_of(scenes, shift, cfg.data.seed)
    out = Path(args.out) if args.out else ckpt_path.parent / f"eval_{args.split}"
    t0 = time.perf_counter()
    rep, files = evaluate_to_dir(params, scenes, cfg, out, sweep=sweep,
                                 error_analysis=args.error_analysis, sourcelike=sourcelike,
                                 dump=args.dump,
                                 metadata=_eval_metadata(ckpt_path, root, args.split, model, cfg))
    _write_manifest(out / "eval_manifest.json", cfg, "eval", files,
                    {"eval": time.perf_counter() - t0}, {"checkpoint": str(ckpt_path)})
    print(f"mAP@{cfg.eval.iou_threshold:g} = {100 * rep.map:.2f}  "
          + " ".join(f"{synth.CLASS_NAMES[c - 1]}={100 * a:.1f}" for c, a in rep.per_class_ap.items()))
    for t, m in rep.sweep:
        print(f"  IoU {t:.2f}: mAP {100 * m:.2f}")
    if rep.bias:
        print("bias: target {map_target:.4f}  source-like {map_sourcelike:.4f}  "
              "difference {difference:+.4f}".format(**rep.bias))
    if rep.localization:
        print("localization: " + " ".join(f"{k}={v:.3f}"
                                          for k, v in rep.localization["fractions"].items()))
        print(f"classification accuracy: {rep.classification['accuracy']:.3f}")
    return EXIT_OK


def _variant_list(text: str | None) -> list[str]:
    if not text:
        return list(VARIANTS)
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {', '.join(bad)}; valid choices: {', '.join(VARIANTS)}")
    return out


def ladder_medians(rows: list[dict], variants) -> dict:
    """Median target mAP per variant over its successful seeds."""
    med = {}
    for v in variants:
        vals = [r["map_target"] for r in rows if r["variant"] == v and r["status"] == "ok"]
        if vals:
            med[v] = statistics.median(vals)
    return med


def cmd_ablation(args, cfg: ExperimentConfig) -> int:
    variants = _variant_list(args.variants)
    seeds = ([args.seed] if args.seed is not None else
             [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.seeds))
    root = _data_root(args, cfg)
    splits = _load_data(root, cfg)
    out = Path(args.out or cfg.out) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    shift0 = synth.DomainShiftSpec(**{**synth.read_manifest(root)["shift"], "epsilon": 0.0})
    sourcelike = synth.source_like_of(splits["target_test"], shift0, cfg.data.seed)
    rows, artifacts, timings = [], [], {}
    for v in variants:
        for s in seeds:
            cell = out / v / f"seed{s}"
            row = {"variant": v, "seed": s, "map_target": float("nan"),
                   "map_sourcelike": float("nan"), "status": "ok"}
            try:
                res = _train_one(cfg, splits, cell, v, s, args.force)
                params = res["state"].teacher if cfg.train.eval_model == "teacher" else res["state"].student
                meta = _eval_metadata(cell / "final.ckpt", root, "target_test",
                                      cfg.train.eval_model, cfg)
                rep, files = evaluate_to_dir(params, splits["target_test"], cfg, cell / "eval",
                                             sweep=cfg.eval.sweep, error_analysis=True,
                                             sourcelike=sourcelike, metadata=meta)
                row["map_target"] = rep.map
                row["map_sourcelike"] = rep.bias["map_sourcelike"]
                artifacts += res["artifacts"] + files
                timings[f"{v}/seed{s}"] = res["seconds"]
            except (NumericalError, ConfigError, FileNotFoundError, ValueError) as e:
                row["status"] = f"{type(e).__name__}: {e}"
                log.error("cell %s seed %d failed: %s", v, s, e)
            rows.append(row)
            print(f"{v:>10} seed {s}: " + (f"mAP {100 * row['map_target']:.2f}"
                                           if row["status"] == "ok" else row["status"]), flush=True)
    med = ladder_medians(rows, variants)
    artifacts.append(_write_csv(out / "ladder.csv",
                                ["variant", "seed", "map_target", "map_sourcelike", "status"],
                                [[r["variant"], r["seed"], repr(r["map_target"]),
                                  repr(r["map_sourcelike"]), r["status"]] for r in rows]))
    artifacts.append(_write_csv(out / "ladder_medians.csv", ["variant", "n_ok", "median_map"],
                                [[v, sum(r["variant"] == v and r["status"] == "ok" for r in rows),
                                  repr(med.get(v, float("nan")))] for v in variants]))
    if med:
        artifacts.append(plots.ladder_bars(med, out / "ladder.png"))
    _write_manifest(out / "manifest.json", cfg, "ablation", artifacts, timings,
                    {"variants": variants, "seeds": seeds})
    print(_table(rows, variants, seeds, med))
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAIL


def _table(rows, variants, seeds, med) -> str:
    head = f"{'variant':>10} | " + " | ".join(f"seed {s:>3}" for s in seeds) + " | median"
    lines = [head, "-" * len(head)]
    for v in variants:
        cells = []
        for s in seeds:
            r = next(r for r in rows if r["variant"] == v and r["seed"] == s)
            cells.append(f"{100 * r['map_target']:8.2f}" if r["status"] == "ok" else f"{'fail':>8}")
        m = f"{100 * med[v]:6.2f}" if v in med else "   n/a"
        lines.append(f"{v:>10} | " + " | ".join(cells) + f" | {m}")
    return "\n".join(lines)


def cmd_translate(args, cfg: ExperimentConfig) -> int:
    src, dst = Path(args.input), Path(args.output)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory {src} not found")
    if dst.exists() and any(dst.iterdir()):
        if not args.force:
            log.error("%s already exists; pass --force to overwrite", dst)
            return EXIT_FAIL
        shutil.rmtree(dst)
    shift = cfg.shift
    if args.epsilon is not None:
        shift = synth.DomainShiftSpec(**{**shift.to_dict(), "epsilon": args.epsilon})
    fn = synth.apply_shift if args.direction == "apply" else synth.invert_shift
    seed = cfg.data.seed if args.seed is None else args.seed
    domain = "TargetLike" if args.direction == "apply" else "SourceLike"
    ann = src / "annotations.jsonl"
    if ann.exists():
        scenes = []
        n = None
        for i, line in enumerate(ann.read_text().splitlines()):
            a = json.loads(line)
            raw = np.frombuffer((src / "raw" / f"{a['id']}.bin").read_bytes(), dtype="<f8")
            n = n or int(round(np.sqrt(raw.size / 3)))
            img = fn(raw.reshape(n, n, 3), shift, [seed, 7, i])
            scenes.append(synth.AnnotatedScene(img, a["boxes"], a["classes"], domain, a["id"],
                                               a.get("parent")))
        synth.write_split(dst.parent, dst.name, scenes)
        count = len(scenes)
    else:
        pngs = sorted(src.glob("*.png"))
        if not pngs:
            raise FileNotFoundError(f"{src} holds neither annotations.jsonl nor *.png images")
        dst.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(pngs):
            img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
            Image.fromarray(synth.to_uint8(fn(img, shift, [seed, 7, i]))).save(dst / p.name)
        count = len(pngs)
    print(f"{args.direction} shift on {count} images -> {dst}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # the copy attached to each verb must not reset flags given before the verb
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", help="TOML config file (env overrides: UMT_<SECTION>__<KEY>)", **kw)
        g.add_argument("--seed", type=int, help="override the seed for this command", **kw)
        g.add_argument("--out", help="output directory", **kw)
        g.add_argument("--force", action="store_true", help="overwrite existing outputs", **kw)
        g.add_argument("-v", "--verbose", action="store_true", **kw)
        return g

    common = global_flags(True)
    p = argparse.ArgumentParser(prog="umt", description=__doc__.splitlines()[0],
                                parents=[global_flags(False)])
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark")
    g.add_argument("--data", help="dataset directory (default: data.root)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--data")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="target_test", choices=synth.SPLITS)
    e.add_argument("--model", choices=("teacher", "student"))
    e.add_argument("--sweep", help="comma-separated IoU thresholds, e.g. 0.5,0.7,0.9")
    e.add_argument("--error-analysis", action="store_true")
    e.add_argument("--bias-diagnostic", action="store_true",
                   help="also evaluate on source-like translations of the split")
    e.add_argument("--bias-epsilon", type=float, default=0.0)
    e.add_argument("--dump", type=int, default=0, metavar="N",
                   help="write N annotated detection images")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablation", parents=[common], help="variant x seed ladder")
    a.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    a.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    a.add_argument("--data")
    a.set_defaults(fn=cmd_ablation)

    tr = sub.add_parser("translate", parents=[common], help="apply/invert the domain shift")
    tr.add_argument("--direction", choices=("apply", "invert"), required=True)
    tr.add_argument("--input", required=True, help="split directory or folder of PNGs")
    tr.add_argument("--output", required=True)
    tr.add_argument("--epsilon", type=float, help="override shift.epsilon")
    tr.set_defaults(fn=cmd_translate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
