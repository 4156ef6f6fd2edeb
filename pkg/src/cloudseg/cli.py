"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 2 argument error, 3 data/consistency error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import autoconfig, baseline, fingerprint, infer, net, postproc, raster, synth, train
from .errors import ArgumentError, CloudSegError, DataError
from .evaluate import (
    MosResponse,
    confusion,
    metrics_from_confusion,
    mos_aggregate,
    tukey_summary,
    wilcoxon_two_tailed,
)
from .fingerprint import canonical_json

METRIC_NAMES = ("ji", "pr", "re", "spe", "oa")


# --- stage helpers --------------------------------------------------------

def _marker_path(run_dir, stage):
    return os.path.join(run_dir, "markers", f"{stage}.done")


def _stage_done(run_dir, stage):
    return os.path.exists(_marker_path(run_dir, stage))

def _mark_stage(run_dir, stage):
    os.makedirs(os.path.join(run_dir, "markers"), exist_ok=True)
    with open(_marker_path(run_dir, stage), "w", encoding="utf-8") as f:
        f.write("done\n")


def _load_training_items(records, base_dir, fp):
    items = {}
    for rec in records:
        patch, mask = raster.load_patch(rec, base_dir)
        if mask is None:
            raise DataError(f"{rec['patch_id']}: no GT mask")
        normalized = fingerprint.normalize_patch(patch, fp)
        items[rec["patch_id"]] = (normalized.values, mask)
    return items


def _load_ensemble(run_dir, config):
    members = []
    for i in range(config.n_folds):
        ckpt = os.path.join(run_dir, f"fold{i}")
        if not os.path.isdir(ckpt):
            raise DataError(f"missing checkpoint {ckpt}")
        members.append(net.load_checkpoint(config, ckpt))
    return infer.EnsembleModel(tuple(members))


def _predict_records(ensemble, records, base_dir, fp, out_dir, overlap, blend):
    os.makedirs(out_dir, exist_ok=True)
    config = ensemble.config
    ph, pw = config.patch_size
    n_done = 0
    t0 = time.time()
    for rec in records:
        patch, _ = raster.load_patch(rec, base_dir)
        normalized = fingerprint.normalize_patch(patch, fp)
        if (patch.height, patch.width) == (ph, pw):
            prob = infer.ensemble_predict_patch(ensemble, normalized.values)
        elif patch.height >= ph and patch.width >= pw:
            prob = infer.sliding_window_predict(ensemble, normalized, overlap, blend)
        else:
            raise DataError(
                f"{rec['patch_id']}: {patch.height}x{patch.width} smaller than "
                f"configured patch {ph}x{pw}"
            )
        mask = infer.binarize(prob, config.threshold)
        raster.save_tensor(prob, os.path.join(out_dir, f"{rec['patch_id']}.prob.cseg"))
        raster.save_tensor(mask, os.path.join(out_dir, f"{rec['patch_id']}.mask.cseg"))
        n_done += 1
    elapsed = max(1e-9, time.time() - t0)
    print(f"predicted {n_done} patches in {elapsed:.1f}s ({n_done / elapsed:.2f} patches/s)")


def _metric_record(patch_id, pred, gt):
    m = metrics_from_confusion(confusion(pred, gt))
    rec = {"patch_id": patch_id}
    for k in METRIC_NAMES:
        v = getattr(m, k)
        rec[k] = v
        rec[f"{k}_undefined"] = v is None
    return rec


def _evaluate_mask_dir(records, base_dir, mask_dir, suffix=".mask.cseg"):
    rows = []
    for rec in records:
        _, gt = raster.load_patch(rec, base_dir)
        if gt is None:
            raise DataError(f"{rec['patch_id']}: evaluation needs GT masks")
        pred = raster.load_tensor(os.path.join(mask_dir, rec["patch_id"] + suffix))
        rows.append(_metric_record(rec["patch_id"], pred, gt))
    return rows


def _write_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _summary(rows):
    out = {}
    for k in METRIC_NAMES:
        defined = [r[k] for r in rows if r[k] is not None]
        entry = {"n_defined": len(defined), "n_undefined": len(rows) - len(defined)}
        if defined:
            entry["mean"] = float(np.mean(defined))
            entry["tukey"] = tukey_summary(defined).to_dict()
        out[k] = entry
    return out


# --- subcommands ----------------------------------------------------------

def cmd_synth(args):
    spec = synth.SynthSpec(
        n_scenes=args.scenes,
        height=args.size[0],
        width=args.size[1],
        band_count=args.bands,
        cloud_density=args.density,
        haze_fraction=args.haze,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    records = synth.generate_synthetic_dataset(spec, args.out)
    print(f"wrote {len(records)} scenes to {args.out}")


def cmd_fingerprint(args):
    records = raster.read_manifest(args.manifest)
    fp = fingerprint.compute_fingerprint(records, os.path.dirname(args.manifest))
    os.makedirs(args.run_dir, exist_ok=True)
    fingerprint.save_fingerprint(fp, os.path.join(args.run_dir, "fingerprint.json"))
    print(f"fingerprint: {fp.n_patches} patches, median shape {fp.median_shape}")


def cmd_configure(args):
    fp = fingerprint.load_fingerprint(os.path.join(args.run_dir, "fingerprint.json"))
    budget = autoconfig.MemoryBudget(bytes_available=int(args.budget_gb * autoconfig.GIB))
    config, trace = autoconfig.configure_pipeline(
        fp, budget, args.folds, base_channels=args.base_channels, epochs=args.epochs
    )
    autoconfig.save_config(config, os.path.join(args.run_dir, "pipeline.json"))
    autoconfig.save_trace(trace, os.path.join(args.run_dir, "pipeline.trace.txt"))
    print("\n".join(trace))


def cmd_train(args):
    run_dir = args.run_dir
    config = autoconfig.load_config(os.path.join(run_dir, "pipeline.json"))
    fp = fingerprint.load_fingerprint(os.path.join(run_dir, "fingerprint.json"))
    records = raster.read_manifest(args.manifest)
    base_dir = os.path.dirname(args.manifest)
    items = _load_training_items(records, base_dir, fp)

    folds = train.make_folds(records, config.n_folds, args.seed)
    for i in range(config.n_folds):
        hyper = train.TrainHyper(
            epochs=config.epochs,
            batches_per_epoch=args.batches_per_epoch,
            lr0=config.lr0,
            momentum=config.momentum,
            seed=args.seed + 1000 * i,
            batch_size=args.batch_size or config.batch_size,
        )
        train_items = [items[p] for p in folds.train_ids(i)]
        val_items = [items[p] for p in folds.val_ids(i)]
        model, curve = train.train_fold(config, train_items, val_items, hyper)
        net.save_checkpoint(model, os.path.join(run_dir, f"fold{i}"))
        curve.write_csv(os.path.join(run_dir, f"fold{i}_curve.csv"))
        final = curve.val_ji[-1] if curve.val_ji else float("nan")
        print(f"fold {i}: final val JI {final:.4f}")


def cmd_predict(args):
    run_dir = args.run_dir
    config = autoconfig.load_config(os.path.join(run_dir, "pipeline.json"))
    fp = fingerprint.load_fingerprint(os.path.join(run_dir, "fingerprint.json"))
    ensemble = _load_ensemble(run_dir, config)
    records = raster.read_manifest(args.manifest)
    out_dir = args.out or os.path.join(run_dir, "predictions")
    _predict_records(
        ensemble, records, os.path.dirname(args.manifest), fp, out_dir,
        args.overlap, config.blend,
    )


def cmd_postprocess(args):
    os.makedirs(args.out_dir, exist_ok=True)
    names = sorted(f for f in os.listdir(args.in_dir) if f.endswith(".mask.cseg"))
    if not names:
        raise DataError(f"no .mask.cseg files in {args.in_dir}")
    for name in names:
        mask = raster.load_tensor(os.path.join(args.in_dir, name))
        if args.rule == "adaptive":
            out = postproc.adaptive_postprocess(mask)
        elif args.rule in ("open", "close"):
            out = postproc.morph(mask, args.rule)
        else:
            out = raster.check_mask(mask)
        raster.save_tensor(out, os.path.join(args.out_dir, name))
    print(f"post-processed {len(names)} masks with rule {args.rule}")


def cmd_baseline(args):
    band = raster.load_tensor(args.band)
    tau = None if args.otsu or args.tau is None else args.tau
    mask = baseline.band_threshold(band, tau)
    raster.save_tensor(mask, args.out)
    used = baseline.otsu_threshold(band) if tau is None else tau
    print(f"threshold {used:.6g}: {mask.mean():.3f} cloud fraction")


def cmd_evaluate(args):
    records = raster.read_manifest(args.manifest)
    base_dir = os.path.dirname(args.manifest)
    os.makedirs(args.run_dir, exist_ok=True)

    rows = _evaluate_mask_dir(records, base_dir, args.pred_dir)
    _write_jsonl(rows, os.path.join(args.run_dir, "metrics.jsonl"))
    summary = {"primary": _summary(rows)}

    if args.compare_dir:
        alt = _evaluate_mask_dir(records, base_dir, args.compare_dir)
        _write_jsonl(alt, os.path.join(args.run_dir, "metrics_compare.jsonl"))
        summary["compare"] = _summary(alt)
        paired = [
            (r[k], a[k])
            for k in ("ji",)
            for r, a in zip(rows, alt)
            if r[k] is not None and a[k] is not None
        ]
        ji_a = np.array([p[0] for p in paired])
        ji_b = np.array([p[1] for p in paired])
        res = wilcoxon_two_tailed(ji_a, ji_b)
        significance = {
            "metric": "ji",
            "w": res.w,
            "p": res.p,
            "n": res.n,
            "exact": res.exact,
            "degenerate": res.degenerate,
            "significant_at_0.05": bool(res.p < 0.05),
        }
        with open(os.path.join(args.run_dir, "significance.json"), "w", encoding="utf-8") as f:
            f.write(canonical_json(significance))
        delta = float(np.mean(ji_b) - np.mean(ji_a))
        # small post-processing deltas only show at 4 decimals
        summary["delta_ji"] = f"{delta:+.4f}"

    with open(os.path.join(args.run_dir, "summary.json"), "w", encoding="utf-8") as f:
        f.write(canonical_json(summary))
    mean_ji = summary["primary"]["ji"].get("mean")
    print(f"mean JI: {mean_ji if mean_ji is None else format(mean_ji, '.4f')}")


def cmd_mos_report(args):
    responses = []
    with open(args.responses, encoding="utf-8") as f:
        for row in csv.DictReader(f):
            responses.append(MosResponse(row["image_id"], row["choice"].upper()))
    ji_table = {}
    with open(args.ji_table, encoding="utf-8") as f:
        for row in csv.DictReader(f):
            ji_table[row["image_id"]] = (float(row["ji_a"]), float(row["ji_b"]))

    table = mos_aggregate(responses, ji_table)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["images", "pct_a", "avg_ji_a", "pct_b", "avg_ji_b",
                         "pct_both", "pct_none", "n_images"])
        for label, row in (("higher_ji_mask_a", table.higher_a),
                           ("higher_ji_mask_b", table.higher_b),
                           ("all", table.all_images)):
            if row is None:
                continue
            writer.writerow([
                label,
                f"{row.pct_a:.2f}", f"{row.avg_ji_a:.3f}",
                f"{row.pct_b:.2f}", f"{row.avg_ji_b:.3f}",
                f"{row.pct_both:.2f}", f"{row.pct_none:.2f}", row.n_images,
            ])
    print(f"wrote MOS table for {table.all_images.n_images} images to {args.out}")


def cmd_render(args):
    bands = [raster.load_tensor(p) for p in args.bands]
    if len(bands) != 3:
        raise ArgumentError("render needs exactly 3 band files (R,G,B)")
    mask = raster.load_tensor(args.mask)
    gt = raster.load_tensor(args.gt) if args.gt else None
    raster.render_overlay(np.stack(bands), mask, gt, args.out)
    print(f"wrote {args.out}")


PIPELINE_STAGES = ("fingerprint", "configure", "train", "predict", "postprocess", "evaluate")


def cmd_pipeline(args):
    with open(args.config, encoding="utf-8") as f:
        cfg = json.load(f)
    run_dir = args.run_dir or cfg.get("run_dir")
    if not run_dir:
        raise ArgumentError("run_dir required (flag or config key)")
    os.makedirs(run_dir, exist_ok=True)
    if args.force and os.path.isdir(os.path.join(run_dir, "markers")):
        for name in os.listdir(os.path.join(run_dir, "markers")):
            os.unlink(os.path.join(run_dir, "markers", name))

    post_rule = args.post_rule or cfg.get("post_rule", "none")
    seed = cfg.get("seed", args.seed)
    ns = argparse.Namespace

    def stage(name, fn):
        if _stage_done(run_dir, name):
            print(f"[{name}] already complete, skipping")
            return
        print(f"[{name}] running")
        fn()
        _mark_stage(run_dir, name)

    stage("fingerprint", lambda: cmd_fingerprint(
        ns(manifest=cfg["train_manifest"], run_dir=run_dir)))
    stage("configure", lambda: cmd_configure(
        ns(run_dir=run_dir,
           budget_gb=cfg.get("budget_gb", args.budget_gb),
           folds=cfg.get("folds", 4),
           base_channels=cfg.get("base_channels", autoconfig.BASE_CHANNELS),
           epochs=cfg.get("epochs", 1000))))
    stage("train", lambda: cmd_train(
        ns(manifest=cfg["train_manifest"], run_dir=run_dir, seed=seed,
           batches_per_epoch=cfg.get("batches_per_epoch", 50),
           batch_size=cfg.get("batch_size", 0))))

    eval_manifest = cfg.get("test_manifest", cfg["train_manifest"])
    pred_dir = os.path.join(run_dir, "predictions")
    stage("predict", lambda: cmd_predict(
        ns(manifest=eval_manifest, run_dir=run_dir, out=pred_dir,
           overlap=cfg.get("overlap", 0.0))))

    post_dir = os.path.join(run_dir, "postprocessed")
    if post_rule != "none":
        stage("postprocess", lambda: cmd_postprocess(
            ns(in_dir=pred_dir, out_dir=post_dir, rule=post_rule)))

    stage("evaluate", lambda: cmd_evaluate(
        ns(manifest=eval_manifest, pred_dir=pred_dir, run_dir=run_dir,
           compare_dir=post_dir if post_rule != "none" else None)))
    print("pipeline complete")


# --- parser ---------------------------------------------------------------

def _size(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("size must be H,W")
    return (int(parts[0]), int(parts[1]))


def build_parser():
    p = argparse.ArgumentParser(prog="cloudseg",
                                description="Self-configuring cloud segmentation pipeline")
    p.add_argument("--run-dir", default=None,
                   help="artifact directory (default: run, or the pipeline "
                        "config's run_dir key)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0, help="0 = leave BLAS defaults")
    p.add_argument("--budget-gb", type=float, default=24.0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--scenes", type=int, default=50)
    s.add_argument("--size", type=_size, default=(128, 128))
    s.add_argument("--bands", type=int, default=4)
    s.add_argument("--density", type=float, default=0.3)
    s.add_argument("--haze", type=float, default=0.2)
    s.add_argument("--noise-std", type=float, default=0.02)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("fingerprint", help="fingerprint a training manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(fn=cmd_fingerprint)

    s = sub.add_parser("configure", help="derive the pipeline config")
    s.add_argument("--folds", type=int, default=4)
    s.add_argument("--base-channels", type=int, default=autoconfig.BASE_CHANNELS)
    s.add_argument("--epochs", type=int, default=1000)
    s.set_defaults(fn=cmd_configure)

    s = sub.add_parser("train", help="train the fold models")
    s.add_argument("--manifest", required=True)
    s.add_argument("--batches-per-epoch", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=0, help="0 = use config batch")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("predict", help="run ensemble inference over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default="")
    s.add_argument("--overlap", type=float, default=0.0)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("postprocess", help="morphological mask post-processing")
    s.add_argument("--in-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--rule", choices=("adaptive", "open", "close", "none"),
                   default="adaptive")
    s.set_defaults(fn=cmd_postprocess)

    s = sub.add_parser("baseline", help="single-band threshold detector")
    s.add_argument("--band", required=True)
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--otsu", action="store_true")
    s.add_argument("--out", default="baseline_mask.cseg")
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("evaluate", help="score predicted masks against GT")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--compare-dir", default=None)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("mos-report", help="aggregate MOS study responses")
    s.add_argument("--responses", required=True)
    s.add_argument("--ji-table", dest="ji_table", required=True)
    s.add_argument("--out", default="mos_table.csv")
    s.set_defaults(fn=cmd_mos_report)

    s = sub.add_parser("render", help="write an RGB/mask overlay pixmap")
    s.add_argument("--bands", nargs=3, required=True, metavar=("R", "G", "B"))
    s.add_argument("--mask", required=True)
    s.add_argument("--gt", default=None)
    s.add_argument("--out", default="overlay.ppm")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("pipeline", help="run the end-to-end pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--post-rule", choices=("adaptive", "open", "close", "none"),
                   default=None)
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.run_dir is None and args.command != "pipeline":
        args.run_dir = "run"
    if args.threads:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        args.fn(args)
    except CloudSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
