"""``lesiontrack`` command line: generate, train-tracker, train-refiner, track, eval, plot."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time

import torch

from . import BACKEND, __version__
from .config import RunConfig, load_run_config, parse_override
from .errors import ConfigError, DataError, LesionTrackError
from .evaluation import aggregate, emit_report, read_metrics_json, score_pair, success_plot_svg
from .pipeline import (SELECTIONS, TrackResult, build_tracker_samples, harvest_refine_data, track_pairs)
from .refine import RefineNet, make_refiner, train_refiner
from .sampling.manifest import enumerate_pairs, load_manifest, pair_summary, save_manifest
from .sampling.synth import synth_config_dict, synth_generate
from .tracknet import BackboneConfig, TrackNet, make_tracker, train_tracker
from .weights import file_sha256, load_into, read_weights, save_weights

log = logging.getLogger("lesiontrack")


# -- helpers -------------------------------------------------------------------

def _overrides(args) -> dict:
    ov = dict(parse_override(s) for s in getattr(args, "set", None) or [])
    flag_map = {
        "seed": "seed",
        "method": "track.method",
        "template_variant": "track.template_variant",
        "selection": "track.selection",
        "epochs": None,
        "cases": "synth.n_cases",
        "timepoints": "synth.timepoints",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is None:
            continue
        if attr == "epochs":
            key = "refine.epochs" if args.command == "train-refiner" else "tracker_train.epochs"
        ov[key] = v
    if getattr(args, "no_centerness", False):
        ov["track.use_centerness"] = False
    return ov


def _config(args) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sidecar(path, **info):
    """Timing and environment details live next to, never inside, the outputs."""
    _write_json(path + ".meta.json", {"created_unix": time.time(), "version": __version__,
                                      "kernel_backend": BACKEND, **info})


def _ensure_parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _check_spacing(cfg: RunConfig, manifest):
    if abs(manifest.spacing_mm - cfg.patch.spacing_mm) > 1e-9:
        raise ConfigError(f"manifest spacing {manifest.spacing_mm} mm differs from patch.spacing_mm "
                          f"{cfg.patch.spacing_mm}")


def _write_trace(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def load_tracker(path, variant: str | None = None) -> TrackNet:
    header, tensors = read_weights(path)
    if header.get("kind") != "tracker":
        raise DataError(f"{path}: expected tracker weights, found {header.get('kind')!r}")
    arch = header["architecture"]
    cfg = BackboneConfig.from_dict(arch["backbone"])
    if variant is not None and arch.get("template_variant") not in (None, variant):
        want = 2 if variant == "mask_guided" else 1
        if cfg.in_channels != want:
            raise ConfigError(f"{path}: trained for template variant {arch['template_variant']!r}, "
                              f"incompatible with {variant!r}")
    return load_into(TrackNet(cfg), tensors).eval()


def load_refiner(path) -> RefineNet:
    header, tensors = read_weights(path)
    if header.get("kind") != "refiner":
        raise DataError(f"{path}: expected refiner weights, found {header.get('kind')!r}")
    arch = header["architecture"]
    return load_into(RefineNet(BackboneConfig.from_dict(arch["backbone"]), arch["hidden"]), tensors).eval()


# -- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = args.out
    if os.path.isdir(out) and os.listdir(out):
        if not args.force:
            raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    os.makedirs(out, exist_ok=True)
    manifest = synth_generate(cfg.synth, cfg.seed, out, jobs=args.jobs)
    save_manifest(manifest, os.path.join(out, "manifest.json"))
    _write_json(os.path.join(out, "run_config.json"), cfg.to_document())
    n_pairs = len(enumerate_pairs(manifest))
    if n_pairs == 0:
        log.warning("generated %d cases with %d time point(s): zero lesion pairs", cfg.synth.n_cases,
                    cfg.synth.timepoints)
    summary = pair_summary(manifest)
    print(f"{'split':<6} {'type':<14} {'cases':>6} {'views':>6} {'pairs':>6}")
    for split in sorted(summary):
        for lt in sorted(summary[split]):
            r = summary[split][lt]
            print(f"{split:<6} {lt:<14} {r['cases']:>6} {r['views']:>6} {r['pairs']:>6}")
    print(f"total pairs: {n_pairs}")
    _sidecar(os.path.join(out, "manifest.json"), seed=cfg.seed, jobs=args.jobs)
    return 0


def _train_pairs(cfg: RunConfig, manifest_path, split):
    manifest = load_manifest(manifest_path)
    _check_spacing(cfg, manifest)
    sub = manifest.subset(split)
    pairs = enumerate_pairs(sub, cfg.track.later_as_template)
    if not pairs:
        raise DataError(f"{manifest_path}: no pairs in split {split!r}")
    return sub, pairs


def cmd_train_tracker(args) -> int:
    cfg = _config(args)
    manifest, pairs = _train_pairs(cfg, args.manifest, args.split)
    pcfg = cfg.pipeline_config()
    t0 = time.perf_counter()
    samples = build_tracker_samples(manifest, pairs, pcfg, cfg.backbone, jobs=args.jobs)
    model = make_tracker(cfg.backbone, cfg.seed)
    tcfg = cfg.train_config()
    trace = train_tracker(model, samples, tcfg, cfg.loss) if tcfg.epochs > 0 else None
    _ensure_parent(args.out)
    arch = {"backbone": cfg.backbone.to_dict(), "template_variant": cfg.track.template_variant,
            "search_px": cfg.patch.search_px, "template_px": cfg.patch.template_px}
    save_weights(args.out, model, "tracker", arch)
    rows = trace.epochs if trace else []
    _write_trace(args.trace or args.out + ".trace.csv", rows, ["epoch", "total", "cls", "ctr", "reg"])
    _sidecar(args.out, seconds=time.perf_counter() - t0, pairs=len(pairs), sha256=file_sha256(args.out))
    print(f"tracker: {len(pairs)} pairs, {len(rows)} epochs -> {args.out}")
    return 0


def cmd_train_refiner(args) -> int:
    cfg = _config(args)
    manifest, pairs = _train_pairs(cfg, args.manifest, args.split)
    tracker = load_tracker(args.tracker, cfg.track.template_variant)
    pcfg = cfg.pipeline_config()
    t0 = time.perf_counter()
    data = harvest_refine_data(manifest, pairs, tracker, pcfg, jobs=args.jobs)
    rcfg = pcfg.refine
    model = make_refiner(rcfg)
    trace = train_refiner(model, data, rcfg) if rcfg.epochs > 0 else None
    _ensure_parent(args.out)
    arch = {"backbone": rcfg.backbone.to_dict(), "hidden": rcfg.hidden, "refine_px": rcfg.refine_px}
    save_weights(args.out, model, "refiner", arch)
    rows = trace.epochs if trace else []
    _write_trace(args.trace or args.out + ".trace.csv", rows, ["epoch", "bce", "positives", "negatives"])
    _sidecar(args.out, seconds=time.perf_counter() - t0, pairs=len(data), sha256=file_sha256(args.out))
    print(f"refiner: {len(data)} pairs, {len(rows)} epochs -> {args.out}")
    return 0


def cmd_track(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest, check_files=False)
    _check_spacing(cfg, manifest)
    sub = manifest.subset(args.split)
    pairs = enumerate_pairs(sub, cfg.track.later_as_template)
    method = cfg.track.method
    tracker = refiner = None
    if method in ("tracker", "full"):
        if not args.tracker:
            raise ConfigError(f"--method {method} requires --tracker weights")
        tracker = load_tracker(args.tracker, cfg.track.template_variant)
    if method == "full":
        if not args.refiner:
            raise ConfigError("--method full requires --refiner weights")
        refiner = load_refiner(args.refiner)
    t0 = time.perf_counter()
    results = track_pairs(sub, pairs, tracker, refiner, cfg.pipeline_config(), jobs=args.jobs)
    _ensure_parent(args.out)
    timing = {}
    with open(args.out, "w") as fh:
        for pair, (pid, res, secs) in zip(pairs, results):
            row = {"pair_id": pid, "case_id": pair.case_id, "lesion_type": pair.lesion_type,
                   "method": method, "result": res.to_dict()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            timing[pid] = secs
    failed = sum(r.stage == "failed" for _, r, _ in results)
    _sidecar(args.out, seconds=time.perf_counter() - t0, per_pair_seconds=timing, jobs=args.jobs,
             config=cfg.to_document())
    print(f"tracked {len(results)} pairs ({failed} failed) with method {method} -> {args.out}")
    return 0


def read_results(path) -> list[dict]:
    if not os.path.exists(path):
        raise DataError(f"results file not found: {path}")
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError:
                    raise DataError(f"{path}:{n}: invalid JSON") from None
    return rows


def evaluate_results(rows, manifest, method: str):
    by_id = {p.pair_id: p for p in enumerate_pairs(manifest, True) + enumerate_pairs(manifest, False)}
    outcomes = []
    for row in rows:
        pair = by_id.get(row["pair_id"])
        if pair is None:
            raise DataError(f"result pair {row['pair_id']!r} is not in the manifest")
        res = TrackResult.from_dict(row["result"])
        outcomes.append(score_pair(res.box, pair.search.box, manifest.spacing_mm, pair.pair_id,
                                   pair.lesion_type))
    return aggregate(outcomes, method)


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    names = args.names or []
    if names and len(names) != len(args.results):
        raise ConfigError("--names must match the number of results files")
    reports = []
    for i, path in enumerate(args.results):
        name = names[i] if names else os.path.splitext(os.path.basename(path))[0]
        reports.append(evaluate_results(read_results(path), manifest, name))
    emit_report(reports, args.out)
    print(f"{'method':<20} {'AO':>7} {'Acc':>7} {'Rob':>7} {'L2mm':>7} {'AUC':>7}")
    for r in reports:
        m = r.overall
        print(f"{r.method:<20} {m.ao:7.3f} {m.accuracy:7.3f} {m.robustness:7.3f} {m.mean_l2_mm:7.2f} {m.auc:7.3f}")
    return 0


def cmd_plot(args) -> int:
    reports = [read_metrics_json(p) for p in args.metrics]
    _ensure_parent(args.out)
    with open(args.out, "w") as fh:
        fh.write(success_plot_svg(reports, args.title))
    print(f"wrote {args.out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesiontrack", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        sp.add_argument("--jobs", type=int, default=1)
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="write a synthetic benchmark")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int)
    g.add_argument("--timepoints", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    for name, func in (("train-tracker", cmd_train_tracker), ("train-refiner", cmd_train_refiner)):
        t = sub.add_parser(name)
        common(t)
        t.add_argument("--manifest", required=True)
        t.add_argument("--out", required=True, help="weights file")
        t.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
        t.add_argument("--epochs", type=int)
        t.add_argument("--split", default="train")
        t.add_argument("--template-variant", choices=("crop_resize", "mask_guided", "masked"))
        if name == "train-refiner":
            t.add_argument("--tracker", required=True)
        t.set_defaults(func=func)

    k = sub.add_parser("track")
    common(k)
    k.add_argument("--manifest", required=True)
    k.add_argument("--out", required=True, help="results JSONL")
    k.add_argument("--tracker")
    k.add_argument("--refiner")
    k.add_argument("--split", default="test")
    k.add_argument("--method", choices=("affine", "tracker", "full"))
    k.add_argument("--template-variant", choices=("crop_resize", "mask_guided", "masked"))
    k.add_argument("--no-centerness", action="store_true")
    k.add_argument("--selection", choices=SELECTIONS, help="refined candidate ranking (default similarity)")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval")
    e.add_argument("--manifest", required=True)
    e.add_argument("--results", nargs="+", required=True)
    e.add_argument("--names", nargs="+")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot")
    pl.add_argument("--metrics", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--title", default="Success plot")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    try:
        return args.func(args)
    except LesionTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
