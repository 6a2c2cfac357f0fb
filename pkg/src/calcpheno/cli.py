"""Command-line pipeline: phantom | train | segment | evaluate | phenotype | collagen | run.

Every subcommand accepts ``--config FILE`` (JSON); explicit flags override
the file. Exit status is 0 on success, 2 for configuration errors and 3 when a
processing stage fails. Each command writes into one output directory with a
``manifest.json`` listing artifacts, the resolved config and its hash.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import collagen as col
from . import phantom as ph
from .metrics import StageTimings, aggregate_scores, confusion, dsc, jsc, report_timings
from .particles import extract_particles, write_particle_csv
from .phenotype import (PHENOTYPES, ClusterParams, TopologyParams, build_report,
                        phenotype_particles, phenotype_volume)
from .segnet import SegmentationModel, TrainConfig, threshold_segment, train_framework
from .volgrid import (BinaryMask, load_annotations, load_mask, load_stack, save_annotations,
                      save_mask, save_volume)

log = logging.getLogger("calcpheno")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

DEFAULTS = {
    "stack": None,
    "annotations": None,
    "out": None,
    "models": None,
    "seed": 0,
    "threads": None,
    "train": {"patience_sample": 45, "patience_lipid": 15, "pixel_cap": 200_000,
              "val_pixel_cap": None, "hidden": 500, "max_epochs": 300, "extractor_iters": 40,
              "min_component_fraction": 0.001, "fill_lipid_holes": True,
              "bright_cutoff": 0.7, "lipid_min_fraction": 2e-4},
    "calcification": {"tau": 0.7},
    "particles": {"min_volume_voxels": 8, "size_threshold_um": 500.0, "connectivity": 26},
    "cluster": {"eps_um": 150.0, "min_pts": 3},
    "topology": {"opening_radius_um": 150.0},
    "colocalization": {"overlap_fraction": 0.5, "mode": "overlap"},
    "phantom": {"size": 256, "seed": 0, "artifacts": True, "spec": None},
    "collagen": {"collagen": None, "calcification": None, "window_um": 60.0, "min_pts": 3,
                 "pairing": "inverse", "micros_only": False},
    "evaluate": {"segmentation": None, "slices": "held-out"},
}


class ConfigError(Exception):
    pass


class StageFailure(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    flat = {"stack": "stack", "annotations": "annotations", "out": "out", "models": "models",
            "seed": "seed", "threads": "threads"}
    for attr, key in flat.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    nested = {"tau": ("calcification", "tau"), "eps_um": ("cluster", "eps_um"),
              "min_pts": ("cluster", "min_pts"),
              "opening_radius_um": ("topology", "opening_radius_um"),
              "overlap_fraction": ("colocalization", "overlap_fraction"),
              "pixel_cap": ("train", "pixel_cap"), "hidden": ("train", "hidden"),
              "extractor_iters": ("train", "extractor_iters"),
              "size": ("phantom", "size"), "phantom_seed": ("phantom", "seed"),
              "spec": ("phantom", "spec"), "no_artifacts": ("phantom", "artifacts"),
              "collagen_mask": ("collagen", "collagen"),
              "calc_mask": ("collagen", "calcification"),
              "window_um": ("collagen", "window_um"), "pairing": ("collagen", "pairing"),
              "segmentation": ("evaluate", "segmentation"), "slices": ("evaluate", "slices")}
    for attr, (blk, key) in nested.items():
        v = getattr(args, attr, None)
        if v is None or v is False:
            continue
        cfg[blk][key] = (not v) if attr == "no_artifacts" else v
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"missing required setting '{k}'")


def _exists(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")


def _validate_params(cfg):
    try:
        ClusterParams(float(cfg["cluster"]["eps_um"]), int(cfg["cluster"]["min_pts"]))
        TopologyParams(float(cfg["topology"]["opening_radius_um"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 <= float(cfg["calcification"]["tau"]) <= 1.0:
        raise ConfigError("calcification tau must lie in [0, 1]")
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    if not 0.0 < float(cfg["colocalization"]["overlap_fraction"]) <= 1.0:
        raise ConfigError("overlap_fraction must lie in (0, 1]")


class Run:
    """Output directory with an incrementally written manifest."""

    def __init__(self, out, command, cfg):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = {"command": command, "config": cfg, "config_hash": config_hash(cfg),
                         "artifacts": {}, "status": "running"}
        self.timings = StageTimings()
        self.flush()

    def path(self, name):
        return self.dir / name

    def add(self, key, name):
        self.manifest["artifacts"][key] = name
        self.flush()

    def flush(self):
        (self.dir / "manifest.json").write_text(
            json.dumps(self.manifest, indent=2, sort_keys=True, default=str))

    def stage(self, name):
        run = self

        class _Stage:
            def __enter__(self):
                self._t = run.timings.time(name)
                self._t.__enter__()

            def __exit__(self, et, ev, tb):
                self._t.__exit__(et, ev, tb)
                if ev is not None and not isinstance(ev, (StageFailure, ConfigError)):
                    raise StageFailure(name, ev) from ev
                return False

        return _Stage()

    def finish(self, status="ok", error=None, stage=None):
        self.manifest["status"] = status
        if error is not None:
            self.manifest["error"] = str(error)
            self.manifest["failed_stage"] = stage
        if self.timings.seconds:
            table, d = report_timings(self.timings)
            (self.dir / "timings.json").write_text(json.dumps(d, indent=2, sort_keys=True))
            (self.dir / "timings.txt").write_text(table + "\n")
            self.manifest["artifacts"]["timings"] = "timings.json"
        self.flush()


def _train_config(cfg, annotations):
    t = cfg["train"]
    return TrainConfig(annotations, patience_sample=int(t["patience_sample"]),
                       patience_lipid=int(t["patience_lipid"]), pixel_cap=t["pixel_cap"],
                       val_pixel_cap=t.get("val_pixel_cap"), seed=int(cfg["seed"]),
                       hidden=int(t["hidden"]), max_epochs=int(t["max_epochs"]),
                       extractor_iters=int(t["extractor_iters"]),
                       min_component_fraction=float(t["min_component_fraction"]),
                       fill_lipid_holes=bool(t["fill_lipid_holes"]),
                       bright_cutoff=t["bright_cutoff"],
                       lipid_min_fraction=float(t["lipid_min_fraction"]), threads=int(cfg["threads"]))


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def _segment(run, model, volume, threads):
    with run.stage("segmentation_sample"):
        sample = np.stack(_pmap(lambda z: model.segment_sample_slice(volume, z),
                                range(volume.nz), threads))
    with run.stage("segmentation_lipid"):
        lipid = np.stack(_pmap(lambda z: model.segment_lipid_slice(volume, z, sample[z]),
                               range(volume.nz), threads))
    s = BinaryMask(sample, volume.spacing_um)
    l = BinaryMask(lipid & sample, volume.spacing_um)
    save_mask(s, run.path("sample.raw"))
    save_mask(l, run.path("lipid.raw"))
    run.add("sample_mask", "sample.raw")
    run.add("lipid_mask", "lipid.raw")
    return s, l


def _train_or_load(run, cfg, volume):
    if cfg.get("models"):
        _exists(cfg["models"], "model directory")
        with run.stage("load_models"):
            model = SegmentationModel.load(cfg["models"])
        run.manifest["models"] = str(cfg["models"])
        return model
    anns = load_annotations(cfg["annotations"])
    tcfg = _train_config(cfg, anns)
    try:
        model = train_framework(volume, tcfg, timings=run.timings)
    except Exception as exc:
        raise StageFailure("training", exc) from exc
    model.save(run.path("models"))
    run.add("models", "models")
    return model


def _phenotype(run, cfg, volume, sample, lipid):
    with run.stage("segmentation_calcification"):
        calc = threshold_segment(volume, float(cfg["calcification"]["tau"]))
        calc = BinaryMask(calc.bits & sample.bits, volume.spacing_um)
    save_mask(calc, run.path("calcification.raw"))
    run.add("calcification_mask", "calcification.raw")
    p = cfg["particles"]
    with run.stage("particle_identification"):
        pset = extract_particles(calc, volume.spacing_um, int(p["connectivity"]),
                                 float(p["size_threshold_um"]), int(p["min_volume_voxels"]))
    try:
        pset = phenotype_particles(
            pset, lipid, ClusterParams(float(cfg["cluster"]["eps_um"]), int(cfg["cluster"]["min_pts"])),
            TopologyParams(float(cfg["topology"]["opening_radius_um"])),
            float(cfg["colocalization"]["overlap_fraction"]), cfg["colocalization"]["mode"],
            timings=run.timings)
    except Exception as exc:
        raise StageFailure("phenotype", exc) from exc
    with run.stage("report"):
        report = build_report(sample, lipid, pset)
        run.path("report.json").write_text(report.to_json(timings=False) + "\n")
        write_particle_csv(pset, run.path("particles.csv"))
        phenotype_volume(pset).tofile(run.path("phenotype.raw"))
        (run.path("phenotype.json")).write_text(json.dumps(
            {"nx": volume.nx, "ny": volume.ny, "nz": volume.nz, "dtype": "uint8",
             "spacing_um": volume.spacing_um, "codes": {str(i + 1): k for i, k in enumerate(PHENOTYPES)}},
            indent=2, sort_keys=True))
    for k, v in (("report", "report.json"), ("particles", "particles.csv"),
                 ("phenotype_volume", "phenotype.raw")):
        run.add(k, v)
    return report, pset


# ---------------------------------------------------------------- commands

def cmd_phantom(cfg, run):
    pc = cfg["phantom"]
    if pc.get("spec"):
        _exists(pc["spec"], "phantom spec")
        spec = ph.PhantomSpec.from_dict(json.loads(Path(pc["spec"]).read_text()))
    else:
        spec = ph.standard_spec(int(pc["size"]), int(pc["seed"]), bool(pc["artifacts"]))
    with run.stage("phantom"):
        p = ph.generate(spec)
    save_volume(p.volume, run.path("volume.raw"))
    for name, m in (("sample", p.sample), ("lipid", p.lipid), ("calcification", p.calcification)):
        save_mask(m, run.path(f"truth_{name}.raw"))
        run.add(f"truth_{name}", f"truth_{name}.raw")
    run.path("truth.json").write_text(json.dumps(p.truth, indent=2, sort_keys=True, default=float))
    run.path("spec.json").write_text(spec.to_json())
    zs = ph.annotated_slices(spec.shape[0])
    save_annotations(p.annotations(zs), run.path("annotations"), spec.spacing_um)
    for k, v in (("volume", "volume.raw"), ("truth", "truth.json"), ("spec", "spec.json"),
                 ("annotations", "annotations/manifest.json")):
        run.add(k, v)


def cmd_train(cfg, run):
    _require(cfg, "stack", "annotations")
    _exists(cfg["stack"], "stack")
    _exists(cfg["annotations"], "annotation manifest")
    volume = load_stack(cfg["stack"])
    cfg = dict(cfg, models=None)
    _train_or_load(run, cfg, volume)


def cmd_segment(cfg, run):
    _require(cfg, "stack", "models")
    _exists(cfg["stack"], "stack")
    _exists(cfg["models"], "model directory")
    volume = load_stack(cfg["stack"])
    model = _train_or_load(run, cfg, volume)
    _segment(run, model, volume, int(cfg["threads"]))


def _eval_rows(pred, anns, zs):
    rows = []
    for a in anns:
        if a.z not in zs:
            continue
        for kind, truth in (("sample", a.sample_mask), ("lipid", a.lipid_mask)):
            c = confusion(pred[kind].bits[a.z], truth)
            rows.append({"z": a.z, "target": kind, "dsc": dsc(c).value, "jsc": jsc(c).value,
                         "tp": c.TP, "fp": c.FP, "fn": c.FN})
    return rows


def cmd_evaluate(cfg, run):
    _require(cfg, "annotations")
    seg = cfg["evaluate"]["segmentation"]
    _exists(seg, "segmentation directory")
    _exists(cfg["annotations"], "annotation manifest")
    anns = sorted(load_annotations(cfg["annotations"]), key=lambda a: a.z)
    pred = {k: load_mask(Path(seg) / f"{k}.raw") for k in ("sample", "lipid")}
    which = cfg["evaluate"]["slices"]
    if which == "held-out":
        zs = {a.z for a in anns[1::2]}
    elif which == "all":
        zs = {a.z for a in anns}
    else:
        raise ConfigError(f"unknown slice selection {which!r}")
    with run.stage("evaluate"):
        rows = _eval_rows(pred, anns, zs)
    with open(run.path("slice_scores.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["z"])
        w.writeheader()
        w.writerows(rows)
    summary = {}
    for kind in ("sample", "lipid"):
        for m in ("dsc", "jsc"):
            vals = [r[m] for r in rows if r["target"] == kind]
            if vals:
                mean, sd = aggregate_scores(vals)
                summary[f"{kind}_{m}"] = {"mean": mean, "std": sd.value, "n": len(vals)}
    run.path("summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    run.add("slice_scores", "slice_scores.csv")
    run.add("summary", "summary.json")
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_phenotype(cfg, run):
    _require(cfg, "stack")
    seg = cfg["evaluate"]["segmentation"]
    _exists(cfg["stack"], "stack")
    _exists(seg, "segmentation directory")
    volume = load_stack(cfg["stack"])
    sample = load_mask(Path(seg) / "sample.raw")
    lipid = load_mask(Path(seg) / "lipid.raw")
    _phenotype(run, cfg, volume, sample, lipid)


def cmd_collagen(cfg, run):
    cc = cfg["collagen"]
    _exists(cc["collagen"], "collagen mask")
    _exists(cc["calcification"], "calcification mask")
    if cc["pairing"] not in ("inverse", "direct"):
        raise ConfigError(f"unknown pairing {cc['pairing']!r}")
    collagen = load_mask(cc["collagen"])
    calc = load_mask(cc["calcification"])
    p = cfg["particles"]
    with run.stage("particle_identification"):
        pset = extract_particles(calc, calc.spacing_um, int(p["connectivity"]),
                                 float(p["size_threshold_um"]), int(p["min_volume_voxels"]))
    with run.stage("collagen_density"):
        fld = col.local_density(collagen, float(cc["window_um"]))
        split = col.split_two_level(fld)
        c = col.label_by_collagen(pset, split, fld)
    with run.stage("density_search"):
        res = col.search_density_threshold(pset, c, min_pts=int(cc["min_pts"]),
                                           micros_only=bool(cc["micros_only"]),
                                           pairing=cc["pairing"])
    run.path("coupling.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    run.add("coupling", "coupling.json")
    print(f"best eps {res.best_eps_um:.2f} um, agreement {res.agreement:.3f}, "
          f"converged {res.converged}")


def cmd_run(cfg, run):
    _require(cfg, "stack")
    _exists(cfg["stack"], "stack")
    if cfg.get("models"):
        _exists(cfg["models"], "model directory")
    else:
        _require(cfg, "annotations")
        _exists(cfg["annotations"], "annotation manifest")
    volume = load_stack(cfg["stack"])
    model = _train_or_load(run, cfg, volume)
    sample, lipid = _segment(run, model, volume, int(cfg["threads"]))
    report, _ = _phenotype(run, cfg, volume, sample, lipid)
    table, _ = report_timings(run.timings)
    print(table)
    print(json.dumps({"ratios": report.ratios, "phenotype_counts": report.counts},
                     indent=2, sort_keys=True))


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "segment": cmd_segment,
            "evaluate": cmd_evaluate, "phenotype": cmd_phenotype, "collagen": cmd_collagen,
            "run": cmd_run}


def build_parser():
    ap = argparse.ArgumentParser(prog="calcpheno", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("phantom", help="render a synthetic phantom with truth"))
    p.add_argument("--spec", help="phantom spec JSON (default: standard layout)")
    p.add_argument("--size", type=int)
    p.add_argument("--phantom-seed", type=int, dest="phantom_seed")
    p.add_argument("--no-artifacts", action="store_true", dest="no_artifacts")

    for name, hlp in (("train", "train both segmentation stages"),
                      ("segment", "segment a stack with saved models"),
                      ("run", "full pipeline: segment, threshold, particles, phenotype, report")):
        p = common(sub.add_parser(name, help=hlp))
        p.add_argument("--stack")
        p.add_argument("--annotations", help="annotation manifest JSON")
        p.add_argument("--models", help="saved model directory (skips training)")
        p.add_argument("--pixel-cap", type=int, dest="pixel_cap")
        p.add_argument("--hidden", type=int)
        p.add_argument("--extractor-iters", type=int, dest="extractor_iters")
        if name == "run":
            for flag, dest, typ in (("--tau", "tau", float), ("--eps-um", "eps_um", float),
                                    ("--min-pts", "min_pts", int),
                                    ("--opening-radius-um", "opening_radius_um", float),
                                    ("--overlap-fraction", "overlap_fraction", float)):
                p.add_argument(flag, dest=dest, type=typ)

    p = common(sub.add_parser("evaluate", help="per-slice DSC/JSC against annotations"))
    p.add_argument("--segmentation", help="directory holding sample.raw and lipid.raw")
    p.add_argument("--annotations")
    p.add_argument("--slices", choices=("held-out", "all"))

    p = common(sub.add_parser("phenotype", help="phenotype a segmented stack"))
    p.add_argument("--stack")
    p.add_argument("--segmentation", help="directory holding sample.raw and lipid.raw")
    for flag, dest, typ in (("--tau", "tau", float), ("--eps-um", "eps_um", float),
                            ("--min-pts", "min_pts", int),
                            ("--opening-radius-um", "opening_radius_um", float),
                            ("--overlap-fraction", "overlap_fraction", float)):
        p.add_argument(flag, dest=dest, type=typ)

    p = common(sub.add_parser("collagen", help="collagen / calcification density coupling"))
    p.add_argument("--collagen", dest="collagen_mask")
    p.add_argument("--calcification", dest="calc_mask")
    p.add_argument("--window-um", type=float, dest="window_um")
    p.add_argument("--pairing", choices=("inverse", "direct"))
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _require(cfg, "out")
        _validate_params(cfg)
        if args.command in ("train", "run") and not cfg.get("models"):
            # fail before any compute when the annotations are missing
            _require(cfg, "annotations")
            _exists(cfg["annotations"], "annotation manifest")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg["out"], args.command, cfg)
    try:
        COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        run.finish("config-error", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        run.finish("failed", exc, exc.stage)
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # anything else is charged to the command as a whole
        run.finish("failed", exc, args.command)
        print(f"stage failure: {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    run.finish()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
