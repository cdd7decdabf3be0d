"""``recipnet`` command line: gen, extract, augment, train, sweep, eval, report.

One JSON config file drives every subcommand; ``--set dotted.key=value``
overrides single entries. Outputs go under ``--out`` (default: the
``RECIPNET_OUT`` environment variable, else ``./recipnet-out``).
"""
import argparse
import copy
import difflib
import glob
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import evaluate
from .experiment import (ConfigError, Dataset, ExperimentConfig, SweepData, cell_dir, derive_seed,
                         predict, prepare_cell, read_manifest, run_sweep, sweep_cells, train_model)
from .nn import load_checkpoint, save_checkpoint
from .profile import ProfileConfig, extract_profiles, load_profile, save_profile
from .raster_io import read_ascii_grid, read_link_csv, save_ascii_grid, write_link_csv
from .synthetic import ScenarioParams, SceneParams, generate_dataset, make_scene
from .transforms import AugmentationPlan, reflect, select_indices

log = logging.getLogger("recipnet")

OUT_ENV = "RECIPNET_OUT"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
BACKHAUL = "backhaul"


def _scene_defaults():
    d = SceneParams().to_dict()
    d.pop("seed")
    return d


DEFAULTS = {
    "seed": 0,
    "regions": ["A", "B", "C", "D", "E", "F"],
    "scene": _scene_defaults(),
    "region_overrides": {},
    "links": {**ScenarioParams.downlink().to_dict(), "oracle_samples": 256, "margin": None},
    "backhaul": {"enabled": True, "links": 300, "scene": {}},
    "profile": ProfileConfig().to_dict(),
    "augment": {"n_per_region": 80, "selection_scope": "uniform-random"},
    "experiment": {k: v for k, v in ExperimentConfig().to_dict().items()
                   if k not in ("regions", "seed", "profile")},
}

KEY_DOCS = {
    "seed": "base seed; every other seed is derived from it per purpose",
    "regions": "region names, one synthetic scene each",
    "scene": "scene generator parameters shared by all regions (extent, cell_size, "
             "roughness_amplitude, correlation_length, base_elevation, building_*, tree_*, x/y_origin)",
    "region_overrides": "{region: {scene key: value}} per-region scene changes",
    "links": "link sampling: scenario, antenna heights, bands, links_per_region, min/max_length, "
             "noise_sigma, endpoint_clearance, tx_open_radius, rx_clutter_radius, rx_clutter_min, "
             "oracle_samples, margin (m, null = 40 cells)",
    "backhaul": "separate BS-to-BS test scene: enabled, links, scene (overrides)",
    "profile": "path profile: length_samples, transverse_samples, transverse_halfwidth, h_max, "
               "d_max, f_min, f_max",
    "augment": "augment subcommand: n_per_region, selection_scope",
    "experiment": "holdouts, val_fraction, n_values, repeats, selection_scope, "
                  "training{epochs,batch_size,learning_rate,patience}, model{input_shape,conv_blocks,"
                  "dense,output_range}",
}

READS = {
    "gen": ("seed", "regions", "scene", "region_overrides", "links", "backhaul"),
    "extract": ("profile",),
    "augment": ("seed", "augment"),
    "train": ("seed", "regions", "profile", "experiment"),
    "sweep": ("seed", "regions", "profile", "experiment"),
    "eval": ("profile",),
    "report": (),
}


# --------------------------------------------------------------------------
# config handling


def _suggest(key, options):
    close = difflib.get_close_matches(key, list(options), n=1)
    return f" (did you mean {close[0]!r}?)" if close else ""


def _check_keys(cfg, schema, prefix=""):
    for k, v in cfg.items():
        path = f"{prefix}{k}"
        if k not in schema:
            raise ConfigError(f"unknown config key {path!r}{_suggest(k, schema)}")
        if isinstance(schema[k], dict) and schema[k] and isinstance(v, dict):
            _check_keys(v, schema[k], path + ".")


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and out[k]:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node, schema = cfg, DEFAULTS
    for depth, part in enumerate(parts):
        if isinstance(schema, dict) and schema and part not in schema:
            raise ConfigError(f"unknown config key {'.'.join(parts[:depth + 1])!r}{_suggest(part, schema)}")
        last = depth == len(parts) - 1
        if last:
            node[part] = _parse_value(raw)
        else:
            node = node.setdefault(part, {})
            schema = schema.get(part, {}) if isinstance(schema, dict) else {}
    return cfg


def load_config(path=None, overrides=()):
    user = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
    _check_keys(user, DEFAULTS)
    cfg = _merge(DEFAULTS, user)
    for ov in overrides:
        apply_override(cfg, ov)
    for region, ov in cfg["region_overrides"].items():
        _check_keys(ov, DEFAULTS["scene"], f"region_overrides.{region}.")
    _check_keys(cfg["backhaul"]["scene"], DEFAULTS["scene"], "backhaul.scene.")
    return cfg


def profile_config(cfg):
    return ProfileConfig.from_dict(cfg["profile"])


def experiment_config(cfg):
    ex = dict(cfg["experiment"])
    ex["regions"] = list(cfg["regions"])
    ex["seed"] = cfg["seed"]
    ex["profile"] = cfg["profile"]
    return ExperimentConfig.from_dict(ex)


def scenario_params(cfg):
    d = {k: v for k, v in cfg["links"].items() if k not in ("oracle_samples", "margin")}
    return ScenarioParams.from_dict(d)


# --------------------------------------------------------------------------
# file layout


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _gen_manifest(out):
    path = os.path.join(out, "data", "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found; run `recipnet gen` first")
    return _read_json(path)


def _profile_dir(out, name):
    return os.path.join(out, "profiles", name)


def load_region_profiles(out, name):
    files = sorted(glob.glob(os.path.join(_profile_dir(out, name), "*.rppl")))
    if not files:
        raise FileNotFoundError(f"no profiles for {name!r} under {_profile_dir(out, name)}; run `recipnet extract`")
    return [load_profile(f) for f in files]


def load_sweep_data(out, regions):
    data = {r: load_region_profiles(out, r) for r in regions}
    bh = load_region_profiles(out, BACKHAUL) if os.path.isdir(_profile_dir(out, BACKHAUL)) else []
    return SweepData(data, bh)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg, args):
    out = args.out
    scen = scenario_params(cfg)
    samples, margin = cfg["links"]["oracle_samples"], cfg["links"]["margin"]
    link_seed = derive_seed(cfg["seed"], "links")
    entries = []
    jobs = [(r, _merge(cfg["scene"], cfg["region_overrides"].get(r, {})), scen) for r in cfg["regions"]]
    if cfg["backhaul"]["enabled"]:
        bh_scen = ScenarioParams.backhaul(links_per_region=int(cfg["backhaul"]["links"]),
                                          min_length=scen.min_length, max_length=scen.max_length,
                                          noise_sigma=scen.noise_sigma,
                                          endpoint_clearance=scen.endpoint_clearance)
        jobs.append((BACKHAUL, _merge(cfg["scene"], cfg["backhaul"]["scene"]), bh_scen))
    for name, scene_dict, scenario in jobs:
        seed = derive_seed(cfg["seed"], "scene", name)
        scene = make_scene(name, SceneParams.from_dict({**scene_dict, "seed": seed}))
        links = generate_dataset([scene], scenario, seed=link_seed, n_samples=samples, margin=margin)
        base = os.path.join(out, "data")
        os.makedirs(os.path.join(base, "scenes"), exist_ok=True)
        os.makedirs(os.path.join(base, "links"), exist_ok=True)
        dtm_path = os.path.join(base, "scenes", f"{name}_dtm.asc")
        dsm_path = os.path.join(base, "scenes", f"{name}_dsm.asc")
        csv_path = os.path.join(base, "links", f"{name}.csv")
        save_ascii_grid(scene.dtm, dtm_path)
        save_ascii_grid(scene.dsm, dsm_path)
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(write_link_csv(links))
        entries.append({"name": name, "scene_seed": seed, "scene": scene.params.to_dict(),
                        "scenario": scenario.to_dict(), "links": len(links),
                        "files": {k: {"path": os.path.relpath(p, out), "sha256": _sha256(p)}
                                  for k, p in (("dtm", dtm_path), ("dsm", dsm_path), ("links", csv_path))}})
        log.info("gen %s: %d links", name, len(links))
    _write_json(os.path.join(out, "data", "manifest.json"),
                {"base_seed": cfg["seed"], "link_seed": link_seed, "oracle_samples": samples,
                 "regions": entries})
    return EXIT_OK


def _extract_one(name, dsm, dtm, links, cfg_p, out):
    dest = _profile_dir(out, name)
    os.makedirs(dest, exist_ok=True)
    for old in glob.glob(os.path.join(dest, "*.rppl")):
        os.remove(old)
    profiles, failures = extract_profiles(dsm, dtm, links, cfg_p, strict=False)
    bad = {i for i, _ in failures}
    written = 0
    for idx, prof in zip([k for k in range(len(links)) if k not in bad], profiles):
        save_profile(prof, os.path.join(dest, f"{idx:06d}.rppl"))
        written += 1
    report = [{"index": i, "reason": reason} for i, reason in failures]
    _write_json(os.path.join(dest, "failures.json"), report)
    for f in report:
        log.warning("%s link %d: %s", name, f["index"], f["reason"])
    log.info("extract %s: %d written, %d failed", name, written, len(report))
    return written, len(report)


def cmd_extract(cfg, args):
    cfg_p = profile_config(cfg)
    out = args.out
    if args.links:
        if not (args.dsm and args.dtm):
            raise ConfigError("--links needs --dsm and --dtm")
        name = args.name or os.path.splitext(os.path.basename(args.links))[0]
        parsed = read_link_csv(args.links)
        for e in parsed.errors:
            log.warning("%s line %d: %s", args.links, e.line, e.message)
        sets = [(name, read_ascii_grid(args.dsm), read_ascii_grid(args.dtm), parsed.records, len(parsed.errors))]
    else:
        sets = []
        for entry in _gen_manifest(out)["regions"]:
            files = entry["files"]
            parsed = read_link_csv(os.path.join(out, files["links"]["path"]))
            sets.append((entry["name"], read_ascii_grid(os.path.join(out, files["dsm"]["path"])),
                         read_ascii_grid(os.path.join(out, files["dtm"]["path"])), parsed.records,
                         len(parsed.errors)))
    failed = 0
    for name, dsm, dtm, links, bad_rows in sets:
        _, nfail = _extract_one(name, dsm, dtm, links, cfg_p, out)
        failed += nfail + bad_rows
    if failed and args.strict:
        log.error("%d link(s) failed extraction", failed)
        return EXIT_FAILED
    return EXIT_OK


def cmd_augment(cfg, args):
    out = args.out
    aug = cfg["augment"]
    regions = args.regions or [e["name"] for e in _gen_manifest(out)["regions"] if e["name"] != BACKHAUL]
    plan = AugmentationPlan(int(aug["n_per_region"]), derive_seed(cfg["seed"], "augment"),
                            aug["selection_scope"])
    selection = {}
    for region in regions:
        samples = load_region_profiles(out, region)
        idx = select_indices(samples, plan, region)
        dest = os.path.join(out, "augmented", region)
        os.makedirs(dest, exist_ok=True)
        for old in glob.glob(os.path.join(dest, "*.rppl")):
            os.remove(old)
        for k in idx:
            save_profile(reflect(samples[k]), os.path.join(dest, f"{int(k):06d}_reflected.rppl"))
        selection[region] = [int(k) for k in idx]
        log.info("augment %s: %d reflected copies", region, len(idx))
    _write_json(os.path.join(out, "augmented", "selection.json"),
                {"n_per_region": plan.n_per_region, "selection_seed": plan.selection_seed,
                 "selection_scope": plan.selection_scope, "indices": selection})
    return EXIT_OK


def cmd_train(cfg, args):
    out = args.out
    ex = experiment_config(cfg)
    holdout = args.holdout or ex.holdout_list[0]
    data = load_sweep_data(out, ex.regions)
    _, train, val, seeds = prepare_cell(data.regions, ex, holdout, args.n, 0)
    params, history = train_model(train, val, ex, seeds["init"], seeds["batch"])
    dest = os.path.join(out, "train", holdout, str(args.n))
    os.makedirs(dest, exist_ok=True)
    save_checkpoint(params, os.path.join(dest, "model.rpnn"))
    _write_json(os.path.join(dest, "history.json"), {"seeds": seeds, "history": history,
                                                       "experiment": ex.to_dict()})
    log.info("train %s n=%d: best val RMSE %.3f dB", holdout, args.n, min(h["val_rmse"] for h in history))
    return EXIT_OK


def _sweep_reports(run_dir, results):
    """Pool cell predictions across holdouts and repeats into one report per (test set, n)."""
    pooled = {}
    for r in results:
        if r.status != "ok":
            continue
        cell = _read_json(os.path.join(cell_dir(run_dir, r.holdout, r.n, r.repeat), "cell.json"))
        for ts in r.rmse:
            slot = pooled.setdefault((ts, r.n), {"p": [], "m": [], "g": []})
            slot["p"] += cell[ts]["predictions"]
            slot["m"] += cell[ts]["measurements"]
            if ts == "reflected":
                slot["g"] += cell["reciprocity_gaps"]
    reports = []
    for (ts, n), slot in sorted(pooled.items()):
        reports.append(evaluate.make_report(f"{ts}_n{n}", slot["p"], slot["m"],
                                            gaps=slot["g"] or None, meta={"testset": ts, "n": n}))
    return reports


def cmd_sweep(cfg, args):
    out = args.out
    ex = experiment_config(cfg)
    data = load_sweep_data(out, ex.regions)
    run_dir = os.path.join(out, "sweep")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = run_sweep(data, ex, run_dir, resume=args.resume, executor=pool)
    else:
        results = run_sweep(data, ex, run_dir, resume=args.resume)
    return _report(run_dir, results)


def _report(run_dir, results):
    reports = _sweep_reports(run_dir, results)
    dicts = [r.to_dict() for r in results]
    meta = {"experiment": _read_json(os.path.join(run_dir, "experiment_config.json")),
            "cells": len(results), "failed": [list(r.key) for r in results if r.status != "ok"]}
    evaluate.emit_report(reports, os.path.join(run_dir, "report"), results=dicts, metadata=meta)
    failed = [r for r in results if r.status != "ok"]
    for r in failed:
        log.error("cell %s/%s/%s failed: %s", r.holdout, r.n, r.repeat, r.error)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_report(cfg, args):
    run_dir = args.run_dir or os.path.join(args.out, "sweep")
    ex = ExperimentConfig.from_dict(_read_json(os.path.join(run_dir, "experiment_config.json")))
    latest = {r.key: r for r in read_manifest(os.path.join(run_dir, "manifest.jsonl"))}
    missing = [c for c in sweep_cells(ex) if c not in latest]
    results = [latest[c] for c in sweep_cells(ex) if c in latest]
    code = _report(run_dir, results)
    if missing:
        log.error("%d cell(s) have no result yet: %s", len(missing), missing)
        return EXIT_FAILED
    return code


def cmd_eval(cfg, args):
    out = args.out
    params = load_checkpoint(args.checkpoint)
    names = args.regions or [BACKHAUL]
    reports = []
    for name in names:
        profiles = load_region_profiles(out, name)
        ident = Dataset.from_profiles(profiles)
        refl = Dataset.from_profiles([reflect(p) for p in profiles])
        p_id, p_ref = predict(params, ident.x), predict(params, refl.x)
        reports.append(evaluate.make_report(f"{name}_identity", p_id, ident.y))
        reports.append(evaluate.make_report(f"{name}_reflected", p_ref, refl.y, gaps=p_id - p_ref))
        log.info("eval %s: identity %.3f dB, reflected %.3f dB", name, reports[-2].rmse, reports[-1].rmse)
    dest = args.dest or os.path.join(out, "eval")
    evaluate.emit_report(reports, dest, metadata={"checkpoint": os.path.abspath(args.checkpoint)})
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _epilog(cmd):
    keys = READS[cmd]
    if not keys:
        return "Reads no config keys (works from an existing run directory)."
    lines = ["config keys read (set in --config or via --set key=value):"]
    lines += [f"  {k}: {KEY_DOCS[k]}" for k in keys]
    lines.append(f"default output root: ${OUT_ENV} or ./recipnet-out")
    return "\n".join(lines)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (authoritative)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted config key; VALUE is parsed as JSON when possible")
    common.add_argument("--out", default=os.environ.get(OUT_ENV, "recipnet-out"),
                        help=f"output root (default: ${OUT_ENV} or ./recipnet-out)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="recipnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_,
                              epilog=_epilog(name), formatter_class=fmt)

    add("gen", "generate synthetic scenes (DTM/DSM rasters) and labelled link CSVs")

    p = add("extract", "extract path profile tensors (.rppl) for generated or given links")
    p.add_argument("--dsm", help="DSM raster (with --links)")
    p.add_argument("--dtm", help="DTM raster (with --links)")
    p.add_argument("--links", help="link CSV; without it every generated region is extracted")
    p.add_argument("--name", help="output name for --links (default: CSV file stem)")
    p.add_argument("--strict", action="store_true", help="exit nonzero if any link fails")

    p = add("augment", "write reflected copies of n selected profiles per region")
    p.add_argument("--regions", nargs="+", help="regions to augment (default: all generated)")

    p = add("train", "train one model with one region held out")
    p.add_argument("--holdout", help="held-out region (default: first of experiment.holdouts/regions)")
    p.add_argument("--n", type=int, default=0, help="reflected samples per training region")

    p = add("sweep", "run the holdout x n x repeat sweep and write reports")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--resume", dest="resume", action="store_true", default=True,
                   help="skip cells already completed (default)")
    p.add_argument("--no-resume", dest="resume", action="store_false", help="start the sweep afresh")

    p = add("eval", "evaluate a checkpoint on identity and reflected profiles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--regions", nargs="+", help=f"profile sets to evaluate (default: {BACKHAUL})")
    p.add_argument("--dest", help="report directory (default: <out>/eval)")

    p = add("report", "rebuild summary tables and KDE curves from a sweep run directory")
    p.add_argument("--run-dir", help="sweep run directory (default: <out>/sweep)")
    return parser


COMMANDS = {"gen": cmd_gen, "extract": cmd_extract, "augment": cmd_augment, "train": cmd_train,
            "sweep": cmd_sweep, "eval": cmd_eval, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
