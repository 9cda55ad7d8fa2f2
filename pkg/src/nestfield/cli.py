"""Command-line interface: synth, train, query, eval and bench.

Every option can also be set in a TOML file passed with ``--config``. Keys at the
top level apply to any subcommand that has the option; a ``[train]`` (etc.)
table applies to that subcommand only. Command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, metrics
from .evaluate import R_AT, aggregate, bench_modes
from .field import FieldConfig, NestedField, load_checkpoint, save_checkpoint
from .hierarchy import (
    DimensionMap,
    TrainConfig,
    extract_raw_scales,
    load_embeddings,
    load_segments,
    quantize_segments,
    save_embeddings,
    save_segments,
    train,
)
from .query import (
    MODES,
    CanonicalSet,
    RelevancyMap,
    build_composite_cache,
    composite_map,
    load_relevancy,
    oracle_scale_query,
    per_scale_relevancy,
    relevancy,
    render_theta,
    save_relevancy,
)
from .raster import composite_weights
from .scene import SyntheticSceneSpec, load_annotations, load_scene, save_annotations, save_scene
from .synth import ViewSpec, build_dataset, load_cameras, load_cases, save_cameras, save_cases

log = logging.getLogger("nestfield")

SCENE_FILE = "scene.nfsc"
ANNOTATIONS_FILE = "annotations.jsonl"
CAMERAS_FILE = "cameras.json"
SEGMENTS_FILE = "segments.jsonl"
SEGMENT_EMB_FILE = "segments.nfeb"
CASES_FILE = "cases.jsonl"
CANON_FILE = "canonical.nfeb"
DATA_MANIFEST = "manifest.json"
CHECKPOINT_FILE = "checkpoint.nfck"
LOSS_FILE = "losses.csv"
TRAIN_MANIFEST = "train.json"
QUERY_MANIFEST = "query.json"


class CliError(Exception):
    """A user-facing failure reported as one line with a nonzero exit."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


# option name -> (default, type, help); None default means "required"
_OPTIONS: dict[str, dict[str, tuple]] = {
    "synth": {
        "out": (None, str, "output directory"),
        "groups": (2, int, "groups in the scene"),
        "objects_per_group": (2, int, "objects per group"),
        "parts_per_object": (2, int, "parts per object"),
        "gaussians_per_part": (48, int, "Gaussians per part"),
        "scale_ratio": (2.5, float, "size ratio between hierarchy levels"),
        "seed": (0, int, "scene seed"),
        "dim": (32, int, "teacher embedding dimension D"),
        "train_views": (8, int, "training views"),
        "test_views": (2, int, "held-out views"),
        "width": (160, int, "image width"),
        "height": (160, int, "image height"),
    },
    "train": {
        "data": (None, str, "directory written by synth"),
        "out": (None, str, "output directory"),
        "iterations": (5000, int, "optimizer steps"),
        "batch_size": (512, int, "pixels per step"),
        "step_size": (1, int, "dimension step size k"),
        "lam": (0.001, float, "cosine term weight"),
        "lr_mlp": (0.00125, float, "MLP and W learning rate"),
        "lr_plane_factor": (0.0016, float, "plane learning rate per unit scene extent"),
        "resolution": (64, int, "triplane resolution"),
        "channels": (16, int, "triplane channels"),
        "hidden": (64, int, "MLP hidden width"),
        "seed": (0, int, "initialization and sampling seed"),
    },
    "query": {
        "data": (None, str, "directory written by synth"),
        "checkpoint": (None, str, "trained checkpoint"),
        "out": (None, str, "output directory for relevancy maps"),
        "mode": ("composite", str, "composite, explicit or oracle"),
        "step_size": (1, int, "dimension step size k for scale selection"),
        "cases": ("", str, "evaluation cases (defaults to the data directory's)"),
        "threshold": (metrics.DEFAULT_THRESHOLD, float, "binarization threshold used by the oracle"),
    },
    "eval": {
        "relevancy": (None, str, "directory written by query"),
        "data": (None, str, "directory written by synth"),
        "out": (None, str, "metrics JSON path"),
        "cases": ("", str, "evaluation cases (defaults to the data directory's)"),
        "threshold": (metrics.DEFAULT_THRESHOLD, float, "binarization threshold"),
    },
    "bench": {
        "data": (None, str, "directory written by synth"),
        "checkpoint": (None, str, "trained checkpoint"),
        "out": (None, str, "timing JSON path"),
        "modes": ("composite,explicit", str, "comma-separated modes"),
        "step_size": (1, int, "dimension step size k"),
        "repeats": (5, int, "timed repetitions (at least 5)"),
        "cases": ("", str, "evaluation cases (defaults to the data directory's)"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nestfield", description="Nested feature-field distillation on synthetic scenes.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", default=argparse.SUPPRESS, help="TOML file with option values")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in _OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=argparse.SUPPRESS, help="TOML file with option values")
        for key, (default, typ, helptext) in opts.items():
            suffix = "required" if default is None else f"default {default}"
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=argparse.SUPPRESS, help=f"{helptext} ({suffix})")
    return parser


def _load_config(path: str, command: str) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"cannot parse config {path}: {exc}")
    known = _OPTIONS[command]
    out = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in _OPTIONS:
                raise CliError(f"unknown config section [{key}]")
            if key != command:
                continue
            for k, v in value.items():
                k = k.replace("-", "_")
                if k not in known:
                    raise CliError(f"unknown option {k!r} in config section [{key}]")
                out[k] = v
        else:
            k = key.replace("-", "_")
            if not any(k in opts for opts in _OPTIONS.values()):
                raise CliError(f"unknown config option {key!r}")
            if k in known:
                out.setdefault(k, value)
    return out


def resolve_options(args: argparse.Namespace) -> dict:
    """Built-in defaults, overridden by the config file, overridden by flags."""
    command = args.command
    given = vars(args)
    config = _load_config(given["config"], command) if "config" in given else {}
    out = {}
    for key, (default, typ, _) in _OPTIONS[command].items():
        if key in given:
            out[key] = given[key]
        elif key in config:
            try:
                out[key] = typ(config[key])
            except (TypeError, ValueError):
                raise CliError(f"config option {key!r} must be {typ.__name__}")
        elif default is None:
            raise CliError(f"missing required option --{key.replace('_', '-')}")
        else:
            out[key] = default
    return out


def _need(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"missing file: {path}")
    return path


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- data directory ---------------------------------------------------------------


def _load_data(data: Path, cases_path: str = ""):
    manifest = json.loads(_need(data / DATA_MANIFEST).read_text())
    scene = load_scene(_need(data / SCENE_FILE))
    cameras, train_ids, test_ids = load_cameras(_need(data / CAMERAS_FILE))
    canon_vecs = load_embeddings(_need(data / CANON_FILE))
    canon = CanonicalSet(canon_vecs / np.linalg.norm(canon_vecs, axis=1, keepdims=True), tuple(manifest["canonical_labels"]))
    cases = load_cases(_need(Path(cases_path) if cases_path else data / CASES_FILE), cameras)
    return manifest, scene, cameras, train_ids, test_ids, canon, cases


def _check_step(k: int, dim: int) -> None:
    if k < 1:
        raise CliError(f"step size must be >= 1, got {k}")
    if k > dim:
        raise CliError(f"step size {k} exceeds the embedding dimension {dim}")


# --- subcommands -------------------------------------------------------------------


def cmd_synth(o: dict) -> None:
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        spec = SyntheticSceneSpec(
            o["groups"], o["objects_per_group"], o["parts_per_object"], o["gaussians_per_part"], o["scale_ratio"], o["seed"]
        )
        views = ViewSpec(n_train=o["train_views"], n_test=o["test_views"], width=o["width"], height=o["height"])
    except ValueError as exc:
        raise CliError(str(exc))
    if o["dim"] < 1:
        raise CliError("dim must be positive")
    ds = build_dataset(spec, o["dim"], views)
    save_scene(ds.scene, out / SCENE_FILE)
    save_annotations(ds.annotations, out / ANNOTATIONS_FILE)
    save_cameras(ds.cameras, ds.train_views, ds.test_views, out / CAMERAS_FILE)
    if not ds.segments:
        raise CliError("no segment is visible in any training view")
    save_segments(ds.segments, out / SEGMENTS_FILE, out / SEGMENT_EMB_FILE)
    save_cases(ds.cases, out / CASES_FILE)
    save_embeddings(ds.canon.vectors, out / CANON_FILE)
    _dump_json(
        {
            "scene": f"synthetic-g{spec.group_count}o{spec.objects_per_group}p{spec.parts_per_object}-s{spec.seed}",
            "spec": {k: o[k] for k in _OPTIONS["synth"] if k != "out"},
            "dim": o["dim"],
            "canonical_labels": list(ds.canon.labels),
            "n_gaussians": len(ds.scene),
            "n_segments": len(ds.segments),
            "n_cases": len(ds.cases),
        },
        out / DATA_MANIFEST,
    )
    print(f"synth: {len(ds.scene)} Gaussians, {len(ds.segments)} segments, {len(ds.cases)} cases -> {out}")


def cmd_train(o: dict) -> None:
    data, out = Path(o["data"]), Path(o["out"])
    manifest = json.loads(_need(data / DATA_MANIFEST).read_text())
    dim = int(manifest["dim"])
    _check_step(o["step_size"], dim)
    scene = load_scene(_need(data / SCENE_FILE))
    cameras, train_ids, _ = load_cameras(_need(data / CAMERAS_FILE))
    segments = load_segments(_need(data / SEGMENTS_FILE), _need(data / SEGMENT_EMB_FILE))
    try:
        cfg = TrainConfig(
            iterations=o["iterations"], batch_size=o["batch_size"], lam=o["lam"], lr_plane_factor=o["lr_plane_factor"],
            lr_mlp=o["lr_mlp"], step_size=o["step_size"], seed=o["seed"],
        )
        fcfg = FieldConfig(resolution=o["resolution"], channels=o["channels"], hidden=o["hidden"], dim=dim)
    except ValueError as exc:
        raise CliError(str(exc))
    out.mkdir(parents=True, exist_ok=True)
    views = [composite_weights(scene, cameras[v]) for v in train_ids]
    lo, hi = scene.extent
    field = NestedField.create(fcfg, lo - 0.5, hi + 0.5, seed=o["seed"])
    t0 = time.perf_counter()
    if cfg.iterations > 0:
        segments = extract_raw_scales(scene, views, segments)
        segments, _ = quantize_segments(segments, dim)
    result = train(scene, views, segments, field, cfg)
    elapsed = time.perf_counter() - t0
    save_checkpoint(result.field, out / CHECKPOINT_FILE)
    with open(out / LOSS_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(result.losses):
            w.writerow([i, f"{loss:.8g}"])
    _dump_json(
        {"iterations": cfg.iterations, "step_size": cfg.step_size, "dim": dim, "batch_size": cfg.batch_size, "seconds": elapsed},
        out / TRAIN_MANIFEST,
    )
    final = float(result.losses[-1]) if cfg.iterations else float("nan")
    print(f"train: {cfg.iterations} iterations in {elapsed:.1f}s, final loss {final:.5f} -> {out}")


def cmd_query(o: dict) -> None:
    if o["mode"] not in MODES:
        raise CliError(f"unknown mode {o['mode']!r}; choose from {', '.join(MODES)}")
    data, out = Path(o["data"]), Path(o["out"])
    manifest, scene, cameras, _, _, canon, cases = _load_data(data, o["cases"])
    field = load_checkpoint(_need(Path(o["checkpoint"])))
    if field.dim != int(manifest["dim"]):
        raise CliError(f"checkpoint dimension {field.dim} != data dimension {manifest['dim']}")
    _check_step(o["step_size"], field.dim)
    dmap = DimensionMap(field.dim, o["step_size"])
    out.mkdir(parents=True, exist_ok=True)
    cache = build_composite_cache(scene, field, canon)
    by_view: dict[int, list] = {}
    for c in cases:
        by_view.setdefault(c.view_id, []).append(c)
    written = []
    render_time = query_time = 0.0
    for view, vcases in sorted(by_view.items()):
        t0 = time.perf_counter()
        wmap = composite_weights(scene, cameras[view])
        comp = composite_map(cache, field, wmap)
        theta = render_theta(cache, wmap) if o["mode"] != "composite" else None
        render_time += time.perf_counter() - t0
        for case in vcases:
            t0 = time.perf_counter()
            if o["mode"] == "composite":
                rel = relevancy(comp, case.embedding, canon, case.query_id, "composite")
            else:
                maps = per_scale_relevancy(theta, field.w, case.embedding, canon, dmap, case.query_id)
                if o["mode"] == "explicit":
                    best = max(maps, key=lambda d: (maps[d].values.max(), -d))
                    m = maps[best]
                    rel = RelevancyMap(m.width, m.height, m.values, case.query_id, "explicit", best, len(maps))
                else:
                    comp_rel = relevancy(comp, case.embedding, canon, case.query_id, "composite")
                    rel, _ = oracle_scale_query(
                        maps, lambda m: metrics.miou(m, case.mask, o["threshold"]), comp_rel, case.query_id
                    )
            query_time += time.perf_counter() - t0
            save_relevancy(rel, out / f"{case.query_id}.pgm")
            written.append(case.query_id)
    _dump_json(
        {
            "scene": manifest["scene"],
            "mode": o["mode"],
            "D": field.dim,
            "k": o["step_size"],
            "queries": written,
            "timing": {
                "render_time": render_time,
                "per_query_time": query_time / max(len(written), 1),
                "total": render_time + query_time,
            },
        },
        out / QUERY_MANIFEST,
    )
    print(f"query: {len(written)} {o['mode']} relevancy maps -> {out}")


def cmd_eval(o: dict) -> None:
    rdir, data = Path(o["relevancy"]), Path(o["data"])
    qman = json.loads(_need(rdir / QUERY_MANIFEST).read_text())
    cameras, _, _ = load_cameras(_need(data / CAMERAS_FILE))
    cases = load_cases(_need(Path(o["cases"]) if o["cases"] else data / CASES_FILE), cameras)
    by_view: dict[int, list] = {}
    for c in cases:
        by_view.setdefault(c.view_id, []).append(c)
    per_query, rows = [], []
    for view, vcases in sorted(by_view.items()):
        pool = [c.mask for c in vcases]
        for gi, case in enumerate(vcases):
            rel = load_relevancy(_need(rdir / f"{case.query_id}.pgm"))
            if rel.values.shape != case.mask.shape:
                raise CliError(f"relevancy map {case.query_id} has shape {rel.values.shape}, mask {case.mask.shape}")
            hit = metrics.localization_hit(rel, case.box)
            iou = metrics.miou(rel, case.mask, o["threshold"])
            rank = metrics.retrieval_rank(rel, pool, gi)
            per_query.append({"query_id": case.query_id, "loc_hit": hit, "iou": iou, "rank": rank})
            rows.append((hit, iou, rank))
    agg = {
        "loc_acc": float(np.mean([r[0] for r in rows])) if rows else 0.0,
        "miou": float(np.mean([r[1] for r in rows])) if rows else 0.0,
        "r_at": {str(k): metrics.recall_at_k([r[2] for r in rows], k) for k in R_AT},
    }
    report = {
        "scene": qman["scene"],
        "mode": qman["mode"],
        "D": qman["D"],
        "k": qman["k"],
        "per_query": per_query,
        "aggregate": agg,
        "timing": qman["timing"],
    }
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out)
    print(f"eval: {len(rows)} queries, loc_acc {agg['loc_acc']:.3f}, miou {agg['miou']:.3f} -> {out}")


def cmd_bench(o: dict) -> None:
    data = Path(o["data"])
    manifest, scene, cameras, _, _, canon, cases = _load_data(data, o["cases"])
    field = load_checkpoint(_need(Path(o["checkpoint"])))
    _check_step(o["step_size"], field.dim)
    modes = [m.strip() for m in o["modes"].split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise CliError(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
    if not cases:
        raise CliError("no evaluation cases to time")
    cache = build_composite_cache(scene, field, canon)
    weights = {v: composite_weights(scene, cameras[v]) for v in sorted({c.view_id for c in cases})}
    report = bench_modes(
        field, cache, canon, weights, cases, DimensionMap(field.dim, o["step_size"]), modes, repeats=o["repeats"], scene=scene
    )
    report.update({"scene": manifest["scene"], "D": field.dim, "k": o["step_size"]})
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out)
    summary = ", ".join(f"{m} {report[m]['per_query_time'] * 1e3:.2f} ms/query" for m in modes)
    print(f"bench: {summary} -> {out}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "query": cmd_query, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        opts = resolve_options(args)
        COMMANDS[args.command](opts)
    except CliError as exc:
        print(f"nestfield {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"nestfield {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
