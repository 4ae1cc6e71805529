"""Command-line pipeline: synth, extract, decimate, register, train, eval, sweep, stats.

Every stage writes into ``<workdir>/<stage>/`` and leaves a ``stage.json``
holding the resolved config, a hash of the inputs it consumed and a hash of
the files it produced.  A stage refuses to read an upstream directory whose
files no longer match the recorded hash unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import DEFAULTS, dump_config, load_config, resolve
from .estimators import (IcpRegistrar, MeshDecimator, SageRegressor, SilhouetteCnnRegressor,
                         SurfaceExtractor)
from .graph import ManifestEntry, mesh_to_graph, read_manifest, write_manifest
from .register import select_reference, write_transform
from .schema import SchemaError
from .surface.mesh import read_obj, write_obj
from .train.cv import CohortData, TrainConfig, timing_sweep, train_model
from .train.loop import NonFiniteLossError
from .train.metrics import (MetricsReport, TISSUES, fold_metrics, write_metrics_csv,
                            write_report_json)
from .train.split import kfold_split
from .volume import (SubjectLabels, cohort_dims, generate_synthetic_body, read_silhouette,
                     read_volume, sample_body_spec, silhouette, stack_silhouettes,
                     write_silhouette, write_volume)

log = logging.getLogger("meshfat")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 2, 3, 4

EPILOG = """\
exit codes:
  0  success
  2  configuration error (invalid JSON or schema violation; the field is named)
  3  missing or modified prerequisite stage output (the command to run is named)
  4  numeric failure (non-finite training loss)
"""


class PrerequisiteError(RuntimeError):
    """An upstream stage is missing or its outputs changed since it ran."""


# ---------------------------------------------------------------------------
# Stage bookkeeping
# ---------------------------------------------------------------------------

def hash_tree(root: Path) -> str:
    """SHA-256 over relative paths and contents of every file except stage.json."""
    h = hashlib.sha256()
    for p in sorted(x for x in root.rglob("*") if x.is_file() and x.name != "stage.json"):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _stage_dir(cfg: dict, stage: str) -> Path:
    return Path(cfg["paths"]["workdir"]) / stage


def _require(cfg: dict, stage: str, force: bool) -> str:
    """Hash of ``stage``'s outputs after checking them against its stage.json."""
    d = _stage_dir(cfg, stage)
    meta = d / "stage.json"
    if not meta.exists():
        raise PrerequisiteError(f"missing output of stage '{stage}' in {d}; "
                                f"run `meshfat {stage}` first")
    recorded = json.loads(meta.read_text())["outputs_hash"]
    actual = hash_tree(d)
    if actual != recorded:
        if not force:
            raise PrerequisiteError(f"files in {d} changed since `meshfat {stage}` ran; "
                                    f"re-run it or pass --force")
        log.warning("using modified outputs of stage '%s' (--force)", stage)
    return actual


def _begin(cfg: dict, stage: str) -> Path:
    d = _stage_dir(cfg, stage)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


def _finish(cfg: dict, stage: str, inputs_hash: str | None):
    d = _stage_dir(cfg, stage)
    meta = {"command": stage, "config": cfg, "inputs_hash": inputs_hash,
            "outputs_hash": hash_tree(d)}
    (d / "stage.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    log.info("%s: wrote %s", stage, d)


def _map(fn, items, jobs: int):
    """Order-preserving map, in worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _read_labels(cfg: dict) -> list[SubjectLabels]:
    data = json.loads((_stage_dir(cfg, "synth") / "labels.json").read_text())
    return [SubjectLabels(**d) for d in data]


def _spacing(cfg) -> tuple:
    return tuple(float(s) for s in cfg["cohort"]["spacing_mm"])


# ---------------------------------------------------------------------------
# Per-subject workers (top level so they can run in worker processes)
# ---------------------------------------------------------------------------

def _synth_one(args):
    seed, dims, spacing, out = args
    spec = sample_body_spec(seed, dims=dims, spacing=spacing)
    vol, labels = generate_synthetic_body(spec, dims, spacing)
    sid = labels.subject_id
    write_volume(Path(out) / "volumes" / sid, vol)
    for axis in ("coronal", "sagittal"):
        write_silhouette(Path(out) / "silhouettes" / f"{sid}_{axis}", silhouette(vol, axis))
    return labels.to_dict()


def _extract_one(args):
    vol_path, out_path, isolevel, close_radius = args
    m = SurfaceExtractor(isolevel=isolevel, close_radius=close_radius).transform([read_volume(vol_path)])[0]
    write_obj(out_path, m)
    return m.n_faces


def _decimate_one(args):
    src, outs, levels, preserve = args
    m = read_obj(src)
    faces = {}
    for level in sorted(levels, reverse=True):
        m = MeshDecimator(level, preserve).transform([m])[0]
        write_obj(outs[level], m)
        faces[level] = m.n_faces
    return faces


def _register_one(args):
    src, ref_path, out_mesh, out_t, max_iters, tol = args
    reg = IcpRegistrar(max_iters, tol).fit([read_obj(ref_path)])
    m = reg.transform([read_obj(src)])[0]
    write_obj(out_mesh, m)
    write_transform(out_t, reg.reports_[0].transform)
    return reg.reports_[0].rmsd


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg, jobs=1, force=False):
    out = _begin(cfg, "synth")
    spacing = _spacing(cfg)
    dims = cohort_dims(spacing)
    base = cfg["seed"] * 1_000_000
    labels = _map(_synth_one, [(base + i, dims, spacing, str(out)) for i in range(cfg["cohort"]["size"])], jobs)
    (out / "labels.json").write_text(json.dumps(labels, indent=1))
    _finish(cfg, "synth", None)


def cmd_extract(cfg, jobs=1, force=False):
    h = _require(cfg, "synth", force)
    labels = _read_labels(cfg)
    src = _stage_dir(cfg, "synth") / "volumes"
    out = _begin(cfg, "extract")
    s = cfg["surface"]
    paths = [out / "meshes" / f"{l.subject_id}.obj" for l in labels]
    (out / "meshes").mkdir()
    _map(_extract_one, [(src / l.subject_id, p, s["isolevel"], s["close_radius"])
                        for l, p in zip(labels, paths)], jobs)
    write_manifest(out / "manifest.json", [ManifestEntry.from_labels(l, p.relative_to(out))
                                           for l, p in zip(labels, paths)])
    _finish(cfg, "extract", h)


def cmd_decimate(cfg, jobs=1, force=False):
    h = _require(cfg, "extract", force)
    src_dir = _stage_dir(cfg, "extract")
    entries = read_manifest(src_dir / "manifest.json")
    out = _begin(cfg, "decimate")
    levels = cfg["surface"]["decimations"]
    for level in levels:
        (out / str(level) / "meshes").mkdir(parents=True)
    outs = [{lv: out / str(lv) / "meshes" / f"{e.subject_id}.obj" for lv in levels} for e in entries]
    _map(_decimate_one, [(src_dir / e.mesh_path, o, levels, cfg["surface"]["preserve_volume"])
                         for e, o in zip(entries, outs)], jobs)
    for level in levels:
        write_manifest(out / str(level) / "manifest.json",
                       [ManifestEntry.from_labels(e.labels(), o[level].relative_to(out / str(level)), level)
                        for e, o in zip(entries, outs)])
    _finish(cfg, "decimate", h)


def cmd_register(cfg, jobs=1, force=False):
    h = _require(cfg, "decimate", force)
    src = _stage_dir(cfg, "decimate")
    out = _begin(cfg, "register")
    r = cfg["register"]
    ref_id = None
    for level in cfg["surface"]["decimations"]:
        entries = read_manifest(src / str(level) / "manifest.json")
        ref_id = select_reference([e.labels() for e in entries])
        ref = next(e for e in entries if e.subject_id == ref_id)
        lv = out / str(level)
        (lv / "meshes").mkdir(parents=True)
        (lv / "transforms").mkdir()
        jobs_args = [(src / str(level) / e.mesh_path, src / str(level) / ref.mesh_path,
                      lv / "meshes" / f"{e.subject_id}.obj",
                      lv / "transforms" / f"{e.subject_id}.json", r["max_iters"], r["tol_mm"])
                     for e in entries]
        _map(_register_one, jobs_args, jobs)
        write_manifest(lv / "manifest.json",
                       [ManifestEntry.from_labels(e.labels(), f"meshes/{e.subject_id}.obj", level)
                        for e in entries])
    (out / "reference.json").write_text(json.dumps({"subject_id": ref_id}))
    _finish(cfg, "register", h)


def _train_cfg(cfg, kind: str, epochs: int | None = None) -> TrainConfig:
    t = cfg["train"]
    ep = epochs or (t["epochs"] if kind == "gnn" else t["cnn_epochs"])
    return TrainConfig(epochs=ep, batch_size=t["batch_size"], lr=t["lr"], hidden=t["hidden"],
                       shrink_a=t["shrink_a"], shrink_c=t["shrink_c"], bn_momentum=t["bn_momentum"],
                       channels=tuple(t["channels"]), lr_schedule=t["lr_schedule"], seed=cfg["seed"])


def _load_cohort(cfg, kind: str, level: int, limit: int | None = None) -> CohortData:
    d = _stage_dir(cfg, "register") / str(level)
    entries = read_manifest(d / "manifest.json")[:limit]
    labels = [e.labels() for e in entries]
    y = np.array([[l.vat_mm3, l.asat_mm3] for l in labels])
    if kind == "gnn":
        inputs = [mesh_to_graph(read_obj(d / e.mesh_path), l) for e, l in zip(entries, labels)]
    else:
        sil = _stage_dir(cfg, "synth") / "silhouettes"
        inputs = np.stack([stack_silhouettes(read_silhouette(sil / f"{l.subject_id}_coronal"),
                                             read_silhouette(sil / f"{l.subject_id}_sagittal"))
                           for l in labels])
    return CohortData(inputs, y, [l.sex_tag for l in labels], [l.subject_id for l in labels], level)


def _folds(cfg, n):
    return kfold_split(n, cfg["train"]["folds"], cfg["seed"])


def cmd_train(cfg, jobs=1, force=False):
    h = _require(cfg, "register", force)
    _require(cfg, "synth", force)
    level = cfg["train"]["decimation"]
    cohorts = {kind: _load_cohort(cfg, kind, level) for kind in cfg["train"]["models"]}
    out = _begin(cfg, "train")
    for kind, data in cohorts.items():
        models: list = []
        rep = train_model(data, kind, _train_cfg(cfg, kind), _folds(cfg, len(data)), keep_models=models)
        for i, est in enumerate(models):
            est.save(out / kind / f"fold{i}")
        write_report_json(out / kind / "report.json", rep)
    _finish(cfg, "train", h)


def _evaluate(cfg, kind: str, data: CohortData) -> MetricsReport:
    folds = _folds(cfg, len(data))
    cls = SageRegressor if kind == "gnn" else SilhouetteCnnRegressor
    rep = MetricsReport(model=kind, decimation=data.decimation if kind == "gnn" else None,
                        k=folds.k, scheme=folds.scheme, seed=folds.seed)
    for i, fold in enumerate(folds):
        est = cls.load(_stage_dir(cfg, "train") / kind / f"fold{i}")
        test = data.take(fold.test)
        hist = est.history_
        rep.folds.append(fold_metrics(i, est.predict(test.inputs), test.y, test.sex_tags,
                                      hist.mean_epoch_seconds, hist.total_seconds / 60.0,
                                      hist.best_epoch, (len(fold.train), len(fold.val), len(fold.test))))
    return rep


def cmd_eval(cfg, jobs=1, force=False):
    h = _require(cfg, "train", force)
    _require(cfg, "register", force)
    level = cfg["train"]["decimation"]
    reports = [_evaluate(cfg, kind, _load_cohort(cfg, kind, level)) for kind in cfg["train"]["models"]]
    out = _begin(cfg, "eval")
    for rep in reports:
        write_report_json(out / f"{rep.model}.json", rep)
    write_metrics_csv(out / "metrics.csv", reports)
    write_metrics_csv(out / "report.csv", reports, timing=True)
    for rep in reports:
        for t in TISSUES:
            log.info("%s %s R2 %.3f +- %.3f", rep.model, t, rep.mean(t), rep.std(t))
    _finish(cfg, "eval", h)


def cmd_sweep(cfg, jobs=1, force=False):
    h = _require(cfg, "register", force)
    s = cfg["sweep"]
    datasets, faces = {}, {}
    for level in s["decimations"]:
        datasets[level] = _load_cohort(cfg, "gnn", level, s["cohort_size"])
        faces[level] = float(np.mean([len(g.edges) * 2 / 3 for g in datasets[level].inputs]))
    n = len(next(iter(datasets.values())))
    res = timing_sweep(datasets, _train_cfg(cfg, "gnn", s["epochs"]), _folds(cfg, n),
                       decimations=s["decimations"], faces=faces,
                       wattage=cfg["device_wattage"], only_folds=tuple(s["folds_timed"]))
    out = _begin(cfg, "sweep")
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(res.rows()[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(res.rows())
    (out / "fit.json").write_text(json.dumps(
        {"slope_seconds_per_face": res.slope, "intercept_seconds": res.intercept,
         "fit_r2": res.fit_r2, "strictly_increasing": res.strictly_increasing()}, indent=1))
    log.info("sweep: %.3g s/face, fit R2 %.3f", res.slope, res.fit_r2)
    _finish(cfg, "sweep", h)


def cohort_stats(labels, bins: int) -> tuple[str, str]:
    """Histogram and summary CSV text of VAT/ASAT per sex tag (shared bin edges per tissue)."""
    hist, summ = io.StringIO(), io.StringIO()
    hw = csv.writer(hist, lineterminator="\n")
    sw = csv.writer(summ, lineterminator="\n")
    hw.writerow(["tissue", "sex_tag", "bin_lo_mm3", "bin_hi_mm3", "count"])
    sw.writerow(["tissue", "sex_tag", "n", "mean_mm3", "std_mm3"])
    sex = np.array([l.sex_tag for l in labels])
    for t, key in zip(TISSUES, ("vat_mm3", "asat_mm3")):
        v = np.array([getattr(l, key) for l in labels])
        edges = np.histogram_bin_edges(v, bins=bins)
        for tag in ("F", "M"):
            sel = v[sex == tag]
            counts, _ = np.histogram(sel, bins=edges)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                hw.writerow([t, tag, f"{lo:.3f}", f"{hi:.3f}", int(c)])
            sw.writerow([t, tag, len(sel), f"{sel.mean():.3f}" if len(sel) else "",
                         f"{sel.std():.3f}" if len(sel) else ""])
    return hist.getvalue(), summ.getvalue()


def cmd_stats(cfg, jobs=1, force=False):
    h = _require(cfg, "synth", force)
    hist, summ = cohort_stats(_read_labels(cfg), cfg["stats"]["bins"])
    out = _begin(cfg, "stats")
    (out / "histograms.csv").write_text(hist)
    (out / "summary.csv").write_text(summ)
    _finish(cfg, "stats", h)


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "decimate": cmd_decimate,
            "register": cmd_register, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "stats": cmd_stats}

HELP = {
    "synth": "generate synthetic voxel bodies, silhouettes and labels",
    "extract": "extract full-resolution surface meshes",
    "decimate": "decimate every mesh to each configured face budget",
    "register": "rigidly register each level onto its most average subject",
    "train": "cross-validated training of the configured models",
    "eval": "evaluate saved fold models; writes metrics.csv and report.csv",
    "sweep": "per-epoch training time and R2 across decimation levels",
    "stats": "per-sex histograms of the cohort labels",
}


def _global_options(p: argparse.ArgumentParser, suppress: bool):
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p.add_argument("--config", type=Path, default=d(None),
                   help="pipeline config (JSON); defaults are used if omitted")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--jobs", type=int, default=d(1), help="worker processes for per-subject stages")
    p.add_argument("--force", action="store_true", default=d(False),
                   help="accept modified upstream outputs")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    """Global options are accepted before or after the command name."""
    p = argparse.ArgumentParser(prog="meshfat", description=__doc__.splitlines()[0],
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    _global_options(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, help=HELP[name], description=HELP[name], epilog=EPILOG,
                       parents=[common], formatter_class=argparse.RawDescriptionHelpFormatter)
    sub.add_parser("print-config", help="print the resolved config", parents=[common])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else resolve({"version": DEFAULTS["version"]})
        if args.seed is not None:
            if args.seed < 0:
                raise SchemaError("--seed", "$.seed", "must be non-negative")
            cfg["seed"] = args.seed
        if args.jobs < 1:
            raise SchemaError("--jobs", "$", "must be at least 1")
    except SchemaError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "print-config":
        print(dump_config(cfg))
        return EXIT_OK
    # training and sweeps are timed, so they always run in this process
    jobs = 1 if args.command in ("train", "sweep") else args.jobs
    try:
        COMMANDS[args.command](cfg, jobs=jobs, force=args.force)
    except PrerequisiteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
