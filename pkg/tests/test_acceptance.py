"""Acceptance suite: one test per criterion, tolerances pinned below.

The end-to-end tests drive the installed command line through ``cli.main``
and take roughly half an hour on one desktop core.  Run only this file with
``pytest -m acceptance``.
"""
import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import body_volume
from gradcheck import check_module, numeric_grad, rel_error
from meshfat import cli
from meshfat.graph import RegressionGraph, batch, mean_operator, read_manifest
from meshfat.nn import (MLP, BatchNorm1d, CnnModel, Conv2d, GnnModel, Linear, ReLU, SageLayer,
                        global_max_pool, global_max_pool_backward, sage_forward)
from meshfat.register import RigidTransform, apply_transform, icp
from meshfat.surface import decimate, marching_cubes, mesh_volume, validate
from meshfat.train import kfold_split, shrinkage_loss
from meshfat.volume import VoxelVolume, segment_body

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# criterion 1
SPHERE_RADIUS_MM = 20.0
SPHERE_VOLUME_MM3 = 33510.3
SPHERE_REL_TOL = 0.02
SPHERE_MAX_SECONDS = 5.0
# criterion 2
CHAIN_BODIES = 30
CHAIN_SPACING_MM = (6.0, 6.0, 6.0)
CHAIN_LEVELS = (10000, 5000, 1000, 500, 200, 100)
CHAIN_MAX_DRIFT = 0.10
# criterion 3
ICP_RUNS = 50
ICP_MAX_DEG = 30.0
ICP_MAX_SHIFT = 0.10  # fraction of the bounding-box diagonal
ICP_MAX_ITERS = 50
ICP_RMSD_FRAC = 1e-6
# criterion 4
ORACLE_GRAPHS = 1000
ORACLE_MAX_NODES = 50
ORACLE_TOL = 1e-10
# criterion 5
GRAD_TOL = 1e-4
LOSS_GRAD_TOL = 1e-6
# criterion 6
GNN_MIN_R2 = 0.90
CNN_MIN_R2 = 0.80
BENCH_MAX_MINUTES = 30.0
# criterion 7
SWEEP_MIN_FIT_R2 = 0.9

PIPELINE = ["synth", "extract", "decimate", "register", "train", "eval"]
SMALL = {
    "version": 1, "seed": 11,
    "cohort": {"size": 20, "spacing_mm": [12, 12, 12]},
    "surface": {"decimations": [100, 500]},
    "train": {"decimation": 500, "epochs": 3, "cnn_epochs": 2, "batch_size": 4, "hidden": 8,
              "channels": [4, 4, 4]},
    "sweep": {"cohort_size": 20, "decimations": [100, 500], "epochs": 1},
}


def _config(tmp: Path, name: str) -> Path:
    """Copy a shipped config into ``tmp`` with its work directory inside ``tmp``."""
    raw = json.loads((CONFIGS / f"{name}.json").read_text())
    raw["paths"] = {"workdir": "run"}
    p = tmp / f"{name}.json"
    p.write_text(json.dumps(raw))
    return p


def _run(cfg: Path, stages) -> dict:
    return {s: cli.main(["--config", str(cfg), s]) for s in stages}


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    cfg = _config(root, "benchmark")
    t0 = time.perf_counter()
    codes = _run(cfg, PIPELINE)
    minutes = (time.perf_counter() - t0) / 60.0
    return root / "run", codes, minutes


def _metric_rows(run_dir: Path):
    return list(csv.DictReader(open(run_dir / "eval" / "metrics.csv")))


def _rigid(rng, diag):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = Rotation.from_rotvec(axis * math.radians(rng.uniform(0.0, ICP_MAX_DEG))).as_matrix()
    shift = rng.normal(size=3)
    shift *= rng.uniform(0.0, ICP_MAX_SHIFT) * diag / np.linalg.norm(shift)
    return RigidTransform(rot, shift)


def _random_graph(rng, n):
    pairs = np.array([(a, c) for a in range(n) for c in range(a + 1, n)],
                     dtype=np.int64).reshape(-1, 2)
    e = pairs[rng.random(len(pairs)) < rng.random()]
    return RegressionGraph(rng.normal(size=(n, 3)), e, rng.random(2) + 1, "g", "F")


def _dense_oracle(x, edges, w, b):
    a = np.eye(len(x))
    if len(edges):
        a[edges[:, 0], edges[:, 1]] = a[edges[:, 1], edges[:, 0]] = 1.0
    return (a / a.sum(axis=1, keepdims=True)) @ x @ w.T + b


def test_criterion_1_sphere_geometry():
    g = np.indices((46, 46, 46)) - 22.5
    occ = (g ** 2).sum(axis=0) <= SPHERE_RADIUS_MM ** 2
    t0 = time.perf_counter()
    m = marching_cubes(VoxelVolume(occ, (1.0, 1.0, 1.0)))
    seconds = time.perf_counter() - t0
    s = validate(m)
    assert s.watertight and s.genus == 0
    assert mesh_volume(m) == pytest.approx(SPHERE_VOLUME_MM3, rel=SPHERE_REL_TOL)
    assert seconds < SPHERE_MAX_SECONDS


def test_criterion_2_decimation_chain():
    failures = []
    for seed in range(CHAIN_BODIES):
        vol, _ = body_volume(seed, CHAIN_SPACING_MM)
        seg = segment_body(vol)
        m = marching_cubes(seg.pad(1), origin=tuple(-np.asarray(seg.spacing)))
        v0 = mesh_volume(m)
        for level in CHAIN_LEVELS:
            m = decimate(m, level)
            s = validate(m)
            if not (s.watertight and s.f_count <= level and s.v_count == s.f_count / 2 + 2):
                failures.append((seed, level, s))
        drift = abs(mesh_volume(m) / v0 - 1.0)
        if drift > CHAIN_MAX_DRIFT:
            failures.append((seed, "drift", drift))
    assert not failures, failures


def test_criterion_3_icp_recovery(body):
    m = decimate(body[2], 1000)
    diag = m.bbox_diagonal()
    rng = np.random.default_rng(2024)
    failures = []
    for run in range(ICP_RUNS):
        moved = apply_transform(m, _rigid(rng, diag))
        rep = icp(moved, m, max_iters=ICP_MAX_ITERS)
        resid = rep.transform.apply(moved.vertices) - m.vertices
        rmsd = float(np.sqrt((resid ** 2).sum(axis=1).mean()))
        monotone = bool(np.all(np.diff(rep.history) <= 0))
        if not (rmsd < ICP_RMSD_FRAC * diag and rep.iterations <= ICP_MAX_ITERS and monotone):
            failures.append((run, rmsd / diag, rep.iterations, monotone))
    assert not failures, failures


def test_criterion_4_aggregation_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(ORACLE_GRAPHS):
        g = _random_graph(rng, int(rng.integers(1, ORACLE_MAX_NODES + 1)))
        layer = SageLayer(3, 4, rng)
        layer.bias.value[...] = rng.normal(size=4)
        got = sage_forward(layer, g.x, g.edges)
        want = _dense_oracle(g.x, g.edges, layer.w.value, layer.bias.value)
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst <= ORACLE_TOL

    model = GnnModel(hidden=16, seed=5)
    for bn in model.norms:
        bn.running_mean[...] = rng.normal(size=bn.running_mean.shape)
        bn.running_var[...] = rng.random(bn.running_var.shape) + 0.5
    for training in (True, False):
        model.train(training)
        for _ in range(20):
            g = _random_graph(rng, int(rng.integers(2, ORACLE_MAX_NODES + 1)))
            perm = rng.permutation(len(g.x))
            inv = np.argsort(perm)
            gp = RegressionGraph(g.x[perm], inv[g.edges], g.y, g.subject_id, g.sex_tag)
            out = model.forward(batch([g]))
            out_p = model.forward(batch([gp]))
            assert np.max(np.abs(out - out_p)) <= ORACLE_TOL


def test_criterion_5_gradients():
    rng = np.random.default_rng(5)
    errs = {}
    lin = Linear(4, 3, rng)
    errs["linear"] = check_module(lin.forward, lin.backward, lin.parameters(),
                                  rng.normal(size=(5, 4)), rng.normal(size=(5, 3)))
    mlp = MLP([4, 6, 3, 2], rng)
    errs["mlp"] = check_module(mlp.forward, mlp.backward, mlp.parameters(),
                               rng.normal(size=(5, 4)), rng.normal(size=(5, 2)))
    relu = ReLU()
    x = rng.normal(size=(6, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep the probe away from the kink
    errs["relu"] = check_module(relu.forward, relu.backward, [], x, rng.normal(size=(6, 4)))
    for training in (True, False):
        bn = BatchNorm1d(3)
        bn.gamma.value[...] = rng.normal(size=3)
        bn.beta.value[...] = rng.normal(size=3)
        bn.running_mean[...] = rng.normal(size=3)
        bn.running_var[...] = rng.random(3) + 0.5
        bn.train(training)
        errs[f"batchnorm train={training}"] = check_module(
            bn.forward, bn.backward, bn.parameters(), rng.normal(size=(7, 3)) * 2 + 1,
            rng.normal(size=(7, 3)))
    g = _random_graph(rng, 10)
    op = mean_operator(g.edges, 10)
    for act in ("identity", "relu"):
        layer = SageLayer(3, 4, rng, activation=act)
        layer.bias.value[...] = rng.normal(size=4)
        errs[f"sage {act}"] = check_module(lambda x: layer.forward(x, op), layer.backward,
                                           layer.parameters(), g.x.copy(),
                                           rng.normal(size=(10, 4)))
    conv = Conv2d(2, 3, rng, kernel=3, stride=2, padding=1)
    conv.bias.value[...] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 7, 6))
    errs["conv"] = check_module(conv.forward, conv.backward, conv.parameters(), x,
                                rng.normal(size=conv.forward(x).shape))
    x = rng.normal(size=(9, 3))
    gid = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
    w = rng.normal(size=(3, 3))
    _, arg = global_max_pool(x, gid)
    errs["max pool"] = rel_error(global_max_pool_backward(w, arg, 9),
                                 numeric_grad(lambda: float((global_max_pool(x, gid)[0] * w).sum()), x))

    b = batch([_random_graph(rng, 6)])
    gnn = GnnModel(hidden=8, seed=3)
    for p in gnn.parameters():
        p.value[...] += rng.normal(scale=0.1, size=p.value.shape)
    errs["gnn"] = check_module(lambda x: gnn.forward(b.with_x(x)), gnn.backward,
                               gnn.parameters(), b.x.copy(), rng.normal(size=(1, 2)))
    cnn = CnnModel(in_shape=(2, 9, 7), channels=(3, 4, 2), hidden=6, seed=1)
    for p in cnn.parameters():
        p.value[...] += rng.normal(scale=0.1, size=p.value.shape)
    errs["cnn"] = check_module(cnn.forward, cnn.backward, cnn.parameters(),
                               rng.normal(size=(2, 2, 9, 7)), rng.normal(size=(2, 2)))
    assert max(errs.values()) < GRAD_TOL, sorted(errs.items(), key=lambda kv: -kv[1])

    pred, target = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    _, grad = shrinkage_loss(pred, target)
    assert rel_error(grad, numeric_grad(lambda: shrinkage_loss(pred, target)[0], pred)) < LOSS_GRAD_TOL


def test_criterion_6_benchmark(benchmark):
    run_dir, codes, minutes = benchmark
    assert all(c == cli.EXIT_OK for c in codes.values()), codes
    means = {(r["model"], r["tissue"]): float(r["r2"]) for r in _metric_rows(run_dir)
             if r["fold"] == "mean"}
    assert means[("gnn", "VAT")] >= GNN_MIN_R2 and means[("gnn", "ASAT")] >= GNN_MIN_R2, means
    assert means[("cnn", "VAT")] >= CNN_MIN_R2 and means[("cnn", "ASAT")] >= CNN_MIN_R2, means
    assert minutes < BENCH_MAX_MINUTES, minutes


def test_criterion_7_scaling_law(tmp_path):
    cfg = _config(tmp_path, "scaling")
    codes = _run(cfg, ["synth", "extract", "decimate", "register", "sweep"])
    assert all(c == cli.EXIT_OK for c in codes.values()), codes
    rows = list(csv.DictReader(open(tmp_path / "run" / "sweep" / "sweep.csv")))
    fit = json.loads((tmp_path / "run" / "sweep" / "fit.json").read_text())
    assert len(rows) == 6
    seconds = [float(r["epoch_seconds"]) for r in rows]
    assert np.all(np.diff(seconds) > 0), seconds
    assert fit["fit_r2"] >= SWEEP_MIN_FIT_R2, fit


def test_criterion_8_reproducible_metrics(tmp_path):
    texts = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        p = d / "cfg.json"
        p.write_text(json.dumps({**SMALL, "paths": {"workdir": "run"}}))
        codes = _run(p, PIPELINE)
        assert all(c == cli.EXIT_OK for c in codes.values()), codes
        texts.append((d / "run" / "eval" / "metrics.csv").read_bytes())
    assert texts[0] == texts[1]


def test_criterion_9_per_sex_columns(benchmark):
    run_dir, codes, _ = benchmark
    assert codes["eval"] == cli.EXIT_OK
    cfg = json.loads((run_dir / "eval" / "stage.json").read_text())["config"]
    entries = read_manifest(run_dir / "register" / str(cfg["train"]["decimation"]) / "manifest.json")
    labels = [e.labels() for e in entries]
    sex = np.array([l.sex_tag for l in labels])
    y = {"VAT": np.array([l.vat_mm3 for l in labels]), "ASAT": np.array([l.asat_mm3 for l in labels])}
    folds = kfold_split(len(labels), cfg["train"]["folds"], cfg["seed"])
    rows = _metric_rows(run_dir)
    assert {"r2_female", "r2_male"} <= set(rows[0])
    checked = 0
    for r in rows:
        if not r["fold"].isdigit():
            continue
        test = folds.folds[int(r["fold"])].test
        for tag, col in (("F", "r2_female"), ("M", "r2_male")):
            members = test[sex[test] == tag]
            if len(members) >= 2 and np.var(y[r["tissue"]][members]) > 0:
                assert r[col] != "" and math.isfinite(float(r[col])), r
                checked += 1
    assert checked > 0
