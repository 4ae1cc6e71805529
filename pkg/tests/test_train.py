import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from meshfat.graph import RegressionGraph
from meshfat.nn import Parameter
from meshfat.surface import icosphere
from meshfat.train import (Adam, AdamCfg, CohortData, MetricsReport, NonFiniteLossError,
                           ShrinkageCfg, TrainConfig, adam_step, csv_text, fit_network,
                           kfold_split, r2, read_report_json, shrinkage_loss, timing_sweep,
                           train_model, write_metrics_csv, write_report_json)
from meshfat.train.metrics import CSV_COLUMNS, TIMING_COLUMNS, fold_metrics

# --- shrinkage loss -----------------------------------------------------------------------


def test_loss_zero_at_target():
    y = np.arange(8.0).reshape(4, 2)
    loss, grad = shrinkage_loss(y, y)
    assert loss == 0.0 and not grad.any()


def test_loss_at_threshold_is_half_square():
    c = 0.2
    loss, _ = shrinkage_loss(np.array([[c]]), np.array([[0.0]]), ShrinkageCfg(10.0, c))
    assert loss == pytest.approx(c * c / 2, rel=1e-12)


def test_loss_gradient_finite_differences():
    r = np.random.default_rng(0)
    pred, target = r.normal(size=(4, 2)), r.normal(size=(4, 2))
    _, grad = shrinkage_loss(pred, target)
    numeric = numeric_grad(lambda: shrinkage_loss(pred, target)[0], pred)
    assert rel_error(grad, numeric) < 1e-6


def test_loss_monotone_in_residual():
    l = np.linspace(0, 5, 2001)
    vals = [shrinkage_loss(np.array([x]), np.array([0.0]))[0] for x in l]
    assert np.all(np.diff(vals) >= 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
@settings(max_examples=100, deadline=None)
def test_loss_non_negative_and_zero_iff_equal(p, t):
    loss, _ = shrinkage_loss(np.array(p), np.array(t))
    assert loss >= 0
    assert (loss == 0) == np.array_equal(np.array(p), np.array(t)) or loss < 1e-300


def test_loss_rejects_non_finite_and_shape():
    with pytest.raises(ValueError):
        shrinkage_loss(np.array([np.nan]), np.array([0.0]))
    with pytest.raises(ValueError):
        shrinkage_loss(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        ShrinkageCfg(a=0.0)


# --- Adam ----------------------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p])
    for _ in range(5):
        opt.zero_grad()
        adam_step([p], opt)
    assert np.array_equal(p.value, [1.0, -2.0])


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=6))
@settings(max_examples=50, deadline=None)
def test_adam_first_step_is_lr_sign(g):
    g = np.array(g)
    p = Parameter(np.zeros_like(g))
    p.grad[...] = g
    opt = Adam([p], AdamCfg(lr=0.01))
    opt.step()
    assert np.allclose(p.value, -0.01 * np.sign(g), rtol=1e-5)
    assert np.all(np.abs(p.value) <= 0.01 * (1 + 1e-9))


def test_adam_scalar_quadratic():
    w = Parameter(np.array([0.0]))
    opt = Adam([w], AdamCfg(lr=0.1))
    for _ in range(200):
        opt.zero_grad()
        w.grad[...] = 2 * (w.value - 3)
        opt.step()
    assert abs(w.value[0] - 3) < 1e-2


def test_adam_config_validation():
    for kw in ({"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}):
        with pytest.raises(ValueError):
            AdamCfg(**kw)


def test_adam_step_rejects_foreign_params():
    opt = Adam([Parameter(np.zeros(1))])
    with pytest.raises(ValueError):
        adam_step([Parameter(np.zeros(1))], opt)


# --- k-fold ---------------------------------------------------------------------------------


def test_kfold_ten_by_five():
    f = kfold_split(10, 5, seed=0)
    tests = [set(x.test.tolist()) for x in f]
    assert all(len(t) == 2 for t in tests)
    assert set().union(*tests) == set(range(10)) and sum(map(len, tests)) == 10


def test_kfold_deterministic():
    a, b = kfold_split(37, 5, 4), kfold_split(37, 5, 4)
    assert all(np.array_equal(x.test, y.test) and np.array_equal(x.val, y.val) for x, y in zip(a, b))


@given(st.integers(10, 400), st.integers(3, 5), st.integers(0, 99))
@settings(max_examples=60, deadline=None)
def test_kfold_partition_properties(n, k, seed):
    if n < 2 * k:
        return
    f = kfold_split(n, k, seed)
    assert len(f) == k
    counts = np.zeros(n, dtype=int)
    for fold in f:
        parts = [fold.train, fold.val, fold.test]
        assert sum(map(len, parts)) == n
        assert len(np.unique(np.concatenate(parts))) == n
        counts[fold.test] += 1
    assert np.all(counts == 1)


def test_kfold_large_metadata_split():
    n = 25_298
    f = kfold_split(n, 5, 0)
    counts = np.bincount(np.concatenate([x.test for x in f]), minlength=n)
    assert np.all(counts == 1)


def test_kfold_groups_stay_together():
    groups = np.repeat(np.arange(15), 2)
    for fold in kfold_split(30, 5, 1, groups=groups):
        for part in (fold.train, fold.val, fold.test):
            assert set(groups[part].tolist()).isdisjoint(
                set(groups[np.setdiff1d(np.arange(30), part)].tolist()))


def test_kfold_too_small():
    with pytest.raises(ValueError):
        kfold_split(9, 5)
    with pytest.raises(ValueError):
        kfold_split(10, 2)


# --- R^2 -----------------------------------------------------------------------------------------


def test_r2_oracles():
    y = np.random.default_rng(0).normal(size=50)
    y = (y - y.mean()) / y.std()
    assert r2(y, y) == 1.0
    assert r2(np.full_like(y, y.mean()), y) == pytest.approx(0.0, abs=1e-12)
    assert r2(y + 0.3, y) == pytest.approx(1 - 0.09, abs=1e-12)


def test_r2_errors():
    with pytest.raises(ValueError):
        r2([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        r2([1.0], [1.0])


# --- toy cohort ---------------------------------------------------------------------------------

_SPHERE = icosphere(1.0, 1)


def toy_cohort(n, seed=0):
    """Scaled spheres; targets are smooth functions of the axes, so they are learnable."""
    r = np.random.default_rng(seed)
    s = r.uniform(0.7, 1.3, size=(n, 3))
    y = np.stack([1000 * s.prod(axis=1), 500 * (s[:, 0] + s[:, 1]) ** 2], axis=1)
    sex = ["FM"[i % 2] for i in range(n)]
    graphs = [RegressionGraph(_SPHERE.vertices * si, _SPHERE.edges(), yi, f"t{i:03d}", sx)
              for i, (si, yi, sx) in enumerate(zip(s, y, sex))]
    return CohortData(graphs, y, sex, [g.subject_id for g in graphs], decimation=80)


def toy_images(n, seed=0):
    r = np.random.default_rng(seed)
    w = r.integers(3, 10, size=n)
    h = r.integers(6, 15, size=n)
    img = np.zeros((n, 2, 16, 12))
    for i in range(n):
        img[i, 0, :h[i], :w[i]] = 1
        img[i, 1, :h[i], : max(1, w[i] - 2)] = 1
    y = np.stack([w * h * 10.0, (w + h) * 5.0], axis=1)
    sex = ["FM"[i % 2] for i in range(n)]
    return CohortData(img, y, sex, [f"c{i}" for i in range(n)])


def test_smoke_run_five_folds():
    data = toy_cohort(20)
    rep = train_model(data, "gnn", TrainConfig(epochs=2, batch_size=4, hidden=8),
                      kfold_split(20, 5, 0))
    assert len(rep.folds) == 5 and rep.k == 5
    assert all(np.isfinite(f.r2[t]) for f in rep.folds for t in ("VAT", "ASAT"))
    assert rep.std("VAT") >= 0 and rep.scheme


def test_cnn_smoke_run():
    data = toy_images(20)
    rep = train_model(data, "cnn", TrainConfig(epochs=2, batch_size=4, hidden=8,
                                               channels=(2, 3, 4)), kfold_split(20, 5, 0))
    assert len(rep.folds) == 5


@pytest.fixture(scope="module")
def trained_toy():
    data = toy_cohort(60, seed=1)
    cfg = TrainConfig(epochs=80, batch_size=8, hidden=16, lr=3e-3)
    return data, cfg, train_model(data, "gnn", cfg, kfold_split(60, 5, 0))


def test_beats_mean_baseline_on_every_fold(trained_toy):
    _, _, rep = trained_toy
    assert all(f.r2[t] > 0 for f in rep.folds for t in ("VAT", "ASAT"))


def test_per_sex_columns_populated(trained_toy):
    _, _, rep = trained_toy
    for f in rep.folds:
        for key in ("r2_female", "r2_male"):
            assert all(np.isfinite(f.__dict__[key][t]) for t in ("VAT", "ASAT"))


def test_single_sex_fold_marked_unavailable():
    y = np.arange(10.0).reshape(5, 2)
    res = fold_metrics(0, y + 0.1, y, ["F"] * 5, 0.1, 0.01, 0, (1, 1, 5))
    assert np.isfinite(res.r2_female["VAT"]) and np.isnan(res.r2_male["VAT"])
    rep = MetricsReport("gnn", 500, [res])
    row = rep.rows()[0]
    assert row["r2_male"] == "" and row["r2_female"] != ""


def test_training_bit_reproducible(trained_toy):
    data, cfg, rep = trained_toy
    again = train_model(data, "gnn", cfg, kfold_split(60, 5, 0), only_folds=(0, 3))
    for f in again.folds:
        ref = rep.folds[f.fold]
        assert f.r2 == ref.r2 and f.best_epoch == ref.best_epoch


def test_duplication_leaves_r2_roughly_unchanged(trained_toy):
    data, cfg, rep = trained_toy
    idx = np.repeat(np.arange(len(data)), 2)
    dup = data.take(idx)
    folds = kfold_split(len(dup), 5, 0, groups=idx)
    # same number of optimiser steps: every epoch over the copy is twice as long
    rep2 = train_model(dup, "gnn", replace(cfg, epochs=cfg.epochs // 2), folds)
    for t in ("VAT", "ASAT"):
        assert abs(rep2.mean(t) - rep.mean(t)) <= 0.05


class _Tracked(list):
    """List that records every index read."""

    def __init__(self, items, log):
        super().__init__(items)
        self.log = log

    def __getitem__(self, i):
        self.log.append(("get", int(i)) if np.ndim(i) == 0 and not isinstance(i, slice)
                        else ("get-many", i))
        return super().__getitem__(i)


def test_test_block_untouched_until_evaluation():
    base = toy_cohort(20)
    log = []
    data = CohortData(_Tracked(base.inputs, log), base.y, base.sex_tags, base.subject_ids, 80)
    folds = kfold_split(20, 5, 0)

    def monitor(event, fold, idx):
        log.append((event, fold))

    train_model(data, "gnn", TrainConfig(epochs=2, batch_size=4, hidden=8), folds, monitor=monitor)
    for i, fold in enumerate(folds):
        start = log.index(("fit", i))
        stop = log.index(("test", i))
        assert all(kind != "get-many" for kind, _ in log[start:stop])
        seen = {x for kind, x in log[start:stop] if kind == "get"}
        assert seen and seen.isdisjoint(fold.test.tolist())


def test_non_finite_loss_raises():
    from meshfat.graph import batch
    from meshfat.nn import GnnModel

    data = toy_cohort(8)
    model = GnnModel(hidden=4)
    model.head.layers[-1].bias.value[...] = 1e200  # squared residual overflows
    with pytest.raises(NonFiniteLossError):
        with np.errstate(all="ignore"):
            fit_network(model, lambda idx: batch([data.inputs[i] for i in idx]), data.y,
                        epochs=1, batch_size=4, rng=np.random.default_rng(0))


def test_fit_network_selects_best_validation_epoch():
    from meshfat.graph import batch
    from meshfat.nn import GnnModel

    data = toy_cohort(24)
    gs = data.inputs
    yz = (data.y - data.y.mean(0)) / data.y.std(0)
    model = GnnModel(hidden=8)
    val = [(batch(gs[16:]), yz[16:])]
    hist = fit_network(model, lambda idx: batch([gs[i] for i in idx]), yz[:16], epochs=6,
                       batch_size=4, rng=np.random.default_rng(0), val_batches=val)
    assert hist.best_epoch == int(np.argmin(hist.val_loss))
    assert len(hist.epoch_seconds) == 6 and hist.total_seconds > 0


def test_cosine_schedule_reaches_small_lr():
    from meshfat.graph import batch
    from meshfat.nn import GnnModel

    data = toy_cohort(12)
    with pytest.raises(ValueError):
        fit_network(GnnModel(hidden=4), lambda idx: batch([data.inputs[i] for i in idx]),
                    data.y, epochs=2, batch_size=4, rng=np.random.default_rng(0),
                    lr_schedule="step")


# --- reports ---------------------------------------------------------------------------------------


def test_report_json_roundtrip(tmp_path, trained_toy):
    _, _, rep = trained_toy
    write_report_json(tmp_path / "r.json", rep)
    back = read_report_json(tmp_path / "r.json")
    assert csv_text([back], timing=True) == csv_text([rep], timing=True)


def test_csv_columns(tmp_path, trained_toy):
    _, _, rep = trained_toy
    import csv

    write_metrics_csv(tmp_path / "m.csv", [rep])
    write_metrics_csv(tmp_path / "t.csv", [rep], timing=True)
    plain = list(csv.DictReader(open(tmp_path / "m.csv")))
    timed = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert tuple(plain[0].keys()) == CSV_COLUMNS
    assert tuple(timed[0].keys()) == CSV_COLUMNS + TIMING_COLUMNS
    # 5 folds plus mean and std rows per tissue
    assert len(plain) == 2 * 7
    assert [r["fold"] for r in plain[:7]] == ["0", "1", "2", "3", "4", "mean", "std"]


def test_timing_sweep_table_and_missing_level():
    data = toy_cohort(20)
    small = data
    big = CohortData([g.with_x(np.repeat(g.x, 1, axis=0)) for g in data.inputs], data.y,
                     data.sex_tags, data.subject_ids)
    with pytest.warns(UserWarning, match="no data"):
        out = timing_sweep({100: small, 200: big}, TrainConfig(epochs=2, batch_size=4, hidden=8),
                           kfold_split(20, 5, 0), decimations=(100, 200, 500))
    assert out.levels == [100, 200] and len(out.rows()) == 2
    assert np.isfinite(out.slope) and all(e > 0 for e in out.energy_wh)
