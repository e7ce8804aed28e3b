"""Training loops: the meta-update, its plain-SGD degenerate case, baselines.

The key oracle: with one inner step and a full meta step, the meta loop
must be *bitwise* identical to ordinary SGD over uniformly sampled task
minibatches, by replaying the same rng stream by hand.
"""

import numpy as np
import pytest

from metacate import (
    ConfigError,
    DataError,
    NuisanceConfig,
    OraclePredictor,
    TrainConfig,
    ZeroPredictor,
    attach_pseudo_outcomes,
    default_fusion_spec,
    erm_config,
    predict_cate,
    predict_cate_many,
    train_caml,
    train_meta_outcome_baseline,
    true_cate_many,
)
from metacate import nn
from metacate.errors import ShapeMismatchError
from metacate.trainer import BaselineModel, adapt, loop_rng


@pytest.fixture()
def pseudo_md(tiny_md):
    md, gt = tiny_md
    attach_pseudo_outcomes(md, NuisanceConfig(kind="knn", knn_k=5, seed=1), "treated_only", None)
    return md, gt


def test_loop_rng_reproducible():
    a = loop_rng(42).integers(0, 1000, size=8)
    b = loop_rng(42).integers(0, 1000, size=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, loop_rng(43).integers(0, 1000, size=8))


def test_config_validation():
    for bad in (
        dict(iterations=-1),
        dict(adapt_steps=0),
        dict(batch_size=0),
        dict(inner_lr=0.0),
        dict(meta_lr=-0.5),
        dict(adapt_scope="everything"),
        dict(l1_coeff=-1.0),
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_erm_is_bitwise_plain_sgd(pseudo_md):
    """adapt_steps=1 with meta_lr=1 collapses to SGD, bit for bit."""
    md, _ = pseudo_md
    spec = default_fusion_spec(3, 4, hidden_dim=8, n_residual_blocks=1)
    cfg = TrainConfig(iterations=40, adapt_steps=1, batch_size=16,
                      inner_lr=0.07, meta_lr=1.0, seed=99)
    params, record = train_caml(md, spec, cfg)
    assert record.model_kind == "caml_erm"

    # replay: same init, same rng stream, plain sgd
    tasks = md.tasks_in("train")
    manual = nn.init_params(spec, cfg.seed)
    rng = loop_rng(cfg.seed)
    for _ in range(cfg.iterations):
        j = int(rng.integers(0, len(tasks)))
        td = tasks[j]
        X = td.treated_x()
        t = td.treated_tau_pseudo()
        idx = rng.integers(0, X.shape[0], size=cfg.batch_size)
        Wb = np.ascontiguousarray(np.broadcast_to(td.w, (cfg.batch_size, td.w.size)))
        _, grad = nn.loss_and_grad(manual, (Wb, X[idx], t[idx]))
        manual = nn.sgd_step(manual, grad, cfg.inner_lr)
    assert np.array_equal(params.flat, manual.flat)


def test_multi_step_reptile_differs_from_erm(pseudo_md):
    md, _ = pseudo_md
    spec = default_fusion_spec(3, 4, hidden_dim=8, n_residual_blocks=1)
    base = dict(iterations=30, batch_size=16, inner_lr=0.05, meta_lr=0.5, seed=7)
    p_meta, r_meta = train_caml(md, spec, TrainConfig(adapt_steps=5, **base))
    p_erm, r_erm = train_caml(md, spec, erm_config(TrainConfig(adapt_steps=5, **base)))
    assert r_meta.model_kind == "caml" and r_erm.model_kind == "caml_erm"
    assert not np.array_equal(p_meta.flat, p_erm.flat)


def test_adapt_does_not_mutate_and_sinks_losses(pseudo_md):
    md, _ = pseudo_md
    td = md.tasks_in("train")[0]
    spec = default_fusion_spec(3, 4, hidden_dim=8, n_residual_blocks=1)
    params = nn.init_params(spec, 0)
    before = params.flat.copy()
    sink = []
    cfg = TrainConfig(iterations=1, adapt_steps=6, batch_size=8, inner_lr=0.05,
                      meta_lr=0.5, seed=3)
    out = adapt(params, td, cfg, loss_sink=sink)
    assert np.array_equal(params.flat, before)
    assert len(sink) == 6
    assert not np.array_equal(out.flat, before)


def test_adapt_reduces_loss_on_task(pseudo_md):
    md, _ = pseudo_md
    td = md.tasks_in("train")[0]
    spec = default_fusion_spec(3, 4, hidden_dim=16, n_residual_blocks=1)
    params = nn.init_params(spec, 0)
    cfg = TrainConfig(iterations=1, adapt_steps=60, batch_size=16, inner_lr=0.05,
                      meta_lr=0.5, seed=3)
    sink = []
    adapt(params, td, cfg, loss_sink=sink)
    assert np.mean(sink[-10:]) < np.mean(sink[:10])


def test_adapt_all_units_needs_control_pseudo(pseudo_md):
    md, _ = pseudo_md  # treated_only mode: control_pseudo absent
    td = md.tasks_in("train")[0]
    spec = default_fusion_spec(3, 4)
    params = nn.init_params(spec, 0)
    cfg = TrainConfig(adapt_scope="all_units")
    with pytest.raises(DataError):
        adapt(params, td, cfg)


def test_adapt_outcome_null_requires_vector(pseudo_md):
    md, _ = pseudo_md
    td = md.tasks_in("train")[0]
    params = nn.init_params(default_fusion_spec(3, 4), 0)
    with pytest.raises(DataError):
        adapt(params, td, TrainConfig(), inputs="outcome_null")
    with pytest.raises(ConfigError):
        adapt(params, td, TrainConfig(), inputs="telepathy")


def test_train_caml_requires_pseudo(tiny_md):
    md, _ = tiny_md
    with pytest.raises(ConfigError):
        train_caml(md, default_fusion_spec(3, 4), TrainConfig(iterations=1))


def test_run_record_contents(pseudo_md):
    md, _ = pseudo_md
    spec = default_fusion_spec(3, 4, hidden_dim=6)
    cfg = TrainConfig(iterations=5, adapt_steps=2, batch_size=8, inner_lr=0.05,
                      meta_lr=0.5, seed=1)
    _, rec = train_caml(md, spec, cfg)
    d = rec.to_dict()
    assert d["model_kind"] == "caml"
    assert len(d["losses"]) == 5 and len(d["task_ids"]) == 5
    assert d["n_params"] == spec.n_params
    assert d["backend"] in ("numpy", "cython")
    train_ids = {t.task_id for t in md.tasks_in("train")}
    assert set(d["task_ids"]) <= train_ids
    assert d["wall_time_s"] >= 0.0


def test_s_learner_baseline(pseudo_md):
    md, gt = pseudo_md
    spec = default_fusion_spec(3, 4, hidden_dim=8)
    cfg = TrainConfig(iterations=40, adapt_steps=3, batch_size=16, inner_lr=0.05,
                      meta_lr=0.5, seed=2)
    model, rec = train_meta_outcome_baseline(md, spec, cfg, flavor="s_learner")
    assert isinstance(model, BaselineModel)
    assert model.flavor == "s_learner" and model.mu is not None
    np.testing.assert_array_equal(model.null_w, np.zeros(3))
    assert rec.model_kind == "s_meta"
    X = np.random.default_rng(0).standard_normal((5, 4))
    tau = predict_cate_many(model, md.tasks[0].w, X)
    assert tau.shape == (5,) and np.isfinite(tau).all()


def test_t_learner_baseline_and_null_kinds(pseudo_md):
    md, _ = pseudo_md
    spec = default_fusion_spec(3, 4, hidden_dim=8)
    cfg = TrainConfig(iterations=30, adapt_steps=3, batch_size=16, inner_lr=0.05,
                      meta_lr=0.5, seed=2)
    model, rec = train_meta_outcome_baseline(md, spec, cfg, flavor="t_learner",
                                             null_kind="train_mean")
    assert model.mu1 is not None and model.mu0 is not None
    assert rec.model_kind == "t_meta"
    # train_mean null vector is the average train intervention, not zero
    train_ws = np.stack([t.w for t in md.tasks_in("train")])
    np.testing.assert_allclose(model.null_w, train_ws.mean(axis=0))
    with pytest.raises(ConfigError):
        train_meta_outcome_baseline(md, spec, cfg, flavor="x_learner")
    with pytest.raises(ConfigError):
        train_meta_outcome_baseline(md, spec, cfg, null_kind="ones")


def test_reference_predictors(tiny_md):
    md, gt = tiny_md
    X = np.random.default_rng(3).standard_normal((7, 4))
    w = md.tasks[0].w
    np.testing.assert_array_equal(predict_cate_many(ZeroPredictor(), w, X), np.zeros(7))
    np.testing.assert_allclose(
        predict_cate_many(OraclePredictor(gt), w, X), true_cate_many(gt, w, X)
    )
    assert predict_cate(ZeroPredictor(), w, X[0]) == 0.0


def test_predict_dim_checks(pseudo_md):
    md, _ = pseudo_md
    spec = default_fusion_spec(3, 4, hidden_dim=6)
    params = nn.init_params(spec, 0)
    X = np.ones((2, 4))
    with pytest.raises(ShapeMismatchError):
        predict_cate_many(params, np.ones(5), X)
    with pytest.raises(ShapeMismatchError):
        predict_cate_many(params, np.ones(3), np.ones((2, 9)))
    with pytest.raises(ConfigError):
        predict_cate_many("mystery", np.ones(3), X)


def test_erm_config_only_touches_adapt_steps():
    cfg = TrainConfig(iterations=123, adapt_steps=10, batch_size=9, inner_lr=0.02,
                      meta_lr=0.7, seed=5, l1_coeff=0.1)
    e = erm_config(cfg)
    assert e.adapt_steps == 1
    assert (e.iterations, e.batch_size, e.inner_lr, e.meta_lr, e.seed, e.l1_coeff) == (
        123, 9, 0.02, 0.7, 5, 0.1,
    )


def test_l1_coeff_changes_training(pseudo_md):
    md, _ = pseudo_md
    spec = default_fusion_spec(3, 4, hidden_dim=8)
    base = dict(iterations=20, adapt_steps=2, batch_size=16, inner_lr=0.05,
                meta_lr=0.5, seed=6)
    p0, _ = train_caml(md, spec, TrainConfig(l1_coeff=0.0, **base))
    p1, _ = train_caml(md, spec, TrainConfig(l1_coeff=0.05, **base))
    assert not np.array_equal(p0.flat, p1.flat)
    # the penalty shrinks encoder weights on average
    enc = p0.encoder_size
    assert np.abs(p1.flat[:enc]).mean() < np.abs(p0.flat[:enc]).mean()
