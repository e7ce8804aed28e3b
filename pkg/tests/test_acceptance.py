"""Acceptance gate: nine end-to-end checks with pinned tolerances.

Each check prints one ``[An] PASS/FAIL`` line (run with -s to see them on
success) and enforces its stated wall-clock budget. Budgets assume one
ordinary CPU core.

  A1  analytic gradients match central finite differences
  A2  regression-adjusted pseudo-outcomes are unbiased under oracle nuisances
  A3  meta-trained model halves the zero-predictor PEHE on unseen tasks
  A4  both the k=10 and the k=1 (plain SGD) variants beat the zero predictor
  A5  models trained on single interventions transfer to pooled pairs
  A6  RATE of random rankings is zero on average; oracle rankings order ranks
  A7  linear-family complexity estimates respect the closed-form bound
  A8  the excess-risk bound evaluator reproduces its reference value
  A9  the full pipeline is byte-deterministic across reruns
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from metacate import (
    BoundInputs,
    DGPConfig,
    LinearFamily,
    MetaDataset,
    NuisanceConfig,
    OraclePredictor,
    TaskDataset,
    TrainConfig,
    ZeroPredictor,
    attach_pseudo_outcomes,
    build_meta_dataset,
    config_from_dict,
    default_fusion_spec,
    erm_config,
    evaluate_zero_shot,
    exact_rademacher_small,
    generate_population,
    generate_task_samples,
    init_params,
    loss_and_grad,
    pool_interventions,
    rate_at_u,
    split_holdout,
    theorem1_bound,
    train_caml,
    zs_rademacher_mc,
)
from metacate.cli import run_evaluate, run_generate, run_train
from metacate.theory import unit_sphere_dists


def report(tag, ok, detail):
    print(f"[{tag}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{tag}: {detail}"


# --------------------------------------------------------------------- A1

def test_a1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    eps = 1e-6
    worst = 0.0
    for _ in range(100):
        spec = default_fusion_spec(
            w_dim=int(rng.integers(1, 5)),
            x_dim=int(rng.integers(1, 5)),
            hidden_dim=int(rng.integers(2, 7)),
            n_residual_blocks=int(rng.integers(0, 3)),
            out_dim=int(rng.integers(1, 3)),
        )
        params = init_params(spec, int(rng.integers(2**31)))
        b = int(rng.integers(1, 5))
        batch = (
            rng.standard_normal((b, spec.w_dim)),
            rng.standard_normal((b, spec.x_dim)),
            rng.standard_normal((b, spec.out_dim)),
        )
        _, grad = loss_and_grad(params, batch)
        fd = np.empty_like(grad)
        for i in range(params.flat.size):
            hi, lo = params.copy(), params.copy()
            hi.flat[i] += eps
            lo.flat[i] -= eps
            fd[i] = (loss_and_grad(hi, batch)[0] - loss_and_grad(lo, batch)[0]) / (2 * eps)
        worst = max(worst, np.linalg.norm(fd - grad) / max(np.linalg.norm(fd), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 30.0
    report("A1", ok, f"worst relative gradient error {worst:.2e} over 100 draws, {elapsed:.1f}s")


# --------------------------------------------------------------------- A2

def test_a2_pseudo_outcomes_unbiased_with_oracle_nuisance():
    t0 = time.perf_counter()
    cfg = DGPConfig(d=6, e=4, n_interventions=2, m_per_task=5000, n_controls=200,
                    noise_sd=0.7, effect_kind="linear", confounding_strength=0.5, seed=21)
    samples, gt = generate_population(cfg)
    md = build_meta_dataset(samples, gt.interventions)
    attach_pseudo_outcomes(md, NuisanceConfig(kind="oracle", seed=22), "treated_only", gt)
    diffs = np.concatenate(
        [td.treated_tau_pseudo() - td.treated_tau_true() for td in md.tasks]
    )
    assert diffs.size == 10_000
    se = diffs.std(ddof=1) / math.sqrt(diffs.size)
    elapsed = time.perf_counter() - t0
    ok = abs(diffs.mean()) <= 3 * se and elapsed < 10.0
    report("A2", ok, f"mean bias {diffs.mean():+.5f} vs 3*SE {3 * se:.5f} "
                     f"on {diffs.size} samples, {elapsed:.1f}s")


# ---------------------------------------------------------------- A3 / A4

@pytest.fixture(scope="module")
def a3_run():
    """Shared linear-benchmark pipeline: 40 train / 2 val / 8 test tasks."""
    t0 = time.perf_counter()
    dgp = DGPConfig(d=10, e=8, n_interventions=50, m_per_task=500, n_controls=4000,
                    noise_sd=0.5, effect_kind="linear", confounding_strength=1.0, seed=3)
    samples, gt = generate_population(dgp)
    md = build_meta_dataset(samples, gt.interventions)
    md = split_holdout(md, frac_val=0.04, frac_test=0.16, seed=130)
    attach_pseudo_outcomes(md, NuisanceConfig(kind="knn", knn_k=10, seed=23),
                           "treated_only", gt)
    spec = default_fusion_spec(8, 10, hidden_dim=64, n_residual_blocks=2)
    tcfg = TrainConfig(iterations=3000, adapt_steps=10, batch_size=64,
                       inner_lr=0.05, meta_lr=0.5, seed=33)
    params, _ = train_caml(md, spec, tcfg)
    eval_kw = dict(split="test", us=(0.99, 0.9), gamma_source="oracle", gt=gt, seed=5)
    return SimpleNamespace(md=md, gt=gt, spec=spec, tcfg=tcfg, params=params,
                           eval_kw=eval_kw, setup_s=time.perf_counter() - t0)


def test_a3_zero_shot_generalization(a3_run):
    t0 = time.perf_counter()
    r = a3_run
    pehe_caml = evaluate_zero_shot(r.params, r.md, **r.eval_kw).aggregates["pehe_mean"]
    pehe_zero = evaluate_zero_shot(ZeroPredictor(), r.md, **r.eval_kw).aggregates["pehe_mean"]
    pehe_oracle = evaluate_zero_shot(OraclePredictor(r.gt), r.md, **r.eval_kw).aggregates["pehe_mean"]
    elapsed = r.setup_s + time.perf_counter() - t0
    ok = (pehe_caml <= 0.5 * pehe_zero) and (pehe_oracle <= 1e-12) and elapsed < 600.0
    report("A3", ok, f"pehe {pehe_caml:.4f} vs zero {pehe_zero:.4f} "
                     f"(ratio {pehe_caml / pehe_zero:.3f}, need <= 0.5), "
                     f"oracle {pehe_oracle:.1e}, {elapsed:.1f}s")


def test_a4_ablation_parity(a3_run):
    t0 = time.perf_counter()
    r = a3_run
    erm_params, record = train_caml(r.md, r.spec, erm_config(r.tcfg))
    assert record.config["adapt_steps"] == 1
    pehe_caml = evaluate_zero_shot(r.params, r.md, **r.eval_kw).aggregates["pehe_mean"]
    pehe_erm = evaluate_zero_shot(erm_params, r.md, **r.eval_kw).aggregates["pehe_mean"]
    pehe_zero = evaluate_zero_shot(ZeroPredictor(), r.md, **r.eval_kw).aggregates["pehe_mean"]
    elapsed = time.perf_counter() - t0
    ok = (np.isfinite(pehe_caml) and np.isfinite(pehe_erm)
          and pehe_caml < pehe_zero and pehe_erm < pehe_zero)
    report("A4", ok, f"pehe k=10 {pehe_caml:.4f}, k=1 {pehe_erm:.4f}, "
                     f"zero {pehe_zero:.4f}, {elapsed:.1f}s")


# --------------------------------------------------------------------- A5

def test_a5_combination_zero_shot():
    t0 = time.perf_counter()
    dgp = DGPConfig(d=8, e=6, n_interventions=20, m_per_task=300, n_controls=2000,
                    noise_sd=0.3, effect_kind="linear", confounding_strength=0.0, seed=11)
    samples, gt = generate_population(dgp)
    md = build_meta_dataset(samples, gt.interventions)
    md = split_holdout(md, frac_val=0.1, frac_test=0.1, seed=111)
    attach_pseudo_outcomes(md, NuisanceConfig(kind="knn", knn_k=10, seed=115),
                           "treated_only", gt)
    params, _ = train_caml(
        md,
        default_fusion_spec(6, 8, hidden_dim=48, n_residual_blocks=2),
        TrainConfig(iterations=2500, adapt_steps=10, batch_size=64,
                    inner_lr=0.05, meta_lr=0.5, seed=112),
    )
    # five pooled-pair tasks the model never saw, additive effect by design
    rng = np.random.default_rng(113)
    pooled = []
    for k, (a, b) in enumerate([(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]):
        w_pool = pool_interventions([gt.interventions[a], gt.interventions[b]])
        tid = 100 + k
        samp, _ = generate_task_samples(gt, w_pool, tid, 300, rng, id_prefix="p",
                                        propensity_vec=np.zeros(8))
        pooled.append(TaskDataset(tid, w_pool, samp, md.controls))
    pooled_md = MetaDataset(pooled, md.controls,
                            {td.task_id: "test" for td in pooled}, {})
    kw = dict(split="test", us=(0.9,), gamma_source="oracle", gt=gt, seed=114)
    pehe_caml = evaluate_zero_shot(params, pooled_md, **kw).aggregates["pehe_mean"]
    pehe_zero = evaluate_zero_shot(ZeroPredictor(), pooled_md, **kw).aggregates["pehe_mean"]
    elapsed = time.perf_counter() - t0
    ok = pehe_caml < pehe_zero and elapsed < 300.0
    report("A5", ok, f"pooled-pair pehe {pehe_caml:.4f} vs zero {pehe_zero:.4f}, "
                     f"{elapsed:.1f}s")


# --------------------------------------------------------------------- A6

def test_a6_rate_sanity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(61)
    n = 2000
    gammas = 2.0 * rng.standard_normal(n) + 0.5
    scores = rng.standard_normal(n)
    reps = 1000
    vals = np.array([rate_at_u(rng.permutation(scores), gammas, 0.9) for _ in range(reps)])
    se = vals.std(ddof=1) / math.sqrt(reps)
    random_ok = abs(vals.mean()) <= 3 * se
    # perfect ranking: a smaller top group can only raise the average
    r99 = rate_at_u(gammas, gammas, 0.99)
    r90 = rate_at_u(gammas, gammas, 0.9)
    oracle_ok = r99 >= r90 >= 0.0
    elapsed = time.perf_counter() - t0
    ok = random_ok and oracle_ok and elapsed < 60.0
    report("A6", ok, f"random mean {vals.mean():+.5f} vs 3*SE {3 * se:.5f}; "
                     f"oracle rate@0.99 {r99:.3f} >= rate@0.9 {r90:.3f} >= 0, {elapsed:.1f}s")


# --------------------------------------------------------------------- A7

def test_a7_linear_family_complexity_bound():
    t0 = time.perf_counter()
    fam = LinearFamily(1.0, 1.0)
    dists = unit_sphere_dists(8, 10)
    detail = []
    ok = True
    for n, m, reps, seed in [(4, 4, 4000, 71), (16, 8, 4000, 72), (64, 16, 3000, 73)]:
        est, se = zs_rademacher_mc(fam, n, m, dists=dists, replicates=reps, seed=seed)
        bound = 2.0 / math.sqrt(n * m)
        ok = ok and est <= bound + 3 * se
        detail.append(f"({n},{m}) {est:.4f}<= {bound:.4f}+3se")
    rng = np.random.default_rng(74)
    sample_w, sample_x = unit_sphere_dists(3, 4)
    draws = (sample_w(rng, 3), sample_x(rng, 3, 4))
    exact = exact_rademacher_small(fam, 3, 4, draws)
    est, se = zs_rademacher_mc(fam, 3, 4, fixed_draws=draws, replicates=6000, seed=75)
    ok = ok and abs(est - exact) <= 3 * se
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 120.0
    report("A7", ok, "; ".join(detail) + f"; exact {exact:.4f} vs mc {est:.4f} "
                     f"(3se {3 * se:.4f}), {elapsed:.1f}s")


# --------------------------------------------------------------------- A8

def test_a8_bound_evaluator_reference_and_monotonicity():
    t0 = time.perf_counter()
    val = theorem1_bound(BoundInputs(n=100, m=10, epsilon=0.0, delta=0.1,
                                     beta_smooth=1.0, poincare_C=1.0, rademacher=0.05))
    ref = 1.5478608740189332
    base = dict(n=100, m=10, epsilon=0.1, delta=0.1, beta_smooth=1.0,
                poincare_C=1.0, rademacher=0.05)

    def bound(**kw):
        return theorem1_bound(BoundInputs(**{**base, **kw}))

    mono = (
        bound(epsilon=0.5) >= bound(epsilon=0.0)
        and bound(beta_smooth=2.0) >= bound(beta_smooth=0.5)
        and bound(poincare_C=2.0) >= bound(poincare_C=0.5)
        and bound(rademacher=0.2) >= bound(rademacher=0.01)
        and bound(n=5000) <= bound(n=50)
        and bound(m=500) <= bound(m=5)
    )
    elapsed = time.perf_counter() - t0
    ok = abs(val - ref) <= 1e-3 and mono and elapsed < 1.0
    report("A8", ok, f"bound {val:.13f} vs reference {ref:.13f} "
                     f"(|diff| {abs(val - ref):.1e} <= 1e-3), monotone {mono}, {elapsed:.2f}s")


# --------------------------------------------------------------------- A9

def _a9_config(out_dir):
    return config_from_dict({
        "seed": 3,
        "out_dir": str(out_dir),
        "dgp": {"d": 10, "e": 8, "n_interventions": 50, "m_per_task": 500,
                "n_controls": 4000, "noise_sd": 0.5, "effect_kind": "linear",
                "confounding_strength": 1.0, "seed": 3},
        "split": {"frac_val": 0.04, "frac_test": 0.16, "seed": 130},
        "pseudo": {"kind": "knn", "knn_k": 10, "seed": 23},
        "model": {"hidden_dim": 64, "n_residual_blocks": 2},
        "train": {"iterations": 3000, "adapt_steps": 10, "batch_size": 64,
                  "inner_lr": 0.05, "meta_lr": 0.5, "seed": 33},
        "eval": {"us": [0.99, 0.9], "gamma_source": "oracle", "seed": 5},
    })


def test_a9_pipeline_determinism(tmp_path):
    t0 = time.perf_counter()
    dirs, reports = [], []
    for name in ("first", "second"):
        out = tmp_path / name
        cfg = _a9_config(out)
        run_generate(cfg)
        ckpt, _ = run_train(cfg, "caml")
        rep = run_evaluate(cfg, checkpoint=ckpt, split="test", oracle_gamma=True)
        dirs.append(out)
        reports.append(rep.to_dict())
    same_data = (dirs[0] / "dataset.csv").read_bytes() == (dirs[1] / "dataset.csv").read_bytes()
    same_ckpt = ((dirs[0] / "checkpoint_caml.ckpt").read_bytes()
                 == (dirs[1] / "checkpoint_caml.ckpt").read_bytes())
    same_report = reports[0] == reports[1]
    elapsed = time.perf_counter() - t0
    ok = same_data and same_ckpt and same_report
    report("A9", ok, f"dataset bytes equal {same_data}, checkpoint bytes equal "
                     f"{same_ckpt}, report values equal {same_report}, {elapsed:.1f}s")
