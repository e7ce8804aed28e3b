"""Command-line pipeline: generate, train, evaluate, theory checks.

Every command is driven by one JSON config plus a master seed, writes its
artifacts into the config's output directory, and is deterministic:
rerunning a command reproduces data and checkpoint files byte for byte.
A manifest with a config hash ties artifacts to the config that made
them; mixing artifacts from different configs fails with exit code 4.

Exit codes: 0 ok, 2 bad configuration, 3 missing input file,
4 incompatible artifacts, 1 other failures.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import SCHEMA_VERSION, __version__, io, nn, theory
from .config import ExperimentConfig, load_config
from .errors import (
    ConfigError,
    DataError,
    IncompatibilityError,
    LeakageError,
    MissingInputError,
    NumericError,
    ShapeMismatchError,
)
from .evaluation import evaluate_zero_shot
from .pseudo import attach_pseudo_outcomes
from .synthgen import generate_population
from .tasks import MetaDataset, build_meta_dataset, split_holdout
from .trainer import (
    MODEL_KINDS,
    BaselineModel,
    OraclePredictor,
    ZeroPredictor,
    erm_config,
    train_caml,
    train_meta_outcome_baseline,
)

DATASET_FILE = "dataset.csv"
TASKS_FILE = "tasks.csv"
GROUND_TRUTH_FILE = "ground_truth.json"
MANIFEST_FILE = "manifest.json"
SPLIT_FILE = "split.json"


def _out_dir(cfg: ExperimentConfig) -> str:
    out = os.environ.get("METACATE_OUT") or cfg.out_dir
    if not out:
        raise ConfigError("no output directory: set out_dir in the config or pass --out")
    os.makedirs(out, exist_ok=True)
    return out


def run_generate(cfg: ExperimentConfig) -> dict[str, str]:
    """Write dataset, task, and ground-truth files plus the manifest."""
    out = _out_dir(cfg)
    samples, gt = generate_population(cfg.dgp)
    paths = {
        "dataset": os.path.join(out, DATASET_FILE),
        "tasks": os.path.join(out, TASKS_FILE),
        "ground_truth": os.path.join(out, GROUND_TRUTH_FILE),
        "manifest": os.path.join(out, MANIFEST_FILE),
    }
    io.write_dataset_csv(paths["dataset"], samples, cfg.dgp.d)
    io.write_tasks_csv(paths["tasks"], gt.interventions)
    io.write_ground_truth(paths["ground_truth"], gt)
    io.write_manifest(
        paths["manifest"], cfg.to_dict(), [DATASET_FILE, TASKS_FILE, GROUND_TRUTH_FILE]
    )
    return paths


def _check_manifest(cfg: ExperimentConfig, out: str) -> None:
    manifest = io.read_manifest(os.path.join(out, MANIFEST_FILE))
    want = io.config_hash(cfg.to_dict())
    have = manifest.get("config_hash")
    if have != want:
        raise IncompatibilityError(
            f"dataset in {out} was generated from a different config "
            f"(hash {have}) than the one provided (hash {want})"
        )


def load_split_dataset(cfg: ExperimentConfig) -> tuple[MetaDataset, list, object]:
    """Read the generated files and rebuild the split meta-dataset."""
    out = _out_dir(cfg)
    _check_manifest(cfg, out)
    samples = io.read_dataset_csv(os.path.join(out, DATASET_FILE))
    interventions = io.read_tasks_csv(os.path.join(out, TASKS_FILE))
    gt = io.read_ground_truth(os.path.join(out, GROUND_TRUTH_FILE))
    md = build_meta_dataset(samples, interventions)
    md = split_holdout(md, cfg.frac_val, cfg.frac_test, cfg.split_seed)
    split_path = os.path.join(out, SPLIT_FILE)
    if not os.path.exists(split_path):
        io.write_split_manifest(split_path, md.split_of)
    return md, samples, gt


def _needs_pseudo(cfg: ExperimentConfig, md: MetaDataset) -> bool:
    for td in md.tasks:
        if any(s.tau_pseudo is None for s in td.treated):
            return True
        if cfg.pseudo_mode == "all_units" and td.control_pseudo is None:
            return True
    return False


def ensure_pseudo(cfg: ExperimentConfig, md: MetaDataset, samples: list, gt) -> None:
    """Attach pseudo-outcomes if absent and persist them in the dataset CSV."""
    if not _needs_pseudo(cfg, md):
        return
    attach_pseudo_outcomes(md, cfg.nuisance, cfg.pseudo_mode, gt)
    out = _out_dir(cfg)
    io.write_dataset_csv(os.path.join(out, DATASET_FILE), samples, cfg.dgp.d)


def run_train(cfg: ExperimentConfig, model_kind: str) -> tuple[str, dict]:
    """Train one model kind; writes a checkpoint and a run record."""
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model {model_kind!r}; choose from {MODEL_KINDS}")
    out = _out_dir(cfg)
    md, samples, gt = load_split_dataset(cfg)
    ensure_pseudo(cfg, md, samples, gt)
    spec = cfg.fusion_spec()

    if model_kind in ("caml", "caml_erm"):
        tcfg = erm_config(cfg.train) if model_kind == "caml_erm" else cfg.train
        params, record = train_caml(md, spec, tcfg)
        blocks = {"params": params}
        extra = {}
    else:
        flavor = "s_learner" if model_kind == "s_meta" else "t_learner"
        model, record = train_meta_outcome_baseline(
            md, spec, cfg.train, flavor=flavor, null_kind=cfg.null_kind
        )
        if flavor == "s_learner":
            blocks = {"mu": model.mu}
        else:
            blocks = {"mu1": model.mu1, "mu0": model.mu0}
        extra = {"flavor": flavor, "null_w": [float(v) for v in model.null_w]}

    record.model_kind = model_kind
    meta = {
        "model": model_kind,
        "schema": SCHEMA_VERSION,
        "config_hash": io.config_hash(cfg.to_dict()),
        "train_tasks": sorted(t.task_id for t in md.tasks_in("train")),
        **extra,
    }
    ckpt_path = os.path.join(out, f"checkpoint_{model_kind}.ckpt")
    nn.save_checkpoint_blocks(ckpt_path, blocks, meta)
    record.checkpoint_path = ckpt_path
    io.write_json(os.path.join(out, f"runrecord_{model_kind}.json"), record.to_dict())
    return ckpt_path, record.to_dict()


def model_from_checkpoint(path: str):
    """Rebuild a predictor from a checkpoint file. Returns (model, meta)."""
    blocks, meta = nn.load_checkpoint_blocks(path)
    kind = meta.get("model")
    if kind in ("caml", "caml_erm") or set(blocks) == {"params"}:
        return blocks["params"], meta
    null_w = np.asarray(meta.get("null_w", []), dtype=np.float64)
    if set(blocks) == {"mu"}:
        return BaselineModel("s_learner", null_w, mu=blocks["mu"]), meta
    if set(blocks) == {"mu1", "mu0"}:
        return BaselineModel("t_learner", null_w, mu1=blocks["mu1"], mu0=blocks["mu0"]), meta
    raise IncompatibilityError(f"checkpoint {path} has unrecognized blocks {sorted(blocks)}")


def run_evaluate(
    cfg: ExperimentConfig,
    checkpoint: str | None = None,
    split: str = "test",
    oracle_gamma: bool = False,
    predictor: str | None = None,
):
    """Evaluate a checkpoint (or reference predictor) on a held-out split."""
    out = _out_dir(cfg)
    md, _, gt = load_split_dataset(cfg)

    trained_on = None
    if predictor == "zero":
        model, model_id = ZeroPredictor(), "zero"
    elif predictor == "oracle":
        model, model_id = OraclePredictor(gt), "oracle"
    elif checkpoint:
        model, meta = model_from_checkpoint(checkpoint)
        if meta.get("config_hash") != io.config_hash(cfg.to_dict()):
            raise IncompatibilityError(
                "checkpoint was trained under a different config than this dataset"
            )
        model_id = meta.get("model", "model")
        trained_on = set(meta.get("train_tasks", []))
        ckpt_spec = model.spec if isinstance(model, nn.MetaModelParams) else (
            model.mu or model.mu1
        ).spec
        if ckpt_spec.w_dim != cfg.dgp.e or ckpt_spec.x_dim != cfg.dgp.d:
            raise ShapeMismatchError(
                f"checkpoint expects dims (e={ckpt_spec.w_dim}, d={ckpt_spec.x_dim}); "
                f"dataset has (e={cfg.dgp.e}, d={cfg.dgp.d})"
            )
    else:
        raise ConfigError("evaluate needs --checkpoint or a reference predictor flag")

    report = evaluate_zero_shot(
        model,
        md,
        split=split,
        us=cfg.us,
        gamma_source="oracle" if oracle_gamma else cfg.gamma_source,
        gt=gt,
        nuisance=cfg.nuisance,
        tau_threshold=cfg.tau_threshold,
        seed=cfg.eval_seed,
        model_id=model_id,
        trained_on=trained_on,
    )
    stem = os.path.join(out, f"report_{model_id}_{split}")
    io.write_json(stem + ".json", report.to_dict())
    io.write_report_csv(stem + ".csv", report.to_csv_rows())
    return report


def _cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    paths = run_generate(cfg)
    for name in ("dataset", "tasks", "ground_truth", "manifest"):
        print(f"wrote {paths[name]}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    ckpt, record = run_train(cfg, args.model)
    print(f"wrote {ckpt}")
    losses = record["losses"]
    tail = f", final loss {losses[-1]:.6f}" if losses else ""
    print(f"{args.model}: {len(losses)} iterations{tail}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    predictor = "zero" if args.zero_predictor else "oracle" if args.oracle_predictor else None
    if predictor and args.checkpoint:
        raise ConfigError("pass either --checkpoint or a reference-predictor flag, not both")
    report = run_evaluate(
        cfg,
        checkpoint=args.checkpoint,
        split=args.split,
        oracle_gamma=args.oracle_gamma,
        predictor=predictor,
    )
    for key in sorted(report.aggregates):
        if key.endswith("_mean"):
            print(f"{key}: {report.aggregates[key]:.6f}")
    return 0


def _write_or_print(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1)
    if out:
        with open(out, "w") as fh:
            fh.write(text)
        print(f"wrote {out}")
    else:
        print(text)


def _cmd_theory_rademacher(args) -> int:
    if args.family != "linear":
        raise ConfigError("only the linear family is available from the command line")
    fam = theory.LinearFamily(args.b1, args.b2)
    est, se = theory.zs_rademacher_mc(
        fam,
        args.n,
        args.m,
        dists=theory.unit_sphere_dists(args.e, args.d),
        replicates=args.replicates,
        seed=args.seed if args.seed is not None else 0,
    )
    _write_or_print(
        {
            "family": "linear",
            "B1": args.b1,
            "B2": args.b2,
            "n": args.n,
            "m": args.m,
            "replicates": args.replicates,
            "estimate": est,
            "stderr": se,
            "closed_form_bound": (args.b1 + args.b2) / math.sqrt(args.n * args.m),
        },
        args.out,
    )
    return 0


def _cmd_theory_bound(args) -> int:
    b = theory.BoundInputs(
        n=args.n,
        m=args.m,
        epsilon=args.epsilon,
        delta=args.delta,
        beta_smooth=args.beta,
        poincare_C=args.poincare_c,
        rademacher=args.rademacher,
    )
    terms = theory.theorem1_terms(b)
    _write_or_print(
        {
            "inputs": {
                "n": b.n, "m": b.m, "epsilon": b.epsilon, "delta": b.delta,
                "beta_smooth": b.beta_smooth, "poincare_C": b.poincare_C,
                "rademacher": b.rademacher,
            },
            "terms": terms,
            "total": theory.theorem1_bound(b),
        },
        args.out,
    )
    return 0


def _cmd_theory_poincare(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.cov == "identity":
        cov = np.eye(args.dim)
    else:
        A = rng.standard_normal((args.dim, args.dim))
        cov = A @ A.T / args.dim
    fns: list = [theory.LinearFn(rng.standard_normal(args.dim))]
    fns += theory.make_poly_tanh_fns(args.dim, args.fns, seed=int(rng.integers(2**31)))
    checks = theory.poincare_check_gaussian(cov, fns, draws=args.draws, seed=args.seed or 0)
    _write_or_print(
        {
            "cov": args.cov,
            "dim": args.dim,
            "draws": args.draws,
            "checks": [c.to_dict() for c in checks],
            "all_hold": all(c.holds for c in checks),
        },
        args.out,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="metacate",
        description="Zero-shot treatment-effect estimation via meta-learned effect models.",
    )
    p.add_argument(
        "--version",
        action="version",
        version=f"metacate {__version__} (schema {SCHEMA_VERSION})",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--out", default=None, help="override the output directory")

    g = sub.add_parser("generate", help="synthesize the dataset files")
    common(g)
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train a model on the train split")
    common(t)
    t.add_argument("--model", required=True, choices=MODEL_KINDS)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="evaluate on a held-out split")
    common(e)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--oracle-gamma", action="store_true", help="score with true effects plus noise")
    e.add_argument("--zero-predictor", action="store_true", help="evaluate the zero-effect floor")
    e.add_argument("--oracle-predictor", action="store_true", help="evaluate the true-effect ceiling")
    e.set_defaults(func=_cmd_evaluate)

    th = sub.add_parser("theory", help="bound and complexity checks")
    thsub = th.add_subparsers(dest="subcommand", required=True)

    r = thsub.add_parser("rademacher", help="Monte-Carlo complexity estimate")
    r.add_argument("--family", default="linear")
    r.add_argument("--n", type=int, required=True)
    r.add_argument("--m", type=int, required=True)
    r.add_argument("--e", type=int, default=8)
    r.add_argument("--d", type=int, default=10)
    r.add_argument("--b1", type=float, default=1.0)
    r.add_argument("--b2", type=float, default=1.0)
    r.add_argument("--replicates", type=int, default=10_000)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=_cmd_theory_rademacher)

    b = thsub.add_parser("bound", help="evaluate the excess-risk bound")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--m", type=int, required=True)
    b.add_argument("--epsilon", type=float, default=0.0)
    b.add_argument("--delta", type=float, default=0.1)
    b.add_argument("--beta", type=float, default=0.0)
    b.add_argument("--poincare-c", type=float, default=1.0)
    b.add_argument("--rademacher", type=float, default=0.0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=_cmd_theory_bound)

    pc = thsub.add_parser("poincare", help="empirical Gaussian Poincare check")
    pc.add_argument("--dim", type=int, default=8)
    pc.add_argument("--cov", default="identity", choices=("identity", "random"))
    pc.add_argument("--fns", type=int, default=3)
    pc.add_argument("--draws", type=int, default=100_000)
    pc.add_argument("--seed", type=int, default=None)
    pc.add_argument("--out", default=None)
    pc.set_defaults(func=_cmd_theory_poincare)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return 3
    except (IncompatibilityError, ShapeMismatchError, LeakageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
