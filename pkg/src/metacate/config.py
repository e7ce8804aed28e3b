"""Experiment configuration: one JSON file drives the whole pipeline.

Schema (all keys optional unless noted; defaults in parentheses):

{
  "seed": 0,                    master seed; sub-seeds derive from it
  "out_dir": "runs/exp",        required unless --out is given
  "dgp": {                      required
    "d": ..., "e": ..., "n_interventions": ..., "m_per_task": ...,
    "n_controls": ..., "noise_sd": ...,
    "effect_kind": "linear", "confounding_strength": 0.0, "seed": <master>
  },
  "split": {"frac_val": 0.1, "frac_test": 0.2, "seed": <derived>},
  "pseudo": {"kind": "knn", "n_folds": 5, "knn_k": 10, "mode": "treated_only",
             "mlp_hidden": 32, "mlp_blocks": 1, "mlp_steps": 400,
             "mlp_lr": 0.02, "mlp_batch": 64, "seed": <derived>},
  "model": {"hidden_dim": 64, "n_residual_blocks": 2, "enc_out_dim": null},
  "train": {"iterations": 2000, "adapt_steps": 10, "batch_size": 64,
            "inner_lr": 0.05, "meta_lr": 0.5, "adapt_scope": "treated_only",
            "l1_coeff": 0.0, "seed": <derived>, "null_kind": "zero"},
  "eval": {"us": [0.999, 0.998, 0.995, 0.99], "gamma_source": "estimated",
           "tau_threshold": 0.0, "seed": <derived>}
}

Unknown keys are rejected so typos fail loudly instead of silently using
defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .errors import ConfigError, MissingInputError
from .nn import FusionSpec, default_fusion_spec
from .pseudo import PSEUDO_MODES, NuisanceConfig
from .synthgen import DGPConfig
from .trainer import NULL_KINDS, TrainConfig
from .evaluation import DEFAULT_US, GAMMA_SOURCES


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DGPConfig
    frac_val: float = 0.1
    frac_test: float = 0.2
    split_seed: int = 1000
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    pseudo_mode: str = "treated_only"
    hidden_dim: int = 64
    n_residual_blocks: int = 2
    enc_out_dim: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    null_kind: str = "zero"
    us: tuple = DEFAULT_US
    gamma_source: str = "estimated"
    tau_threshold: float = 0.0
    eval_seed: int = 4000
    out_dir: str = ""
    seed: int = 0

    def validate(self) -> None:
        self.dgp.validate()
        self.nuisance.validate()
        self.train.validate()
        if self.pseudo_mode not in PSEUDO_MODES:
            raise ConfigError(f"pseudo mode must be one of {PSEUDO_MODES}, got {self.pseudo_mode!r}")
        if self.null_kind not in NULL_KINDS:
            raise ConfigError(f"null_kind must be one of {NULL_KINDS}, got {self.null_kind!r}")
        if self.gamma_source not in GAMMA_SOURCES:
            raise ConfigError(
                f"gamma_source must be one of {GAMMA_SOURCES}, got {self.gamma_source!r}"
            )
        for u in self.us:
            if not 0.0 < u < 1.0:
                raise ConfigError(f"u values must be in (0, 1), got {u}")
        if self.hidden_dim < 1 or self.n_residual_blocks < 0:
            raise ConfigError("model dims must be positive (blocks may be 0)")
        self.fusion_spec().validate()

    def fusion_spec(self) -> FusionSpec:
        return default_fusion_spec(
            w_dim=self.dgp.e,
            x_dim=self.dgp.d,
            hidden_dim=self.hidden_dim,
            n_residual_blocks=self.n_residual_blocks,
            enc_out_dim=self.enc_out_dim,
        )

    def to_dict(self) -> dict:
        """Canonical dict for hashing and manifests."""
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dgp": asdict(self.dgp),
            "split": {
                "frac_val": self.frac_val,
                "frac_test": self.frac_test,
                "seed": self.split_seed,
            },
            "pseudo": {**asdict(self.nuisance), "mode": self.pseudo_mode},
            "model": {
                "hidden_dim": self.hidden_dim,
                "n_residual_blocks": self.n_residual_blocks,
                "enc_out_dim": self.enc_out_dim,
            },
            "train": {**asdict(self.train), "null_kind": self.null_kind},
            "eval": {
                "us": list(self.us),
                "gamma_source": self.gamma_source,
                "tau_threshold": self.tau_threshold,
                "seed": self.eval_seed,
            },
        }


_SECTION_KEYS = {
    "dgp": {
        "d", "e", "n_interventions", "m_per_task", "n_controls", "noise_sd",
        "effect_kind", "confounding_strength", "seed",
    },
    "split": {"frac_val", "frac_test", "seed"},
    "pseudo": {
        "kind", "n_folds", "knn_k", "mode", "mlp_hidden", "mlp_blocks",
        "mlp_steps", "mlp_lr", "mlp_batch", "seed",
    },
    "model": {"hidden_dim", "n_residual_blocks", "enc_out_dim"},
    "train": {
        "iterations", "adapt_steps", "batch_size", "inner_lr", "meta_lr",
        "adapt_scope", "l1_coeff", "seed", "null_kind",
    },
    "eval": {"us", "gamma_source", "tau_threshold", "seed"},
}
_TOP_KEYS = {"seed", "out_dir"} | set(_SECTION_KEYS)


def _check_keys(raw: dict) -> None:
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in _SECTION_KEYS.items():
        sub = raw.get(section)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        bad = set(sub) - allowed
        if bad:
            raise ConfigError(f"unknown keys in config section {section!r}: {sorted(bad)}")


def config_from_dict(raw: dict, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    _check_keys(raw)
    if "dgp" not in raw:
        raise ConfigError("config is missing the required 'dgp' section")
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)

    dgp_raw = dict(raw["dgp"])
    dgp_raw.setdefault("seed", seed)
    try:
        dgp = DGPConfig(**dgp_raw)
    except TypeError as exc:
        raise ConfigError(f"bad dgp section: {exc}") from None

    split = raw.get("split", {})
    pseudo = dict(raw.get("pseudo", {}))
    pseudo_mode = pseudo.pop("mode", "treated_only")
    pseudo.setdefault("seed", seed + 2000)
    try:
        nuisance = NuisanceConfig(**pseudo)
    except TypeError as exc:
        raise ConfigError(f"bad pseudo section: {exc}") from None

    model = raw.get("model", {})
    train_raw = dict(raw.get("train", {}))
    null_kind = train_raw.pop("null_kind", "zero")
    train_raw.setdefault("seed", seed + 3000)
    try:
        train = TrainConfig(**train_raw)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from None

    ev = raw.get("eval", {})
    out_dir = out_override if out_override is not None else raw.get("out_dir", "")

    cfg = ExperimentConfig(
        dgp=dgp,
        frac_val=float(split.get("frac_val", 0.1)),
        frac_test=float(split.get("frac_test", 0.2)),
        split_seed=int(split.get("seed", seed + 1000)),
        nuisance=nuisance,
        pseudo_mode=pseudo_mode,
        hidden_dim=int(model.get("hidden_dim", 64)),
        n_residual_blocks=int(model.get("n_residual_blocks", 2)),
        enc_out_dim=model.get("enc_out_dim"),
        train=train,
        null_kind=null_kind,
        us=tuple(float(u) for u in ev.get("us", DEFAULT_US)),
        gamma_source=ev.get("gamma_source", "estimated"),
        tau_threshold=float(ev.get("tau_threshold", 0.0)),
        eval_seed=int(ev.get("seed", seed + 4000)),
        out_dir=out_dir,
        seed=seed,
    )
    cfg.validate()
    return cfg


def load_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw, seed_override, out_override)
