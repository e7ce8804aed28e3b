import numpy as np
import pytest

from metacate import DGPConfig, build_meta_dataset, generate_population, split_holdout


@pytest.fixture(scope="session")
def tiny_pop():
    """Small generated population shared (read-only) across tests."""
    cfg = DGPConfig(
        d=4, e=3, n_interventions=6, m_per_task=30, n_controls=200,
        noise_sd=0.4, effect_kind="linear", confounding_strength=0.5, seed=5,
    )
    samples, gt = generate_population(cfg)
    return cfg, samples, gt


@pytest.fixture()
def tiny_md(tiny_pop):
    # regenerated per test: several tests attach pseudo-outcomes in place,
    # which would leak through shared Sample objects
    cfg, _, _ = tiny_pop
    samples, gt = generate_population(cfg)
    md = build_meta_dataset(samples, gt.interventions)
    return split_holdout(md, 0.2, 0.2, seed=9), gt


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
