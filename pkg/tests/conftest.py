from __future__ import annotations

import pytest

from tapinn.duffing import DatasetConfig, generate_dataset
from tapinn.training import TrainConfig

TINY_DIMS = {
    "tapinn": {"obs_dim": 2, "lstm_hidden": 4, "latent_dim": 3, "gen_hidden": [8, 8], "n_out": 1},
    "multi_output": {"obs_dim": 2, "lstm_hidden": 4, "latent_dim": 3, "gen_hidden": [8, 8], "n_out": 2},
    "parametric": {"hidden": [8, 8]},
    "hyperpinn": {"hyper_hidden": [4], "target_hidden": [4, 4]},
}


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    cfg = DatasetConfig(regimes=(0.3, 0.5, 0.8), per_regime=10, n_samples=120)
    generate_dataset(cfg, seed=11, out=out)
    return out


def tiny_config(method: str, data_dir, seed: int = 0, **kw) -> TrainConfig:
    base = dict(method=method, seed=seed, data_dir=str(data_dir), epochs=4, phase1_epochs=1,
                phase2_epochs=2, k_joint=2, batch_size=6, window_len=20, n_collocation=16,
                n_data_points=30, dims=TINY_DIMS[TrainConfig(method=method).kind])
    base.update(kw)
    return TrainConfig(**base)


# criterion number -> one-line verdict, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
