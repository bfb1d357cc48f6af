import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prefmod import config, synthdata, training  # noqa: E402

TINY = {
    "seed": 5,
    "data": {"n_train_users": 3, "n_heldout_users": 2, "per_user": 8, "n_prior": 24},
    "backbone": {"blocks": 2, "d_model": 16, "heads": 2, "d_mod": 8, "d_pool": 8,
                 "mlp_hidden": 16, "patch_size": 4},
    "adapter": {"tokens": 2, "d_user": 4, "blocks": 3, "heads": 2, "mlp_hidden": 16},
    "stage0": {"steps": 20, "batch_size": 4, "log_every": 5},
    "stage1": {"steps": 12, "batch_size": 4, "log_every": 4, "lr": 1e-3},
    "stage2": {"steps": 10, "batch_size": 2},
    "sampler": {"steps": 4},
    "eval": {"prompts": 3, "seeds": 1, "history_lengths": [2, 4], "history_seeds": 1,
             "history_users": 2},
}


def tiny_experiment(**changes):
    cfg = config.from_dict(TINY)
    return config.replace(cfg, **changes) if changes else cfg


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_experiment()


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    return synthdata.dataset_from_config(tiny_cfg.data, tiny_cfg.seed)


@pytest.fixture(scope="session")
def tiny_stage0(tiny_cfg, tiny_data):
    return training.pretrain_backbone(tiny_data, tiny_cfg)


@pytest.fixture(scope="session")
def tiny_stage1(tiny_cfg, tiny_data, tiny_stage0):
    return training.train_stage1(tiny_data, tiny_stage0, tiny_cfg)
