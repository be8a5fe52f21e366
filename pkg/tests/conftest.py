import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable


@pytest.fixture(autouse=True)
def _fixed_seeds():
    np.random.seed(0)
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small generated dataset shared by loader/trainer tests."""
    from condadapt.toyworld import DataBuildConfig, build_dataset

    root = tmp_path_factory.mktemp("tinydata")
    cfg = DataBuildConfig(source_train=24, source_eval=6, target_train=24,
                          target_eval_per_condition=6, unseen_eval=4)
    manifests = build_dataset(cfg, root, seed=5)
    return root, cfg, manifests
