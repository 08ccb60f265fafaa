import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coverseek.signal import CqtConfig


@pytest.fixture(scope="session")
def small_cqt_cfg():
    """Cheap CQT configuration for tests that do not need paper defaults."""
    return CqtConfig(
        chunk_seconds=4.0,
        overlap_seconds=2.0,
        avg_factor=20,
        n_bins=48,
        f_min=65.4,
        min_tail_seconds=1.0,
    )


@pytest.fixture(scope="session")
def default_cqt_cfg():
    return CqtConfig()


@pytest.fixture(scope="session")
def mini_dataset_dir(tmp_path_factory):
    """Small synthetic dataset shared by train/retrieval/cli tests."""
    from coverseek.train import SyntheticCliqueConfig, generate_synthetic_dataset

    out = tmp_path_factory.mktemp("mini_data")
    cfg = SyntheticCliqueConfig(
        n_cliques=4, versions_per_clique=2, base_duration_s=16.0, seed=71
    )
    entries = generate_synthetic_dataset(cfg, out)
    return out, entries
