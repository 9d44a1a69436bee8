import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from sketchkp.config import RunConfig
from sketchkp.data import load_annotations
from sketchkp.synthetic import make_polygon_dataset


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """24 small polygon images over three classes, with edgemaps and masks."""
    root = tmp_path_factory.mktemp("poly")
    index_path = make_polygon_dataset(root, n_images=24, classes=("hexagon", "star", "kite"), size=64, seed=3)
    return index_path


@pytest.fixture
def small_config(small_dataset, tmp_path):
    root = small_dataset.parent
    return RunConfig(
        dataset=str(small_dataset),
        cache_dir=str(root / "edgemaps"),
        mask_dir=str(root / "masks"),
        run_dir=str(tmp_path / "run"),
        image_size=64,
        encoder_backbone="tiny",
        encoder_channels=16,
        encoder_stride=8,
        xi=4.0,
        m_query=2,
        iterations=3,
        checkpoint_every=0,
        eval_episodes=6,
        unseen_classes=["kite"],
    )


@pytest.fixture
def small_index(small_dataset):
    return load_annotations(small_dataset)
