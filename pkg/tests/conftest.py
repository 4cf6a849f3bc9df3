import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mritranslate.dataio import preprocess_volumes
from mritranslate.nifti import write_volume


def make_volume(nx=20, ny=20, nz=5, seed=0, offset=0.0):
    """Smooth-ish random volume with distinguishable slices."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 400.0, size=(nx, ny, nz))
    ramp = np.arange(nz, dtype=np.float64)[None, None, :] * 10.0
    return base + ramp + offset


def write_patient(root: Path, pid: str, modalities=("T1", "T2"), nz=5, seed=0):
    root.mkdir(parents=True, exist_ok=True)
    for k, mod in enumerate(modalities):
        vol = make_volume(nz=nz, seed=seed * 100 + k, offset=20.0 * k)
        write_volume(root / f"{pid}_{mod.lower()}.nii", vol)


@pytest.fixture(scope="session")
def slab_tree(tmp_path_factory):
    """Preprocessed synthetic dataset: 10 patients, T1+T2, 8 train / 2 test."""
    base = tmp_path_factory.mktemp("dataset")
    volumes = base / "volumes"
    for i in range(10):
        write_patient(volumes, f"case{i:02d}", seed=i)
    out = base / "slabs"
    result = preprocess_volumes(volumes, out, ratio=0.8, seed=7)
    assert not result.anomalies
    return out


@pytest.fixture(scope="session")
def tiny_configs():
    """Small model/train settings that keep loop tests fast."""
    from mritranslate.discriminator import DiscriminatorConfig
    from mritranslate.generator import GeneratorConfig
    from mritranslate.objectives import LossWeights
    from mritranslate.training import TrainConfig

    gen = GeneratorConfig(depth=2, base_channels=4)
    disc = DiscriminatorConfig(n_down=1, base_channels=4)
    train = TrainConfig(
        batch_size=2,
        epochs=3,
        seed=11,
        resolution=128,
        checkpoint_every=50,
        weights=LossWeights(),
    )
    return gen, disc, train
