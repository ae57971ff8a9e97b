import numpy as np
import pytest

from miltag.data import BagDataset, make_bag


def make_random_dataset(seed: int, num_bags: int = 12, classes: int = 4, dim: int = 6,
                        max_t: int = 5, id_prefix: str = "bag") -> BagDataset:
    """Random valid dataset; every bag carries at least one label."""
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(num_bags):
        t = int(rng.integers(1, max_t + 1))
        feats = rng.normal(size=(t, dim))
        label_idx = [int(rng.integers(0, classes))]
        # occasionally multi-label
        if rng.random() < 0.3:
            label_idx.append(int(rng.integers(0, classes)))
        bags.append(make_bag(f"{id_prefix}-{i:04d}", feats, label_idx, classes))
    names = [f"class_{c:04d}" for c in range(classes)]
    return BagDataset(class_names=names, dim=dim, bags=bags).validate()


@pytest.fixture
def random_dataset():
    return make_random_dataset
