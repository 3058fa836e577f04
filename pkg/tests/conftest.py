import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctrnet.model import NetConfig
from ctrnet.sampling import GroupedBatch
from ctrnet.sparse import csr_from_rows


TINY_NET = dict(
    image_shape=(3, 8, 8),
    first_kernel=3,
    first_channels=3,
    group_channels=(4,),
    group_stride2=(True,),
    layers_per_group=1,
    embed_dim=5,
    basic_dim=20,
    basic_hidden=6,
    comb_hidden=(7, 5),
    dropout_rate=0.0,
    use_bn_comb=True,
    n_categories=3,
    pretrain_hidden=(8, 8),
)


@pytest.fixture
def tiny_cfg():
    """Two conv layers, d=20: small enough for exhaustive gradient checks."""
    return NetConfig(**TINY_NET)


def random_rows(rng, num_rows, dim, nnz):
    rows = []
    for _ in range(num_rows):
        idx = sorted(rng.choice(dim, size=nnz, replace=False).tolist())
        rows.append([(int(i), float(rng.normal())) for i in idx])
    return rows


def tiny_batch(rng, cfg, n=2, k=3, onehot=False):
    """Random grouped batch matching a tiny net config."""
    imgs = rng.random((n, *cfg.image_shape))
    nnz = 3
    rows = []
    for _ in range(n * k):
        idx = sorted(rng.choice(cfg.basic_dim, size=nnz, replace=False).tolist())
        vals = [1.0] * nnz if onehot else rng.normal(size=nnz).tolist()
        rows.append(list(zip(idx, vals)))
    feats = csr_from_rows(rows, cfg.basic_dim)
    labels = rng.integers(0, 2, n * k).astype(np.float64)
    ids = [f"im{i}" for i in range(n)]
    return GroupedBatch(images=imgs, image_ids=ids, features=feats, labels=labels, k=k)
