import numpy as np
import pytest

from caft.token_io import TokenMap


def small_token_map(l=3, h=4, w=5, d=3, seed=0, with_pos=True):
    rng = np.random.default_rng(seed)
    return TokenMap(
        grid=rng.normal(0, 1, (l, h, w, d)).astype(np.float32),
        class_tokens=rng.normal(0, 1, (l, d)).astype(np.float32),
        pos_grid=rng.normal(0, 1, (h, w, d)).astype(np.float32) if with_pos else None,
        pos_class=rng.normal(0, 1, d).astype(np.float32) if with_pos else None,
    )


@pytest.fixture
def token_map():
    return small_token_map()
