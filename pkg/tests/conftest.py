import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from episeg.store import DumpMeta, Episode, FeatureDump


def random_mask(rng, hg, wg):
    """Binary mask guaranteed to contain both classes (needs >= 2 cells)."""
    if hg * wg < 2:
        raise ValueError("grid too small for a two-class mask")
    while True:
        mask = (rng.random((hg, wg)) < 0.4).astype(np.uint8)
        if 0 < mask.sum() < hg * wg:
            return mask


def random_dump(rng, hg=3, wg=4, d=5, layers=4, heads=2, attn_layers=None, with_mask=True):
    n = hg * wg
    attn_layers = sorted(attn_layers) if attn_layers is not None else [layers - 1]
    la = len(attn_layers)
    return FeatureDump(
        tokens=rng.normal(size=(layers, n, d)).astype(np.float32),
        qk_logits=rng.normal(size=(la, heads, n, n)).astype(np.float32),
        kk_logits=rng.normal(size=(la, heads, n, n)).astype(np.float32),
        image_small=rng.random((3, hg, wg)).astype(np.float32),
        mask=random_mask(rng, hg, wg) if with_mask else None,
        meta=DumpMeta(hg=hg, wg=wg, patch_size=16, backbone="synthetic", attn_layers=attn_layers),
    )


def random_episode(rng, shot=3, **kwargs):
    supports = [random_dump(rng, **kwargs) for _ in range(shot)]
    query = random_dump(rng, **kwargs)
    return Episode(supports=supports, query=query, class_id="test")


def dumps_equal(a: FeatureDump, b: FeatureDump) -> bool:
    same = (
        a.tokens.tobytes() == b.tokens.tobytes()
        and a.qk_logits.tobytes() == b.qk_logits.tobytes()
        and a.kk_logits.tobytes() == b.kk_logits.tobytes()
        and a.image_small.tobytes() == b.image_small.tobytes()
        and a.meta.to_json() == b.meta.to_json()
    )
    if a.mask is None or b.mask is None:
        return same and a.mask is None and b.mask is None
    return same and a.mask.tobytes() == b.mask.tobytes()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
