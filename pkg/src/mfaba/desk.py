"""Seeded desk-scale models and datasets shared by tests and benchmarks."""
from __future__ import annotations

from functools import lru_cache

from .data import make_bar_images, make_blobs
from .diffnet import cnn, mlp, train


@lru_cache(maxsize=None)
def blobs_mlp(seed: int = 0, activation: str = "relu"):
    """2-class blobs 6 sigma apart (sigma 0.05) and a trained [2 -> 16 -> 2] MLP.

    Returns ``(model, train_split, eval_split)``.
    """
    tr = make_blobs(200, 2, 2, 6.0, seed=seed + 1)
    ev = make_blobs(400, 2, 2, 6.0, seed=seed + 2)
    model = train(mlp(2, (16,), 2, seed=seed, activation=activation), tr, 50, 0.1, seed=seed)
    return model, tr, ev


@lru_cache(maxsize=None)
def bars_cnn(seed: int = 0, filters: int = 8, activation: str = "relu", pooling: str = "max"):
    """8x8 horizontal-vs-vertical bar images and a trained small CNN."""
    tr = make_bar_images(600, 8, 2, seed=seed + 1)
    ev = make_bar_images(400, 8, 2, seed=seed + 3)
    model = train(cnn((8, 8), filters, 3, 2, 2, seed, activation, pooling), tr, 30, 0.1, seed=seed)
    return model, tr, ev
