"""Weighted fusion of the stored token layers and the positional grid into a
single merged map."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .token_io import TokenMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MergeRatios:
    """Nonnegative fusion weights for the three token layers plus positional grid."""

    alpha_0: float = 0.25
    alpha_1: float = 0.25
    alpha_2: float = 0.25
    alpha_p: float = 0.25

    def __post_init__(self):
        values = self.as_tuple()
        if any(a < 0 for a in values):
            raise DataError(f"merge ratios must be >= 0, got {values}")
        if not any(a > 0 for a in values):
            raise DataError("at least one merge ratio must be > 0")

    def as_tuple(self):
        return (self.alpha_0, self.alpha_1, self.alpha_2, self.alpha_p)

    @classmethod
    def parse(cls, text: str) -> "MergeRatios":
        """Parses the CLI form ``a0,a1,a2,ap``."""
        parts = text.split(",")
        if len(parts) != 4:
            raise DataError(f"expected four comma-separated ratios, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError as exc:
            raise DataError(f"bad ratio value in {text!r}") from exc


@dataclass
class MergedMap:
    """Single (H, W, D) token grid plus one merged class token."""

    grid: np.ndarray
    class_token: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.class_token = np.asarray(self.class_token, dtype=np.float64)
        if self.grid.ndim != 3:
            raise DataError(f"merged grid must be 3-D, got shape {self.grid.shape}")
        if self.class_token.shape != (self.grid.shape[2],):
            raise DataError("class token length does not match grid dim")
        if not (np.isfinite(self.grid).all() and np.isfinite(self.class_token).all()):
            raise DataError("non-finite value in merged map")

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    def tokens(self) -> np.ndarray:
        """Grid tokens flattened row-major to (H*W, D)."""
        return self.grid.reshape(-1, self.grid.shape[2])


def merge_maps(tm: TokenMap, ratios: MergeRatios) -> MergedMap:
    """Per-cell weighted sum of the token layers and positional grid.

    The merged class token receives the positional class entry with the same
    weight; if the token map carries a positional grid but no class entry,
    that term is dropped with a warning.
    """
    alphas = (ratios.alpha_0, ratios.alpha_1, ratios.alpha_2)
    if (ratios.alpha_1 > 0 or ratios.alpha_2 > 0) and tm.n_layers != 3:
        raise DataError(f"layer count mismatch: need 3 layers, map has {tm.n_layers}")
    if ratios.alpha_p > 0 and tm.pos_grid is None:
        raise DataError("missing positional grid with alpha_p > 0")

    grid = np.zeros(tm.grid.shape[1:], dtype=np.float64)
    class_token = np.zeros(tm.dim, dtype=np.float64)
    for layer, alpha in enumerate(alphas):
        if alpha > 0:
            grid += alpha * tm.grid[layer].astype(np.float64)
            class_token += alpha * tm.class_tokens[layer].astype(np.float64)
    if ratios.alpha_p > 0:
        grid += ratios.alpha_p * tm.pos_grid.astype(np.float64)
        if tm.pos_class is not None:
            class_token += ratios.alpha_p * tm.pos_class.astype(np.float64)
        else:
            log.warning("positional class entry absent, dropping its class-token term")
    return MergedMap(grid=grid, class_token=class_token)


def layer_subset_ratios(
    n_layers_used: int, emphasize_last: bool = False, include_positional: bool = True
) -> MergeRatios:
    """Ablation presets: uniform weight over the first ``n_layers_used`` layers
    (plus one positional share), normalized to sum 1. ``emphasize_last``
    doubles the weight of the last included layer.
    """
    if not 1 <= n_layers_used <= 3:
        raise DataError("n_layers_used must be 1..3")
    shares = [0.0, 0.0, 0.0, 0.0]
    for layer in range(n_layers_used):
        shares[layer] = 1.0
    if emphasize_last:
        shares[n_layers_used - 1] = 2.0
    if include_positional:
        shares[3] = 1.0
    total = sum(shares)
    return MergeRatios(*(s / total for s in shares))
