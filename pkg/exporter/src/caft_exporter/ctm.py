"""Writer for the CTM token-map interchange format.

Independent implementation of the documented layout so the exporter only
couples to the primary pipeline through the file format itself: 28-byte
header (magic "CAFT", version 1, n_layers, H, W, D, flags as little-endian
u32s), then float32 payload per layer (grid row-major, class token), then the
optional positional grid and positional class entry.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CAFT"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


def write_ctm(path, layers, class_tokens, pos_grid=None, pos_class=None) -> None:
    """layers: (L, H, W, D); class_tokens: (L, D); optional positional parts."""
    layers = np.ascontiguousarray(layers, dtype="<f4")
    class_tokens = np.ascontiguousarray(class_tokens, dtype="<f4")
    n_layers, h, w, d = layers.shape
    if class_tokens.shape != (n_layers, d):
        raise ValueError(f"class tokens {class_tokens.shape} do not match layers {layers.shape}")
    flags = 0
    if pos_grid is not None:
        pos_grid = np.ascontiguousarray(pos_grid, dtype="<f4")
        if pos_grid.shape != (h, w, d):
            raise ValueError(f"positional grid shape {pos_grid.shape} != {(h, w, d)}")
        flags |= 1
    if pos_class is not None:
        if pos_grid is None:
            raise ValueError("positional class entry requires the positional grid")
        pos_class = np.ascontiguousarray(pos_class, dtype="<f4")
        if pos_class.shape != (d,):
            raise ValueError(f"positional class shape {pos_class.shape} != ({d},)")
        flags |= 2
    for name, arr in (("layers", layers), ("class_tokens", class_tokens),
                      ("pos_grid", pos_grid), ("pos_class", pos_class)):
        if arr is not None and not np.isfinite(arr).all():
            raise ValueError(f"non-finite value in {name}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n_layers, h, w, d, flags))
        for layer in range(n_layers):
            fh.write(layers[layer].tobytes())
            fh.write(class_tokens[layer].tobytes())
        if pos_grid is not None:
            fh.write(pos_grid.tobytes())
        if pos_class is not None:
            fh.write(pos_class.tobytes())
