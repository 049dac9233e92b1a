"""Decoder-to-BOS attention traces and their heatmap exports.

A trace stores, for every decoder layer and head, the attention
distribution over the encoder's BOS states at each generation step.  The
heatmap aggregation averages the heads, keeps the top-k BOS entries per
generated token, and renormalizes each column to sum to 1.  Images are
written directly as binary PGM (P5); no plotting library involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class AttentionTrace:
    weights: np.ndarray  # [layers, heads, steps, num_bos]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ValueError(
                f"trace must be [layers, heads, steps, num_bos], got {self.weights.shape}"
            )

    @property
    def num_layers(self):
        return self.weights.shape[0]

    @property
    def num_steps(self):
        return self.weights.shape[2]

    def validate(self, tol: float = 1e-6) -> None:
        if self.weights.size == 0:
            return
        sums = self.weights.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > tol:
            raise ValueError("trace rows must each sum to 1 over BOS indices")

    def save(self, path) -> Path:
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_suffix(path.suffix + ".npz")
        np.savez_compressed(path, weights=self.weights)
        return path

    @classmethod
    def load(cls, path) -> "AttentionTrace":
        with np.load(path) as data:
            return cls(data["weights"])


@dataclass
class Heatmap:
    matrix: np.ndarray  # [num_bos, steps]; columns sum to 1


def aggregate(trace: AttentionTrace, layer: int, k: int = 16) -> Heatmap:
    """Head-mean, then per-step top-k truncation and renormalization.

    For each generated token: average the heads' distributions, keep the k
    BOS entries with the largest weight (ties prefer the lower BOS index),
    zero the rest, and rescale the column to sum to 1.
    """
    if not 0 <= layer < trace.num_layers:
        raise ValueError(f"layer {layer} out of range [0, {trace.num_layers})")
    mean = trace.weights[layer].mean(axis=0)          # [steps, num_bos]
    steps, num_bos = mean.shape
    out = np.zeros((num_bos, steps))
    for s in range(steps):
        col = mean[s]
        if num_bos > k:
            # lexsort: primary key last; index array breaks ties downward
            keep = np.lexsort((np.arange(num_bos), -col))[:k]
            kept = np.zeros(num_bos)
            kept[keep] = col[keep]
        else:
            kept = col.copy()
        total = kept.sum()
        out[:, s] = kept / total if total > 0 else kept
    return Heatmap(out)


def export_heatmap(heatmap: Heatmap, path, fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "csv":
        _write_csv(heatmap.matrix, path)
    elif fmt == "pgm":
        _write_pgm(heatmap.matrix, path)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    return path


def export_layers(trace: AttentionTrace, prefix: str, k: int = 16,
                  fmt: str = "csv", layers=None) -> list[Path]:
    """Write one file per layer, named {prefix}.layer{i}.{ext}."""
    layers = range(trace.num_layers) if layers is None else layers
    return [
        export_heatmap(aggregate(trace, i, k), f"{prefix}.layer{i}.{fmt}", fmt)
        for i in layers
    ]


def _write_csv(matrix: np.ndarray, path: Path) -> None:
    num_bos, steps = matrix.shape
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(str(s) for s in range(steps)) + "\n")
        for row in matrix:
            f.write(",".join(f"{w:.12g}" for w in row) + "\n")


def load_heatmap_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]
    rows = [[float(x) for x in line.split(",")] for line in lines[1:]]
    return np.array(rows, dtype=np.float64)


def _write_pgm(matrix: np.ndarray, path: Path) -> None:
    # 8-bit grayscale, BOS index on the vertical axis, scaled to the peak
    peak = matrix.max()
    scaled = matrix / peak if peak > 0 else matrix
    pixels = np.rint(255.0 * scaled).astype(np.uint8)
    num_bos, steps = matrix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{steps} {num_bos}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Parse a binary P5 file back into a [height, width] uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    if maxval != 255:
        raise ValueError(f"{path}: expected 8-bit PGM, maxval {maxval}")
    data = np.frombuffer(raw[pos:], dtype=np.uint8)
    if data.size != width * height:
        raise ValueError(f"{path}: pixel payload is {data.size}, expected {width * height}")
    return data.reshape(height, width)
