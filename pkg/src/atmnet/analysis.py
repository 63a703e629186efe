"""Histograms of learned offsets, one per offset-predicting layer and axis.

Each recorded value is the displacement the operator actually applies: the
raw prediction added to the query coordinate, clamped to the feature map,
minus the query coordinate. It is then rounded half away from zero. Counting
is per channel group: each (sample, query token, group) adds one count.

Bins cover every displacement reachable from the queried tokens. A centre
query at index ``c = L // 2`` on an axis of length ``L`` reaches
``[-c, L - 1 - c]`` (``[-32, 31]`` for L = 64). Querying all tokens reaches
``[-(L - 1), L - 1]``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Model, forward
from .data import Dataset
from .errors import ArgumentError, DataError

QUERIES = ("center", "all")


@dataclass
class OffsetHistogram:
    stage: int
    block: int
    branch: str          # "W" or "H"
    extent: int          # feature length along the branch axis
    groups: int
    low: int             # first bin (inclusive)
    counts: np.ndarray   # int64, one per integer bin from ``low``

    @property
    def bins(self) -> np.ndarray:
        return np.arange(self.low, self.low + len(self.counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def name(self) -> str:
        return f"layer_{self.stage}_{self.block}_{self.branch}"


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def bin_range(extent: int, query: str) -> tuple[int, int]:
    """Inclusive ``(low, high)`` displacement range for a query mode."""
    if query == "center":
        c = extent // 2
        return -c, extent - 1 - c
    return -(extent - 1), extent - 1


def effective_displacements(offsets: np.ndarray, axis: int, query: str) -> np.ndarray:
    """Clamped, rounded displacements at the queried tokens.

    ``offsets`` is (B, H, W, G); ``axis`` is 1 for height, 2 for width.
    Returns a flat integer array.
    """
    L = offsets.shape[axis]
    coord = np.arange(L).reshape((1, -1, 1, 1) if axis == 1 else (1, 1, -1, 1))
    pos = np.clip(coord + offsets.astype(np.float64), 0.0, L - 1.0)
    disp = round_half_away(pos - coord)
    if query == "center":
        disp = disp[:, offsets.shape[1] // 2, offsets.shape[2] // 2, :]
    return disp.astype(np.int64).ravel()


def collect_offset_histograms(model: Model, data: Dataset, query: str = "center",
                              resolution: int | None = None,
                              batch_size: int = 32) -> list[OffsetHistogram]:
    if query not in QUERIES:
        raise ArgumentError(f"query must be one of {QUERIES}, got {query!r}")
    if len(data) == 0:
        raise DataError("dataset is empty")
    H, W = data.resolution
    if resolution is not None and (H, W) != (resolution, resolution):
        raise DataError(f"dataset resolution {H}x{W} does not match requested {resolution}x{resolution}")
    if H % 32 or W % 32:
        raise DataError(f"dataset resolution {H}x{W} is not a multiple of 32")

    hists: dict[tuple[int, int, str], OffsetHistogram] = {}

    def record(stage, block, off_w, off_h):
        for branch, field, axis in (("W", off_w, 2), ("H", off_h, 1)):
            vals = field.values.data
            key = (stage, block, branch)
            if key not in hists:
                L = vals.shape[axis]
                lo, hi = bin_range(L, query)
                hists[key] = OffsetHistogram(stage, block, branch, L, vals.shape[-1], lo,
                                             np.zeros(hi - lo + 1, dtype=np.int64))
            h = hists[key]
            d = effective_displacements(vals, axis, query)
            h.counts += np.bincount(d - h.low, minlength=len(h.counts))

    for start in range(0, len(data), batch_size):
        images, _ = data.batch(slice(start, start + batch_size))
        forward(model, images, on_offsets=record)
    return [hists[k] for k in sorted(hists)]


def write_histograms(hists: list[OffsetHistogram], out_dir, query: str, num_samples: int) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for h in hists:
        p = out / f"{h.name}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# stage={h.stage} block={h.block} branch={h.branch} extent={h.extent} "
                     f"groups={h.groups} query={query} samples={num_samples} "
                     "counting=per-group (one count per sample, query token and offset group)\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("bin", "count"))
            w.writerows(zip(h.bins.tolist(), h.counts.tolist()))
        paths.append(p)
    with open(out / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("file", "stage", "block", "branch", "extent", "groups", "total"))
        for h in hists:
            w.writerow((f"{h.name}.csv", h.stage, h.block, h.branch, h.extent, h.groups, h.total))
    return paths


def read_histogram(path) -> tuple[np.ndarray, np.ndarray]:
    """Load a histogram CSV back as ``(bins, counts)``."""
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    body = list(csv.reader(rows))[1:]
    arr = np.array(body, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def export_offset_histograms(model: Model, data: Dataset, query: str = "center", out_dir=".",
                             resolution: int | None = None) -> list[OffsetHistogram]:
    hists = collect_offset_histograms(model, data, query, resolution)
    write_histograms(hists, out_dir, query, len(data))
    return hists
