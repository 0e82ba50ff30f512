"""Spatiotemporal panels: loading, z-scoring, windowing and time splits.

A panel stores values as ``(N, T, F)``: node, time step, feature channel.
Every forecasting sample is cut here so that the train, validation and test
regions never share a time step.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadInput,
    DuplicateNodeId,
    MissingFile,
    NonNumericCell,
    RaggedRow,
    RegionTooShort,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

MIN_NODES = 2
MIN_STEPS = 8


@dataclass(frozen=True)
class TimeSeriesPanel:
    node_ids: tuple
    values: np.ndarray
    target_channel: int = 0
    time_step: str = "week"
    channel_names: tuple = ()
    time_labels: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ShapeMismatch(f"panel values must be N x T x F, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "node_ids", tuple(str(n) for n in self.node_ids))
        N, T, F = values.shape
        if len(self.node_ids) != N:
            raise ShapeMismatch(f"{len(self.node_ids)} node ids for {N} nodes")
        if len(set(self.node_ids)) != N:
            dupes = sorted({n for n in self.node_ids if self.node_ids.count(n) > 1})
            raise DuplicateNodeId(f"duplicate node ids: {dupes}")
        if N < MIN_NODES or T < 2 or F < 1:
            raise BadInput(f"panel must have N >= {MIN_NODES}, T >= 2, F >= 1; got {values.shape}")
        if T < MIN_STEPS:
            logger.warning("panel has only %d steps (< %d); too short for the default windows", T, MIN_STEPS)
        if not 0 <= self.target_channel < F:
            raise BadInput(f"target_channel {self.target_channel} outside [0, {F})")
        if not np.all(np.isfinite(values)):
            raise BadInput("panel contains NaN or Inf")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    @property
    def target(self) -> np.ndarray:
        """Target channel as an ``(N, T)`` array."""
        return self.values[:, :, self.target_channel]

    def slice_time(self, start: int, stop: int) -> "TimeSeriesPanel":
        labels = self.time_labels[start:stop] if self.time_labels else ()
        return replace(self, values=self.values[:, start:stop, :].copy(), time_labels=labels)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (N, F)
    std: np.ndarray  # (N, F)
    constant: np.ndarray = field(default=None)  # (N, F) bool

    def __post_init__(self):
        if self.constant is None:
            object.__setattr__(self, "constant", np.zeros(np.shape(self.mean), dtype=bool))


@dataclass(frozen=True)
class WindowSample:
    x: np.ndarray  # (N, tau, F)
    y: np.ndarray  # (N, tau_prime)
    t_origin: int


@dataclass(frozen=True)
class SplitSpec:
    """Time regions ``[0, train_end)``, ``[train_end, val_end)``, ``[val_end, T)``."""

    train_end: int
    val_end: int
    n_steps: int

    def __post_init__(self):
        if not 0 < self.train_end < self.val_end < self.n_steps:
            raise BadInput(
                f"split needs 0 < train_end < val_end < T, got {self.train_end}, {self.val_end}, {self.n_steps}"
            )

    def region(self, name: str) -> tuple:
        return {
            "train": (0, self.train_end),
            "val": (self.train_end, self.val_end),
            "test": (self.val_end, self.n_steps),
            "fit": (0, self.val_end),
        }[name]

    @classmethod
    def from_weeks(cls, n_steps: int, train_weeks: int, test_weeks: int, val_weeks: int = 8) -> "SplitSpec":
        """Translate a ``train:test`` split; validation is the tail of train."""
        if train_weeks + test_weeks != n_steps:
            scale = n_steps / (train_weeks + test_weeks)
            test_weeks = max(1, int(round(test_weeks * scale)))
            train_weeks = n_steps - test_weeks
        return cls(train_weeks - val_weeks, train_weeks, n_steps)

    @classmethod
    def from_fractions(cls, n_steps: int, test_fraction: float = 16 / 90, val_fraction: float = 8 / 90) -> "SplitSpec":
        test = max(1, int(round(n_steps * test_fraction)))
        val = max(1, int(round(n_steps * val_fraction)))
        return cls(n_steps - test - val, n_steps - test, n_steps)


# -- loading -----------------------------------------------------------------


def _read_channel_csv(path: Path):
    if not path.exists():
        raise MissingFile(f"panel file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise BadInput(f"empty panel file: {path}")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise BadInput(f"{path}: header must be time,<node ids...>")
    node_ids = header[1:]
    if len(set(node_ids)) != len(node_ids):
        dupes = sorted({n for n in node_ids if node_ids.count(n) > 1})
        raise DuplicateNodeId(f"{path}: duplicate node ids {dupes}")
    labels, data = [], []
    for i, row in enumerate(rows[1:], start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise RaggedRow(i, path)
        vals = []
        for j, cell in enumerate(row[1:], start=1):
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCell(i, j, cell, path) from None
            if not np.isfinite(v):
                raise NonNumericCell(i, j, cell, path)
            vals.append(v)
        labels.append(row[0].strip())
        data.append(vals)
    return node_ids, labels, np.asarray(data, dtype=np.float64).T  # (N, T)


def load_panel(path, target_channel: Optional[int] = None, time_step: str = "week") -> TimeSeriesPanel:
    """Load a panel from a single channel CSV or a JSON channel manifest.

    The manifest looks like ``{"channels": [{"name": ..., "path": ...}],
    "target_channel": 0, "time_step": "week"}``; relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"panel file not found: {path}")
    if path.suffix.lower() == ".json":
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise BadInput(f"{path}: invalid JSON manifest: {exc}") from exc
        channels = manifest.get("channels")
        if not channels:
            raise BadInput(f"{path}: manifest lists no channels")
        names, arrays, ids0, labels0 = [], [], None, None
        for ch in channels:
            ch_path = Path(ch["path"] if isinstance(ch, dict) else ch)
            if not ch_path.is_absolute():
                ch_path = path.parent / ch_path
            ids, labels, arr = _read_channel_csv(ch_path)
            if ids0 is None:
                ids0, labels0 = ids, labels
            elif ids != ids0 or arr.shape[1] != len(labels0):
                raise ShapeMismatch(f"{ch_path}: node ids or length differ from first channel")
            names.append(ch.get("name", ch_path.stem) if isinstance(ch, dict) else ch_path.stem)
            arrays.append(arr)
        tc = manifest.get("target_channel", 0) if target_channel is None else target_channel
        return TimeSeriesPanel(
            node_ids=ids0,
            values=np.stack(arrays, axis=2),
            target_channel=int(tc),
            time_step=manifest.get("time_step", time_step),
            channel_names=tuple(names),
            time_labels=tuple(labels0),
        )
    ids, labels, arr = _read_channel_csv(path)
    return TimeSeriesPanel(
        node_ids=ids,
        values=arr[:, :, None],
        target_channel=0 if target_channel is None else target_channel,
        time_step=time_step,
        channel_names=(path.stem,),
        time_labels=tuple(labels),
    )


def write_panel(panel: TimeSeriesPanel, out) -> list:
    """Write one CSV per channel plus a manifest when ``F > 1``.

    Returns the written paths. For ``F == 1`` only ``out`` is written.
    """
    out = Path(out)
    labels = panel.time_labels or tuple(str(t) for t in range(panel.n_steps))
    written = []

    def _write(path, channel):
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", *panel.node_ids])
            for t in range(panel.n_steps):
                w.writerow([labels[t], *(repr(float(v)) for v in panel.values[:, t, channel])])
        written.append(path)

    if panel.n_channels == 1:
        _write(out, 0)
        return written
    stem = out.with_suffix("")
    channels = []
    for c in range(panel.n_channels):
        name = panel.channel_names[c] if panel.channel_names else f"ch{c}"
        p = stem.parent / f"{stem.name}_{name}.csv"
        _write(p, c)
        channels.append({"name": name, "path": p.name})
    manifest = stem.with_suffix(".json")
    manifest.write_text(
        json.dumps({"channels": channels, "target_channel": panel.target_channel, "time_step": panel.time_step}, indent=2)
    )
    written.append(manifest)
    return written


# -- normalization -------------------------------------------------------------


def fit_zscore(panel: TimeSeriesPanel, stop: Optional[int] = None) -> NormStats:
    """Population mean/std per (node, channel) over time steps ``[0, stop)``."""
    v = panel.values[:, :stop, :]
    mean = v.mean(axis=1)
    std = v.std(axis=1)
    constant = ~(std > 0)
    if constant.any():
        logger.info("%d constant series recorded with std=1", int(constant.sum()))
    std = np.where(constant, 1.0, std)
    return NormStats(mean=mean, std=std, constant=constant)


def apply_zscore(panel: TimeSeriesPanel, stats: NormStats, channels: Optional[Sequence[int]] = None) -> TimeSeriesPanel:
    if stats.mean.shape != (panel.n_nodes, panel.n_channels):
        raise ShapeMismatch(f"stats shape {stats.mean.shape} does not match panel {panel.values.shape}")
    v = panel.values.copy()
    chans = range(panel.n_channels) if channels is None else channels
    for c in chans:
        v[:, :, c] = (v[:, :, c] - stats.mean[:, None, c]) / stats.std[:, None, c]
    return replace(panel, values=v)


def zscore(panel: TimeSeriesPanel, normalize_all_channels: bool = True):
    """Standardize every series over the whole time axis.

    Returns the normalized panel and its :class:`NormStats`. With
    ``normalize_all_channels=False`` only the target channel is touched
    (other channels keep mean 0 / std 1 in the stats).
    """
    stats = fit_zscore(panel)
    if not normalize_all_channels:
        mean = np.zeros_like(stats.mean)
        std = np.ones_like(stats.std)
        tc = panel.target_channel
        mean[:, tc] = stats.mean[:, tc]
        std[:, tc] = stats.std[:, tc]
        constant = np.zeros_like(stats.constant)
        constant[:, tc] = stats.constant[:, tc]
        stats = NormStats(mean, std, constant)
    return apply_zscore(panel, stats), stats


def denormalize(values, stats: NormStats, channel: Optional[int] = None) -> np.ndarray:
    """Invert z-scoring.

    ``values`` is either a full ``(N, T, F)`` array, or an ``(N, ...)``
    array of a single ``channel`` (e.g. forecasts of the target).
    """
    values = np.asarray(values, dtype=np.float64)
    if channel is None:
        if values.ndim != 3 or values.shape[0] != stats.mean.shape[0] or values.shape[2] != stats.mean.shape[1]:
            raise ShapeMismatch(f"cannot denormalize shape {values.shape} with stats {stats.mean.shape}")
        return values * stats.std[:, None, :] + stats.mean[:, None, :]
    if values.shape[0] != stats.mean.shape[0]:
        raise ShapeMismatch(f"cannot denormalize shape {values.shape} with stats {stats.mean.shape}")
    extra = (1,) * (values.ndim - 1)
    return values * stats.std[:, channel].reshape(-1, *extra) + stats.mean[:, channel].reshape(-1, *extra)


# -- windows -------------------------------------------------------------------


def make_windows(panel: TimeSeriesPanel, tau: int, tau_prime: int, region=None) -> list:
    """Stride-1 windows lying entirely inside ``region = (start, stop)``.

    ``x`` covers steps ``t - tau + 1 .. t`` and ``y`` the target channel at
    ``t + 1 .. t + tau_prime``.
    """
    if tau < 1 or tau_prime < 1:
        raise BadInput("tau and tau_prime must be >= 1")
    start, stop = (0, panel.n_steps) if region is None else region
    if not 0 <= start <= stop <= panel.n_steps:
        raise BadInput(f"region {region} outside [0, {panel.n_steps}]")
    length = stop - start
    if length < tau + tau_prime:
        raise RegionTooShort(f"region length {length} < tau + tau_prime = {tau + tau_prime}")
    target = panel.target
    out = []
    for t in range(start + tau - 1, stop - tau_prime):
        out.append(
            WindowSample(
                x=panel.values[:, t - tau + 1 : t + 1, :],
                y=target[:, t + 1 : t + 1 + tau_prime],
                t_origin=t,
            )
        )
    return out


def stack_windows(windows: Sequence[WindowSample]):
    """Stack windows into ``X (B, N, tau, F)`` and ``Y (B, N, tau_prime)``."""
    X = np.stack([w.x for w in windows])
    Y = np.stack([w.y for w in windows])
    return X, Y
