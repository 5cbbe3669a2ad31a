"""Per-individual naive estimators of usual level and variability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LongitudinalDataset


def naive_level(values) -> float:
    """Arithmetic mean of an individual's repeated measurements."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("naive_level needs at least one measurement")
    return float(values.mean())


def naive_sd(values) -> float:
    """Within-individual SD with the n denominator (not n-1).

    The n denominator reproduces the conventional person-by-person estimate
    this library is benchmarked against; it is deliberately not the sample SD.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("naive_sd needs at least two measurements")
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


@dataclass(frozen=True)
class NaiveTable:
    """Stage-one estimates from the naive method; slope kept for duck-typing."""

    individual_id: np.ndarray
    level: np.ndarray
    sd: np.ndarray
    excluded: tuple
    slope: None = None

    def __len__(self):
        return len(self.individual_id)


def naive_table(
    long: LongitudinalDataset, min_measurements: int = 2, sample_sd: bool = False
) -> NaiveTable:
    """Naive (level, sd) per individual; short series are excluded and listed.

    sample_sd=True switches the variability column to the n-1 denominator.
    The replication harness uses that variant: it is what reproduces the
    reference simulation tables, while the documented naive_sd formula above
    keeps the n denominator.
    """
    if min_measurements < 2:
        raise ValueError("min_measurements must be >= 2 (sd undefined below that)")
    ids = []
    levels = []
    sds = []
    excluded = []
    order = np.argsort(long.individual_id, kind="stable")
    sorted_ids = long.individual_id[order]
    sorted_vals = long.value[order]
    bounds = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1], True])
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ind = int(sorted_ids[lo])
        vals = sorted_vals[lo:hi]
        if len(vals) < min_measurements:
            excluded.append(ind)
            continue
        ids.append(ind)
        levels.append(naive_level(vals))
        sd = naive_sd(vals)
        if sample_sd:
            sd *= np.sqrt(len(vals) / (len(vals) - 1.0))
        sds.append(sd)
    return NaiveTable(
        individual_id=np.array(ids, dtype=np.int64),
        level=np.array(levels, dtype=float),
        sd=np.array(sds, dtype=float),
        excluded=tuple(excluded),
    )
