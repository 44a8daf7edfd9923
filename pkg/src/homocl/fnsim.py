"""False-negative view-pair rate per batch: closed form and Monte Carlo.

Convention: a batch of B source images gives M = 2B views and
M(M-1)/2 unordered distinct view pairs.  A pair is a false negative when
the two views come from different images that share a hidden class.
"""

import csv
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from .synthdata import ClassDistribution, Dataset, uniform


class SimMode(str, Enum):
    IID = "iid"
    FINITE_DATASET = "finite_dataset"


@dataclass
class FnReport:
    mean_fn_percent: float
    std_error: float
    batches_simulated: int
    mode: SimMode
    batch_size: int
    dataset_size: int = None
    params: dict = field(default_factory=dict)

    def row(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        d.update(d.pop("params"))
        return d


def pair_factor(batch_size):
    """Fraction of all view pairs that are cross-image pairs, 2(B-1)/(2B-1)."""
    return 2.0 * (batch_size - 1) / (2.0 * batch_size - 1)


def analytic_fn_rate(dist, batch_size):
    """Expected FN percent for i.i.d. class draws."""
    if batch_size < 2:
        raise ValueError("batch size must be at least 2")
    w = dist.weights if isinstance(dist, ClassDistribution) else np.asarray(dist)
    return 100.0 * pair_factor(batch_size) * float(np.dot(w, w))


def fn_pairs_in_batch(class_ids):
    """Count FN view pairs in one batch of source-image class ids."""
    counts = np.bincount(np.asarray(class_ids))
    # each pair of same-class images yields 2 x 2 cross view pairs
    return int(2 * np.sum(counts * (counts - 1)))


def _batch_fn_percent(labels, num_classes):
    """Vectorised FN percent for a (n_batches, B) label matrix."""
    nb, b = labels.shape
    offs = labels + num_classes * np.arange(nb)[:, None]
    counts = np.bincount(offs.ravel(), minlength=nb * num_classes).reshape(nb, num_classes)
    fn = 2 * np.sum(counts * (counts - 1), axis=1)
    total = b * (2 * b - 1)
    return 100.0 * fn / total


def simulate_fn_rate(source, batch_size, n_batches=1000, mode=SimMode.IID, seed=0, chunk=256):
    """Monte Carlo FN rate.

    ``source`` is a :class:`ClassDistribution` (IID mode: classes drawn
    i.i.d.) or a :class:`Dataset` / 1-D label array (FINITE_DATASET mode:
    each batch draws B distinct images uniformly).
    """
    mode = SimMode(mode)
    if batch_size < 2:
        raise ValueError("batch size must be at least 2")
    if n_batches < 1:
        raise ValueError("need at least one batch")
    rng = np.random.default_rng([seed, 0x464E])
    rates = np.empty(n_batches)
    n_pop = None
    if mode is SimMode.IID:
        if not isinstance(source, ClassDistribution):
            raise ValueError("IID mode needs a ClassDistribution")
        k = len(source)
        cdf = np.cumsum(source.weights)
        cdf[-1] = 1.0
        for s in range(0, n_batches, chunk):
            nb = min(chunk, n_batches - s)
            labels = np.searchsorted(cdf, rng.random((nb, batch_size)), side="right")
            rates[s:s + nb] = _batch_fn_percent(np.minimum(labels, k - 1), k)
    else:
        labels_all = source.class_ids if isinstance(source, Dataset) else np.asarray(source)
        labels_all = np.asarray(labels_all, dtype=np.int64)
        n_pop = labels_all.size
        if n_pop < batch_size:
            raise ValueError(f"dataset of {n_pop} images cannot fill a batch of {batch_size}")
        k = int(labels_all.max()) + 1
        for i in range(n_batches):
            idx = rng.choice(n_pop, size=batch_size, replace=False)
            rates[i] = _batch_fn_percent(labels_all[idx][None, :], k)[0]
    se = float(rates.std(ddof=1) / np.sqrt(n_batches)) if n_batches > 1 else float("nan")
    return FnReport(float(rates.mean()), se, n_batches, mode, batch_size, n_pop)


def sweep(axis, grid, batch_size=128, num_classes=100, dataset_size=None, dist=None,
          n_batches=1000, seed=0):
    """FN rate along one axis: "datasetSize", "batchSize" or "classCount".

    Dataset-size sweeps draw a finite label population of each size from
    ``dist`` (default uniform over ``num_classes``) and sample batches
    without replacement; the other axes use i.i.d. draws.
    """
    if not len(grid):
        raise ValueError("empty sweep grid")
    reports = []
    base = dist or uniform(num_classes)
    for i, val in enumerate(grid):
        val = int(val)
        if axis in ("datasetSize", "dataset_size"):
            rng = np.random.default_rng([seed, 0x5357, i])
            pop = rng.choice(len(base), size=val, p=base.weights)
            r = simulate_fn_rate(pop, batch_size, n_batches, SimMode.FINITE_DATASET, seed + i)
            r.params = {"axis": "datasetSize", "value": val,
                        "analytic": analytic_fn_rate(base, batch_size)}
        elif axis in ("batchSize", "batch_size"):
            r = simulate_fn_rate(base, val, n_batches, SimMode.IID, seed + i)
            r.params = {"axis": "batchSize", "value": val, "analytic": analytic_fn_rate(base, val)}
        elif axis in ("classCount", "class_count"):
            d = uniform(val)
            r = simulate_fn_rate(d, batch_size, n_batches, SimMode.IID, seed + i)
            r.params = {"axis": "classCount", "value": val,
                        "analytic": analytic_fn_rate(d, batch_size)}
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        reports.append(r)
    return reports


def write_reports_csv(reports, path_or_file):
    rows = [r.row() for r in reports]
    keys = list(rows[0].keys()) if rows else []
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    finally:
        if own:
            fh.close()
