"""Comparison methods sharing the block solver's machinery.

fit_cpd is the multilayer fit with every nested row frozen at zero.
fit_gcpd partitions the data by subgroup cell and fits one CP model per
nonempty cell.  fit_mf collapses to the first two modes and ignores the
rest.  grand_mean_baseline predicts the training mean everywhere.
"""

import json
import os
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .factor_model import (FactorModel, SubgroupMap, load_model,
                           predict_entries, save_model, save_subgroup_map,
                           load_subgroup_map)
from .rem_solver import FitConfig, FitResult, fit_rem
from .tensor_core import SparseTensor


def fit_cpd(tensor: SparseTensor, config: FitConfig) -> FitResult:
    """Penalized CP decomposition: the multilayer solver with a single
    subgroup per mode and nested rows pinned at zero."""
    sg = SubgroupMap.trivial(tensor.dims)
    return fit_rem(tensor, sg, replace(config, freeze_nested=True))


def _mode_ranks(sg: SubgroupMap):
    """Per mode: each subject's 0-based position within its subgroup's
    ascending member list."""
    ranks = []
    for k in range(1, sg.order + 1):
        codes = sg.codes0(k)
        r = np.empty(codes.shape[0], dtype=np.int64)
        for u in range(sg.m[k - 1]):
            members = np.flatnonzero(codes == u)
            r[members] = np.arange(members.size)
        ranks.append(r)
    return ranks


def _cell_strides(m):
    strides = np.ones(len(m), dtype=np.int64)
    for k in range(1, len(m)):
        strides[k] = strides[k - 1] * m[k - 1]
    return strides


@dataclass
class GcpdResult:
    """Per-cell CP models keyed by flattened subgroup-cell code, plus the
    grand-mean fallback for cells with no training data."""

    cells: Dict[int, FactorModel]
    variant: str  # "cross" or "mode1"
    grand_mean: float
    subgroups: SubgroupMap
    dims: Tuple[int, ...]
    rank: int
    iterations_total: int = 0
    converged_all: bool = True

    def __post_init__(self):
        self._ranks = _mode_ranks(self.subgroups)
        self._strides = _cell_strides(self.subgroups.m)
        self._sizes = [self.subgroups.group_sizes(k)
                       for k in range(1, self.subgroups.order + 1)]

    def _cell_codes(self, idx0):
        if self.variant == "mode1":
            return self.subgroups.codes0(1)[idx0[:, 0]]
        code = np.zeros(idx0.shape[0], dtype=np.int64)
        for k in range(self.subgroups.order):
            code += self.subgroups.codes0(k + 1)[idx0[:, k]] * self._strides[k]
        return code

    def _local_indices(self, idx0):
        local = np.empty_like(idx0)
        for k in range(idx0.shape[1]):
            if self.variant == "mode1" and k > 0:
                local[:, k] = idx0[:, k]
            else:
                local[:, k] = self._ranks[k][idx0[:, k]]
        return local

    def predict(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        idx0 = idx - 1
        codes = self._cell_codes(idx0)
        local = self._local_indices(idx0)
        out = np.full(idx.shape[0], self.grand_mean)
        for code in np.unique(codes):
            model = self.cells.get(int(code))
            if model is None:
                continue
            rows = np.flatnonzero(codes == code)
            out[rows] = predict_entries(model, local[rows] + 1)
        return out


def fit_gcpd(tensor: SparseTensor, subgroups: SubgroupMap, config: FitConfig,
             cells: str = "cross") -> GcpdResult:
    """Fit an independent CP model on every nonempty subgroup cell.

    cells="cross" forms cells from the cross-product of all modes' subgroup
    labels; cells="mode1" slices by the first mode's subgroups only.  Test
    entries in cells with no training data fall back to the training grand
    mean.
    """
    if cells not in ("cross", "mode1"):
        raise ValueError("cells must be 'cross' or 'mode1'")
    if tensor.dims != subgroups.sizes:
        raise ValueError("tensor dims do not match subgroup map sizes")
    if tensor.nnz == 0:
        raise ValueError("cannot fit an empty tensor")
    result = GcpdResult(cells={}, variant=cells,
                        grand_mean=float(tensor.values.mean()),
                        subgroups=subgroups, dims=tensor.dims,
                        rank=config.rank)
    codes = result._cell_codes(tensor.idx0)
    local = result._local_indices(tensor.idx0)
    order = np.argsort(codes, kind="stable")
    distinct, starts = np.unique(codes[order], return_index=True)
    bounds = np.append(starts, codes.shape[0])
    single_cell = distinct.shape[0] == 1
    for c, code in enumerate(distinct):
        ids = order[bounds[c]:bounds[c + 1]]
        if cells == "cross":
            cell_labels = _decode_cell(int(code), subgroups.m)
            local_dims = tuple(int(result._sizes[k][cell_labels[k]])
                               for k in range(subgroups.order))
        else:
            u1 = int(code)
            local_dims = ((int(result._sizes[0][u1]),) + tensor.dims[1:])
        sub = SparseTensor(local[ids] + 1, tensor.values[ids], local_dims)
        if single_cell:
            seed = config.seed
        else:
            seed = int(np.random.SeedSequence(
                (config.seed, int(code))).generate_state(1)[0])
        res = fit_cpd(sub, replace(config, seed=seed))
        result.cells[int(code)] = res.model
        result.iterations_total += res.iterations
        result.converged_all = result.converged_all and res.converged
    return result


def _decode_cell(code: int, m):
    labels = []
    for m_k in m:
        labels.append(code % m_k)
        code //= m_k
    return labels


@dataclass
class MfResult:
    """Order-2 model fit on the first two modes; prediction ignores any
    remaining context indices."""

    inner: FitResult
    dims: Tuple[int, ...]

    def predict(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        return self.inner.predict(idx[:, :2])

    @property
    def model(self):
        return self.inner.model

    @property
    def loss_trajectory(self):
        return self.inner.loss_trajectory

    @property
    def converged(self):
        return self.inner.converged

    @property
    def iterations(self):
        return self.inner.iterations


def fit_mf(tensor: SparseTensor, config: FitConfig,
           subgroups: Optional[SubgroupMap] = None) -> MfResult:
    """Matrix factorization: collapse to mode-1 x mode-2 by averaging the
    observed values that share the first two indices, then fit the order-2
    model.  When a subgroup map is given, its first two modes supply nested
    factors; otherwise a plain CP fit is used."""
    if tensor.order < 2:
        raise ValueError("need at least two modes")
    if tensor.order == 2:
        t2 = tensor
        sg2 = subgroups
    else:
        n1, n2 = tensor.dims[0], tensor.dims[1]
        flat = tensor.idx0[:, 0] * n2 + tensor.idx0[:, 1]
        uniq, inv = np.unique(flat, return_inverse=True)
        sums = np.bincount(inv, weights=tensor.values)
        counts = np.bincount(inv)
        idx2 = np.stack([uniq // n2, uniq % n2], axis=1)
        t2 = SparseTensor(idx2 + 1, sums / counts, (n1, n2))
        sg2 = subgroups.restrict((1, 2)) if subgroups is not None else None
    if sg2 is not None:
        inner = fit_rem(t2, sg2, config)
    else:
        inner = fit_cpd(t2, config)
    return MfResult(inner=inner, dims=tensor.dims)


@dataclass(frozen=True)
class GrandMean:
    """Constant predictor at the training mean."""

    mean: float

    def predict(self, indices) -> np.ndarray:
        return np.full(np.asarray(indices).shape[0], self.mean)


def grand_mean_baseline(train: SparseTensor) -> GrandMean:
    if train.nnz == 0:
        raise ValueError("cannot take the mean of an empty training set")
    return GrandMean(mean=float(train.values.mean()))


# --- on-disk form for the groupwise models -------------------------------

def save_gcpd(result: GcpdResult, outdir):
    os.makedirs(os.path.join(outdir, "cells"), exist_ok=True)
    meta = {
        "variant": result.variant,
        "grand_mean": result.grand_mean,
        "rank": result.rank,
        "dims": list(result.dims),
        "cells": sorted(result.cells),
        "iterations_total": result.iterations_total,
        "converged_all": result.converged_all,
    }
    with open(os.path.join(outdir, "gcpd.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    save_subgroup_map(result.subgroups, os.path.join(outdir, "groups.tsv"))
    for code, model in result.cells.items():
        save_model(model, os.path.join(outdir, "cells", f"cell_{code}.txt"))


def load_gcpd(outdir) -> GcpdResult:
    with open(os.path.join(outdir, "gcpd.json")) as fh:
        meta = json.load(fh)
    dims = tuple(meta["dims"])
    sg = load_subgroup_map(os.path.join(outdir, "groups.tsv"), dims)
    cells = {}
    for code in meta["cells"]:
        cells[int(code)] = load_model(
            os.path.join(outdir, "cells", f"cell_{code}.txt"))
    return GcpdResult(cells=cells, variant=meta["variant"],
                      grand_mean=meta["grand_mean"], subgroups=sg, dims=dims,
                      rank=meta["rank"],
                      iterations_total=meta["iterations_total"],
                      converged_all=meta["converged_all"])
