"""Synthetic data generators with retained ground truth.

Design 1 is a third-order user/item/context tensor with a cold-start sweep;
design 2 is a fourth-order variant with two small context modes and higher
missingness.  Both draw latent rows from a standard normal, put an ordered
sequence of constants in the nested rows, scale the factor sum by the tensor
order, and add unit-variance noise.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .factor_model import FactorModel, SubgroupMap, predict_entries
from .tensor_core import DatasetSplit, SparseTensor


@dataclass(frozen=True)
class Sim1Params:
    """Third-order design: 400 users x 1100 items x 9 contexts, rank 3."""

    pi0: float = 0.80
    phi_cs: float = 0.30
    n: Tuple[int, int, int] = (400, 1100, 9)
    m: Tuple[int, int, int] = (10, 11, 3)
    rank: int = 3
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        _validate_common(self.n, self.m, self.pi0, self.phi_cs)


@dataclass(frozen=True)
class Sim2Params:
    """Fourth-order design: users x items x 4 x 4 contexts, rank 3."""

    n_users: int = 500
    pi0: float = 0.95
    phi_cs: float = 0.30
    context_dims: Tuple[int, int] = (4, 4)
    m: Tuple[int, int, int, int] = (10, 10, 2, 2)
    rank: int = 3
    noise_sd: float = 1.0
    seed: int = 0

    @property
    def n(self):
        return (self.n_users, self.n_users) + tuple(self.context_dims)

    def __post_init__(self):
        _validate_common(self.n, self.m, self.pi0, self.phi_cs)


def _validate_common(n, m, pi0, phi_cs):
    if len(n) != len(m):
        raise ValueError("mode sizes and subgroup counts must align")
    for n_k, m_k in zip(n, m):
        if n_k % m_k != 0:
            raise ValueError(
                f"subjects ({n_k}) must divide evenly into {m_k} subgroups"
            )
    if not 0 < pi0 < 1:
        raise ValueError("missing rate must be strictly between 0 and 1")
    if not 0 <= phi_cs <= 1:
        raise ValueError("cold-start severity must be within [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    """The generating model, its scale divisor, and the noise level."""

    model: FactorModel
    divisor: float
    noise_sd: float

    def predict(self, indices) -> np.ndarray:
        return predict_entries(self.model, indices) / self.divisor


def _even_assignment(n, m):
    """Subjects 1..n split into m equal contiguous subgroups."""
    block = n // m
    return np.repeat(np.arange(1, m + 1), block)


def _sample_cells(rng, total: int, count: int) -> np.ndarray:
    """`count` distinct flat cell ids drawn uniformly from range(total)."""
    if count > total:
        raise ValueError("cannot sample more cells than the tensor holds")
    if count * 3 >= total:
        return rng.permutation(total)[:count]
    # sparse regime: overdraw with replacement, dedupe, top up as needed
    pool = np.unique(rng.integers(0, total, size=int(count * 1.15) + 16))
    while pool.size < count:
        extra = rng.integers(0, total, size=count)
        pool = np.unique(np.concatenate([pool, extra]))
    return pool[rng.permutation(pool.size)[:count]]


def _generate(n, m, rank, pi0, noise_sd, seed, nested_rows):
    dims = tuple(n)
    d = len(dims)
    rng = np.random.default_rng(seed)
    sg = SubgroupMap([_even_assignment(n_k, m_k) for n_k, m_k in zip(n, m)])
    P = [rng.standard_normal((n_k, rank)) for n_k in dims]
    Q = [np.asarray(nested_rows[k], dtype=np.float64) for k in range(d)]
    truth_model = FactorModel(P, Q, sg)
    divisor = float(d)

    total = 1
    for n_k in dims:
        total *= n_k
    count = int(round(total * (1.0 - pi0)))
    flat = _sample_cells(rng, total, count)
    idx0 = np.stack(np.unravel_index(flat, dims), axis=1).astype(np.int64)
    signal = predict_entries(truth_model, idx0 + 1) / divisor
    noise = rng.standard_normal(count) * noise_sd
    tensor = SparseTensor(idx0 + 1, signal + noise, dims)
    return tensor, sg, GroundTruth(model=truth_model, divisor=divisor,
                                   noise_sd=noise_sd)


def generate_simulation1(params: Sim1Params):
    """Returns (tensor, subgroup map, ground truth) for the third-order
    design.  Nested rows are ordered constants: users step by 1, items by
    0.6, contexts by 2, each centered around zero."""
    r = params.rank
    nested = [
        np.array([[-5.5 + u] * r for u in range(1, params.m[0] + 1)]),
        np.array([[-3.6 + 0.6 * u] * r for u in range(1, params.m[1] + 1)]),
        np.array([[-4.0 + 2.0 * u] * r for u in range(1, params.m[2] + 1)]),
    ]
    return _generate(params.n, params.m, r, params.pi0, params.noise_sd,
                     params.seed, nested)


def generate_simulation2(params: Sim2Params):
    """Returns (tensor, subgroup map, ground truth) for the fourth-order
    design.  User and item nested rows step by 1; the two context modes get
    the constant rows -0.25 and +0.25."""
    r = params.rank
    nested = [
        np.array([[-5.5 + u] * r for u in range(1, params.m[0] + 1)]),
        np.array([[-5.5 + u] * r for u in range(1, params.m[1] + 1)]),
        np.array([[-0.25] * r, [0.25] * r]),
        np.array([[-0.25] * r, [0.25] * r]),
    ]
    return _generate(params.n, params.m, r, params.pi0, params.noise_sd,
                     params.seed, nested)


def inject_cold_start(split: DatasetSplit, phi_cs: float, seed: int,
                      item_mode: int = 2,
                      drop_validation: bool = False) -> DatasetSplit:
    """Remove whole items from training until the requested fraction of test
    entries references training-absent items (within one percentage point).

    Validation entries of the removed items are kept by default, so tuning
    sees some cold entries too; drop_validation removes them as well.
    """
    if not 0 <= phi_cs <= 1:
        raise ValueError("cold-start severity must be within [0, 1]")
    if phi_cs == 0:
        return split
    k0 = item_mode - 1
    n_items = split.train.dims[k0]
    train_counts = np.bincount(split.train.idx0[:, k0], minlength=n_items)
    test_counts = np.bincount(split.test.idx0[:, k0], minlength=n_items)
    test_total = split.test.nnz
    if test_total == 0:
        raise ValueError("empty test set")

    excluded = train_counts == 0  # naturally cold items count toward phi
    frac = test_counts[excluded].sum() / test_total
    if frac > phi_cs + 0.01:
        raise ValueError(
            f"test set already has cold fraction {frac:.3f} > requested "
            f"{phi_cs}"
        )
    rng = np.random.default_rng(seed)
    # only items that actually appear in the test set move the fraction
    candidates = list(
        rng.permutation(np.flatnonzero(~excluded & (test_counts > 0))))
    while frac < phi_cs and candidates:
        i = candidates.pop(0)
        step = test_counts[i] / test_total
        if frac + step > phi_cs + 0.01:
            # too big for the remaining gap; prefer a later candidate that
            # still fits, falling back to this one when none does
            fit = next((j for j in candidates
                        if frac + test_counts[j] / test_total
                        <= phi_cs + 0.01), None)
            if fit is not None:
                candidates.remove(fit)
                candidates.insert(0, i)
                i = fit
                step = test_counts[i] / test_total
        excluded[i] = True
        frac += step
    if abs(frac - phi_cs) > 0.01:
        raise ValueError(
            f"cannot reach cold fraction {phi_cs} within one percentage "
            f"point (achieved {frac:.3f})"
        )

    def _without_items(tensor):
        keep = ~excluded[tensor.idx0[:, k0]]
        return SparseTensor(tensor.idx0[keep] + 1, tensor.values[keep],
                            tensor.dims)

    train = _without_items(split.train)
    if train.nnz == 0:
        raise ValueError("cold-start removal emptied the training set")
    validation = (_without_items(split.validation) if drop_validation
                  else split.validation)
    return DatasetSplit(train=train, validation=validation, test=split.test,
                        seed=split.seed)


def replication_seeds(base_seed: int, rep: int):
    """Deterministic (data, split, inject) seeds for one replication."""
    ss = np.random.SeedSequence((base_seed, rep))
    return tuple(int(s) for s in ss.generate_state(3))
