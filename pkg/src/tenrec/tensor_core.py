"""Sparse order-d tensors stored as observed (index, value) entries.

Indices are 1-based at the API boundary and in files; internally everything
is 0-based numpy.  Per-mode inverted indexes are built once at construction
so that per-subject observation lookup is O(1) + slice.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class TensorFormatError(ValueError):
    """Raised for malformed tensor or label files (carries file context)."""


@dataclass(frozen=True)
class TensorSchema:
    """Column layout for tensor files.

    dims, when given, overrides any "dims:" header in the file.  delimiter
    None means auto-detect (tab if present on the first record, else comma).
    """

    dims: Optional[Sequence[int]] = None
    delimiter: Optional[str] = None


class SparseTensor:
    """Observed entries of an order-d tensor.

    Parameters
    ----------
    indices : (nnz, d) array-like of 1-based integer indices
    values : (nnz,) array-like of finite reals
    dims : sequence of d mode sizes
    """

    def __init__(self, indices, values, dims):
        dims = tuple(int(n) for n in dims)
        if len(dims) < 2:
            raise ValueError("tensor order must be at least 2")
        if any(n < 1 for n in dims):
            raise ValueError("every mode size must be positive")
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim == 1 and idx.size == 0:
            idx = idx.reshape(0, len(dims))
        if idx.ndim != 2 or idx.shape[1] != len(dims):
            raise ValueError(
                f"indices must have shape (nnz, {len(dims)}), got {idx.shape}"
            )
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape != (idx.shape[0],):
            raise ValueError("values length must match number of index tuples")
        if not np.all(np.isfinite(vals)):
            raise ValueError("values must be finite")
        if idx.size:
            lo = idx.min(axis=0)
            hi = idx.max(axis=0)
            if lo.min() < 1 or np.any(hi > np.asarray(dims)):
                k = int(np.argmax((lo < 1) | (hi > np.asarray(dims))))
                raise ValueError(
                    f"index out of bounds in mode {k + 1}: "
                    f"valid range is 1..{dims[k]}"
                )
        self.dims = dims
        self.order = len(dims)
        self.idx0 = idx - 1
        self.values = vals
        self.idx0.setflags(write=False)
        self.values.setflags(write=False)
        self._check_duplicates()
        self._build_mode_index()

    def _check_duplicates(self):
        if self.nnz < 2:
            return
        total = 1
        for n in self.dims:
            total *= n
        if total < 2**62:
            flat = np.ravel_multi_index(self.idx0.T, self.dims)
            uniq = np.unique(flat)
            if uniq.size != self.nnz:
                raise ValueError("duplicate index tuples are not allowed")
        else:
            order = np.lexsort(self.idx0.T[::-1])
            sorted_idx = self.idx0[order]
            if np.any(np.all(sorted_idx[1:] == sorted_idx[:-1], axis=1)):
                raise ValueError("duplicate index tuples are not allowed")

    def _build_mode_index(self):
        self._mode_order = []
        self._mode_offsets = []
        for k in range(self.order):
            col = self.idx0[:, k]
            order = np.argsort(col, kind="stable").astype(np.int64)
            counts = np.bincount(col, minlength=self.dims[k])
            offsets = np.zeros(self.dims[k] + 1, dtype=np.int64)
            np.cumsum(counts, out=offsets[1:])
            self._mode_order.append(order)
            self._mode_offsets.append(offsets)

    @property
    def nnz(self):
        return self.values.shape[0]

    @property
    def indices(self):
        """1-based copy of the index tuples, (nnz, d)."""
        return self.idx0 + 1

    def entry(self, e: int):
        """Entry e as (1-based index tuple, value)."""
        return tuple(int(v) + 1 for v in self.idx0[e]), float(self.values[e])

    def subject_entry_ids(self, k: int, i_k: int) -> np.ndarray:
        """Positions of the entries whose mode-k index equals i_k (1-based)."""
        if not 1 <= k <= self.order:
            raise ValueError(f"mode {k} out of range 1..{self.order}")
        if not 1 <= i_k <= self.dims[k - 1]:
            raise ValueError(
                f"subject {i_k} out of range 1..{self.dims[k - 1]} in mode {k}"
            )
        off = self._mode_offsets[k - 1]
        return self._mode_order[k - 1][off[i_k - 1]: off[i_k]]

    def observation_counts(self, k: int) -> np.ndarray:
        """|observations per subject| for mode k, shape (n_k,)."""
        if not 1 <= k <= self.order:
            raise ValueError(f"mode {k} out of range 1..{self.order}")
        off = self._mode_offsets[k - 1]
        return np.diff(off)

    def __repr__(self):
        return f"SparseTensor(dims={self.dims}, nnz={self.nnz})"


@dataclass(frozen=True)
class ObservationSet:
    """All observed entries for one subject of one mode."""

    mode: int
    subject: int
    entry_ids: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __len__(self):
        return self.entry_ids.shape[0]


def mode_observations(tensor: SparseTensor, k: int, i_k: int) -> ObservationSet:
    """Entries whose k-th index equals i_k.  Empty for cold subjects."""
    ids = tensor.subject_entry_ids(k, i_k)
    return ObservationSet(
        mode=k,
        subject=i_k,
        entry_ids=ids,
        indices=tensor.idx0[ids] + 1,
        values=tensor.values[ids],
    )


@dataclass(frozen=True)
class ScalingInfo:
    """Per-category location/scale pairs from standardize_by_group.

    mode is the 1-based mode whose subjects carry the category labels.
    """

    mode: int
    stats: dict = field(default_factory=dict)  # label -> (mean, sd)

    def __post_init__(self):
        for label, (m, s) in self.stats.items():
            if not s > 0:
                raise ValueError(f"category {label!r} has non-positive sd")


def _labels_for(tensor, group_of, mode):
    """Label per entry, via the entry's mode-`mode` subject."""
    col = tensor.idx0[:, mode - 1] + 1
    if isinstance(group_of, dict):
        missing = [int(i) for i in np.unique(col) if int(i) not in group_of]
        if missing:
            raise ValueError(f"unlabeled subject(s) in mode {mode}: {missing[:5]}")
        return np.array([group_of[int(i)] for i in col])
    arr = np.asarray(group_of)
    if arr.shape[0] != tensor.dims[mode - 1]:
        raise ValueError(
            f"label array length {arr.shape[0]} does not match mode {mode} "
            f"size {tensor.dims[mode - 1]}"
        )
    return arr[col - 1]


def standardize_by_group(tensor: SparseTensor, group_of, mode: int = 1):
    """Standardize values to mean 0 / sd 1 within each category of subjects.

    group_of maps 1-based subject index of `mode` to a category label; either
    a dict or an array of length n_mode.  Uses the n-1 sample sd.  Returns the
    transformed tensor and a ScalingInfo sufficient to invert or to apply the
    same transform to held-out data.
    """
    labels = _labels_for(tensor, group_of, mode)
    stats = {}
    new_vals = np.array(tensor.values)
    for label in np.unique(labels):
        mask = labels == label
        n = int(mask.sum())
        if n < 2:
            raise ValueError(f"category {label!r} has fewer than 2 observations")
        m = float(tensor.values[mask].mean())
        s = float(tensor.values[mask].std(ddof=1))
        if s == 0.0:
            raise ValueError(f"category {label!r} has zero variance")
        stats[label if not isinstance(label, np.generic) else label.item()] = (m, s)
        new_vals[mask] = (tensor.values[mask] - m) / s
    out = SparseTensor(tensor.idx0 + 1, new_vals, tensor.dims)
    return out, ScalingInfo(mode=mode, stats=stats)


def apply_scaling(tensor: SparseTensor, group_of, info: ScalingInfo) -> SparseTensor:
    """Apply a previously computed ScalingInfo to another tensor."""
    labels = _labels_for(tensor, group_of, info.mode)
    new_vals = np.array(tensor.values)
    for label in np.unique(labels):
        key = label if not isinstance(label, np.generic) else label.item()
        if key not in info.stats:
            raise ValueError(f"category {key!r} has no scaling stats")
        m, s = info.stats[key]
        mask = labels == label
        new_vals[mask] = (tensor.values[mask] - m) / s
    return SparseTensor(tensor.idx0 + 1, new_vals, tensor.dims)


def invert_scaling(tensor: SparseTensor, group_of, info: ScalingInfo) -> SparseTensor:
    """Undo apply_scaling / standardize_by_group on a tensor's values."""
    labels = _labels_for(tensor, group_of, info.mode)
    new_vals = np.array(tensor.values)
    for label in np.unique(labels):
        key = label if not isinstance(label, np.generic) else label.item()
        if key not in info.stats:
            raise ValueError(f"category {key!r} has no scaling stats")
        m, s = info.stats[key]
        mask = labels == label
        new_vals[mask] = tensor.values[mask] * s + m
    return SparseTensor(tensor.idx0 + 1, new_vals, tensor.dims)


@dataclass(frozen=True)
class DatasetSplit:
    train: SparseTensor
    validation: SparseTensor
    test: SparseTensor
    seed: int


def _part_sizes(nnz, ratios):
    # largest-remainder apportionment: sizes within one entry of exact shares
    exact = [r * nnz for r in ratios]
    base = [int(np.floor(e)) for e in exact]
    short = nnz - sum(base)
    frac_order = sorted(range(len(ratios)), key=lambda i: exact[i] - base[i],
                        reverse=True)
    for i in frac_order[:short]:
        base[i] += 1
    return base


def split_dataset(tensor: SparseTensor, ratios, seed: int) -> DatasetSplit:
    """Uniformly random train/validation/test partition, seeded."""
    ratios = tuple(float(x) for x in ratios)
    if len(ratios) != 3 or any(x <= 0 for x in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    sizes = _part_sizes(tensor.nnz, ratios)
    if any(s == 0 for s in sizes):
        raise ValueError("a split part would be empty; not enough entries")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(tensor.nnz)
    parts = []
    start = 0
    for s in sizes:
        ids = perm[start:start + s]
        parts.append(SparseTensor(tensor.idx0[ids] + 1, tensor.values[ids],
                                  tensor.dims))
        start += s
    return DatasetSplit(train=parts[0], validation=parts[1], test=parts[2],
                        seed=seed)


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _parse_dims_header(line: str):
    body = line.split(":", 1)[1]
    try:
        return tuple(int(tok) for tok in body.replace("\t", ",").split(",") if tok.strip())
    except ValueError as exc:
        raise TensorFormatError(f"bad dims header: {line.strip()!r}") from exc


def load_sparse_tensor(path, schema: Optional[TensorSchema] = None) -> SparseTensor:
    """Read a delimited tensor file: optional "dims: n1,...,nd" header, then
    one record per entry as d indices followed by the value.

    Mode sizes must come from either the header or schema.dims; there is no
    silent inference from the data.
    """
    schema = schema or TensorSchema()
    with open(path) as fh:
        lines = fh.readlines()
    dims = tuple(schema.dims) if schema.dims is not None else None
    start = 0
    if lines and lines[0].lstrip().lower().startswith("dims:"):
        header_dims = _parse_dims_header(lines[0])
        if dims is None:
            dims = header_dims
        start = 1
    if dims is None:
        raise TensorFormatError(
            f"{path}: mode sizes undeclared (no dims header and no schema)"
        )
    d = len(dims)
    data_lines = [(i + 1, ln) for i, ln in enumerate(lines[start:], start=start)
                  if ln.strip()]
    if not data_lines:
        return SparseTensor(np.empty((0, d), dtype=np.int64), [], dims)
    delim = schema.delimiter or _detect_delimiter(data_lines[0][1])
    idx = np.empty((len(data_lines), d), dtype=np.int64)
    vals = np.empty(len(data_lines))
    for row, (lineno, ln) in enumerate(data_lines):
        toks = ln.strip().split(delim)
        if len(toks) != d + 1:
            raise TensorFormatError(
                f"{path}:{lineno}: expected {d + 1} fields, got {len(toks)}"
            )
        try:
            for k in range(d):
                idx[row, k] = int(toks[k])
            vals[row] = float(toks[d])
        except ValueError as exc:
            raise TensorFormatError(f"{path}:{lineno}: malformed record") from exc
        if not np.isfinite(vals[row]):
            raise TensorFormatError(f"{path}:{lineno}: non-finite value")
        for k in range(d):
            if not 1 <= idx[row, k] <= dims[k]:
                raise TensorFormatError(
                    f"{path}:{lineno}: index {idx[row, k]} out of bounds "
                    f"for mode {k + 1} (1..{dims[k]})"
                )
    try:
        return SparseTensor(idx, vals, dims)
    except ValueError as exc:
        raise TensorFormatError(f"{path}: {exc}") from exc


def save_sparse_tensor(tensor: SparseTensor, path, delimiter: str = "\t",
                       with_header: bool = True):
    """Write a tensor in the delimited format load_sparse_tensor reads."""
    with open(path, "w") as fh:
        if with_header:
            fh.write("dims: " + ",".join(str(n) for n in tensor.dims) + "\n")
        idx1 = tensor.idx0 + 1
        for e in range(tensor.nnz):
            fields = [str(int(v)) for v in idx1[e]]
            fields.append("%.17g" % tensor.values[e])
            fh.write(delimiter.join(fields) + "\n")
