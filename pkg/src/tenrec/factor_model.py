"""The multilayer factor model.

Each mode k carries a latent matrix P^k (one row per subject) and a small set
of unique nested rows q^k (one per subgroup).  A subject's effective factor
row is p + q of its subgroup, and a cell's prediction is the sum over
components of the product of effective rows across modes.
"""

import itertools
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .tensor_core import SparseTensor


class ModelFormatError(ValueError):
    """Raised for malformed model files."""


class SubgroupMap:
    """Per-mode assignment of every subject to exactly one subgroup.

    labels_per_mode: one array per mode, length n_k, of 1-based subgroup
    labels.  m_k is taken as the largest label (or the declared per-mode
    minimum in `m`, if larger); intermediate labels may be empty subgroups
    (they simply have no members).
    """

    def __init__(self, labels_per_mode, m=None):
        codes = []
        found_m = []
        for k, labels in enumerate(labels_per_mode):
            arr = np.asarray(labels, dtype=np.int64)
            if arr.ndim != 1 or arr.size == 0:
                raise ValueError(f"mode {k + 1}: labels must be a nonempty 1-d array")
            if arr.min() < 1:
                raise ValueError(f"mode {k + 1}: subgroup labels must be >= 1")
            codes.append(arr - 1)
            declared = 0 if m is None else int(m[k])
            found_m.append(max(int(arr.max()), declared))
        m = found_m
        self._codes = tuple(codes)
        self.m = tuple(m)
        self.order = len(codes)
        self.sizes = tuple(len(c) for c in codes)
        for c in self._codes:
            c.setflags(write=False)

    def codes0(self, k: int) -> np.ndarray:
        """0-based subgroup code per subject for mode k (1-based k)."""
        return self._codes[k - 1]

    def labels(self, k: int) -> np.ndarray:
        return self._codes[k - 1] + 1

    def members(self, k: int, u: int) -> np.ndarray:
        """1-based subjects of subgroup u in mode k."""
        return np.flatnonzero(self._codes[k - 1] == u - 1) + 1

    def group_sizes(self, k: int) -> np.ndarray:
        return np.bincount(self._codes[k - 1], minlength=self.m[k - 1])

    def restrict(self, modes) -> "SubgroupMap":
        """New map keeping only the given 1-based modes, in the given order."""
        return SubgroupMap([self.labels(k) for k in modes])

    @classmethod
    def trivial(cls, dims) -> "SubgroupMap":
        """Everyone in subgroup 1, per mode."""
        return cls([np.ones(n, dtype=np.int64) for n in dims])

    def validate_for_fit(self):
        """Nested updates need at least two members behind every subgroup."""
        for k in range(1, self.order + 1):
            sizes = self.group_sizes(k)
            bad = np.flatnonzero(sizes < 2)
            if bad.size:
                raise ValueError(
                    f"mode {k}: subgroup(s) {list(bad + 1)} have fewer than "
                    f"2 members"
                )

    def __eq__(self, other):
        if not isinstance(other, SubgroupMap):
            return NotImplemented
        return (self.order == other.order and
                all(np.array_equal(a, b) for a, b in zip(self._codes, other._codes)))


class FactorModel:
    """Latent + nested factors for every mode, plus cold-subject flags.

    P: list of (n_k, r) arrays.  Q: list of (m_k, r) arrays holding each
    subgroup's unique nested row.  cold: optional list of boolean (n_k,)
    arrays; flagged subjects must have an all-zero latent row.
    """

    def __init__(self, P: List[np.ndarray], Q: List[np.ndarray],
                 subgroups: SubgroupMap, cold: Optional[list] = None):
        if len(P) != subgroups.order or len(Q) != subgroups.order:
            raise ValueError("P, Q and subgroup map must cover the same modes")
        self.P = [np.array(p, dtype=np.float64) for p in P]
        self.Q = [np.array(q, dtype=np.float64) for q in Q]
        r = self.P[0].shape[1]
        for k in range(subgroups.order):
            n_k = subgroups.sizes[k]
            if self.P[k].shape != (n_k, r):
                raise ValueError(
                    f"mode {k + 1}: latent shape {self.P[k].shape} does not "
                    f"match ({n_k}, {r})"
                )
            if self.Q[k].shape != (subgroups.m[k], r):
                raise ValueError(
                    f"mode {k + 1}: nested shape {self.Q[k].shape} does not "
                    f"match ({subgroups.m[k]}, {r})"
                )
        self.subgroups = subgroups
        self.d = subgroups.order
        self.r = r
        self.dims = subgroups.sizes
        if cold is None:
            cold = [np.zeros(n, dtype=bool) for n in self.dims]
        self.cold = [np.asarray(c, dtype=bool) for c in cold]
        for k in range(self.d):
            if self.cold[k].shape != (self.dims[k],):
                raise ValueError(f"mode {k + 1}: cold flag length mismatch")
            if self.cold[k].any() and np.any(self.P[k][self.cold[k]] != 0.0):
                raise ValueError(
                    f"mode {k + 1}: cold subjects must have zero latent rows"
                )

    def nested_expanded(self, k: int) -> np.ndarray:
        """Nested rows broadcast to one row per subject, (n_k, r)."""
        return self.Q[k - 1][self.subgroups.codes0(k)]

    def combined(self, k: int) -> np.ndarray:
        """Effective factor matrix P^k + expanded nested rows."""
        return self.P[k - 1] + self.nested_expanded(k)

    def copy(self) -> "FactorModel":
        return FactorModel([p.copy() for p in self.P],
                           [q.copy() for q in self.Q],
                           self.subgroups,
                           [c.copy() for c in self.cold])


def predict_entry(model: FactorModel, index) -> float:
    """Predicted utility at one 1-based index tuple."""
    if len(index) != model.d:
        raise ValueError(f"index must have {model.d} components")
    for k, i in enumerate(index):
        if not 1 <= i <= model.dims[k]:
            raise ValueError(
                f"index {i} out of range 1..{model.dims[k]} in mode {k + 1}"
            )
    prod = np.ones(model.r)
    for k in range(model.d):
        i0 = index[k] - 1
        code = model.subgroups.codes0(k + 1)[i0]
        prod = prod * (model.P[k][i0] + model.Q[k][code])
    return float(prod.sum())


def predict_entries(model: FactorModel, indices) -> np.ndarray:
    """Vectorized predict_entry over an (n, d) array of 1-based indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[1] != model.d:
        raise ValueError(f"indices must have shape (n, {model.d})")
    for k in range(model.d):
        col = idx[:, k]
        if col.size and (col.min() < 1 or col.max() > model.dims[k]):
            raise ValueError(f"index out of range in mode {k + 1}")
    prod = np.ones((idx.shape[0], model.r))
    for k in range(model.d):
        prod *= model.combined(k + 1)[idx[:, k] - 1]
    return prod.sum(axis=1)


def penalized_loss(model: FactorModel, tensor: SparseTensor, lam: float) -> float:
    """Squared-error on the observed entries plus ridge penalties.

    Latent matrices are penalized entrywise; each unique nested row once.
    """
    if lam < 0:
        raise ValueError("penalty weight must be nonnegative")
    if tensor.order != model.d or tensor.dims != tuple(model.dims):
        raise ValueError("tensor dims do not match model dims")
    resid = tensor.values - predict_entries(model, tensor.idx0 + 1)
    sse = float(resid @ resid)
    pen = sum(float(np.sum(p * p)) for p in model.P)
    pen += sum(float(np.sum(q * q)) for q in model.Q)
    return sse + lam * pen


def column_energy(model: FactorModel) -> np.ndarray:
    """Per-component energy: sum over modes of the squared column norm of the
    effective factor matrix."""
    energy = np.zeros(model.r)
    for k in range(1, model.d + 1):
        b = model.combined(k)
        energy += np.sum(b * b, axis=0)
    return energy


def rearrange_columns(model: FactorModel) -> FactorModel:
    """Permute components into descending energy order (ties keep their
    original relative order).  Predictions are unchanged."""
    energy = column_energy(model)
    order = np.argsort(-energy, kind="stable")
    return FactorModel([p[:, order] for p in model.P],
                       [q[:, order] for q in model.Q],
                       model.subgroups,
                       [c.copy() for c in model.cold])


@dataclass(frozen=True)
class IndeterminacyTransform:
    """A prediction-preserving reparameterization.

    kind "scaling": scales holds one (r,) diagonal per mode whose per-column
    product across modes is 1.
    kind "permutation": perm is a 1-based permutation of 1..r.
    kind "addition": deltas holds one (n_k, r) offset per mode, constant
    within each subgroup; added to P and subtracted from the nested rows.
    """

    kind: str
    scales: Optional[list] = None
    perm: Optional[np.ndarray] = None
    deltas: Optional[list] = None


def apply_indeterminacy(model: FactorModel,
                        t: IndeterminacyTransform) -> FactorModel:
    if t.kind == "scaling":
        scales = [np.asarray(s, dtype=np.float64) for s in t.scales]
        if len(scales) != model.d or any(s.shape != (model.r,) for s in scales):
            raise ValueError("need one length-r diagonal per mode")
        prod = np.ones(model.r)
        for s in scales:
            prod = prod * s
        if np.max(np.abs(prod - 1.0)) > 1e-9:
            raise ValueError(
                "per-column product of scaling diagonals must equal 1"
            )
        P = [p * s for p, s in zip(model.P, scales)]
        Q = [q * s for q, s in zip(model.Q, scales)]
        return FactorModel(P, Q, model.subgroups, [c.copy() for c in model.cold])
    if t.kind == "permutation":
        perm = np.asarray(t.perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(1, model.r + 1)):
            raise ValueError("perm must be a permutation of 1..r")
        order = perm - 1
        P = [p[:, order] for p in model.P]
        Q = [q[:, order] for q in model.Q]
        return FactorModel(P, Q, model.subgroups, [c.copy() for c in model.cold])
    if t.kind == "addition":
        deltas = [np.asarray(dk, dtype=np.float64) for dk in t.deltas]
        P = []
        Q = []
        for k in range(model.d):
            dk = deltas[k]
            if dk.shape != model.P[k].shape:
                raise ValueError(f"mode {k + 1}: delta shape mismatch")
            codes = model.subgroups.codes0(k + 1)
            uniq = np.zeros_like(model.Q[k])
            for u in range(model.subgroups.m[k]):
                members = np.flatnonzero(codes == u)
                if members.size == 0:
                    continue
                first = dk[members[0]]
                if np.any(dk[members] != first):
                    raise ValueError(
                        f"mode {k + 1}: delta not constant within subgroup {u + 1}"
                    )
                uniq[u] = first
            P.append(model.P[k] + dk)
            Q.append(model.Q[k] - uniq)
        # latent rows moved away from zero, so cold provenance no longer holds
        return FactorModel(P, Q, model.subgroups, cold=None)
    raise ValueError(f"unknown transform kind {t.kind!r}")


def kruskal_rank(matrix, tol: float = 1e-10) -> int:
    """Largest k such that every k columns are linearly independent.

    Rank of each column subset is judged from its singular values relative to
    the subset's largest one.  Enumeration is exhaustive, so this is meant for
    small r (at most 12 columns).
    """
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("matrix must be nonempty and 2-dimensional")
    n, r = M.shape
    if r > 12:
        raise ValueError("subset enumeration supports at most 12 columns")
    best = 0
    for k in range(1, min(n, r) + 1):
        ok = True
        for cols in itertools.combinations(range(r), k):
            s = np.linalg.svd(M[:, cols], compute_uv=False)
            if s[0] == 0.0 or s[-1] <= tol * s[0]:
                ok = False
                break
        if not ok:
            break
        best = k
    return best


def identifiability_check(model: FactorModel):
    """Sufficient uniqueness condition: the per-mode k-ranks of the effective
    factor matrices must sum to at least 2r + (d - 1).

    Returns (satisfied, report) where the report carries the per-mode k-ranks.
    """
    k_ranks = [kruskal_rank(model.combined(k)) for k in range(1, model.d + 1)]
    threshold = 2 * model.r + (model.d - 1)
    total = int(sum(k_ranks))
    ok = total >= threshold
    report = {
        "k_ranks": k_ranks,
        "sum": total,
        "threshold": threshold,
        "satisfied": ok,
    }
    return ok, report


# --- subgroup files ------------------------------------------------------

def save_subgroup_map(sg: SubgroupMap, path):
    """Write per-mode subject/label assignments: a "mode: k" line starts each
    mode's section, then one subject<TAB>label record per subject."""
    with open(path, "w") as fh:
        for k in range(1, sg.order + 1):
            fh.write(f"mode: {k}\n")
            for i, u in enumerate(sg.labels(k), start=1):
                fh.write(f"{i}\t{u}\n")


def load_subgroup_map(path, dims) -> SubgroupMap:
    """Read a subgroup assignment file.

    Multi-mode files use "mode: k" section headers.  A file without headers
    is accepted for order-1 use (mode 1 implied); order-d tensors need all d
    sections.  Records are two columns, tab or comma separated.
    """
    dims = tuple(int(n) for n in dims)
    sections: dict = {}
    current = None
    with open(path) as fh:
        for lineno, ln in enumerate(fh, start=1):
            s = ln.strip()
            if not s:
                continue
            if s.lower().startswith("mode:"):
                try:
                    current = int(s.split(":", 1)[1])
                except ValueError as exc:
                    raise ModelFormatError(
                        f"{path}:{lineno}: bad mode header") from exc
                sections.setdefault(current, [])
                continue
            delim = "\t" if "\t" in s else ","
            toks = s.split(delim)
            if len(toks) != 2:
                raise ModelFormatError(
                    f"{path}:{lineno}: expected 2 fields, got {len(toks)}")
            try:
                subj, label = int(toks[0]), int(toks[1])
            except ValueError as exc:
                raise ModelFormatError(
                    f"{path}:{lineno}: subject and label must be integers"
                ) from exc
            sections.setdefault(current, []).append((lineno, subj, label))
    if None in sections:
        if len(sections) == 1:
            sections[1] = sections.pop(None)
        else:
            raise ModelFormatError(
                f"{path}: records appear before the first 'mode:' header")
    missing = [k for k in range(1, len(dims) + 1) if k not in sections]
    if missing:
        raise ModelFormatError(
            f"{path}: missing 'mode: k' section(s) for mode(s) {missing}")
    labels_per_mode = []
    for k in range(1, len(dims) + 1):
        n_k = dims[k - 1]
        arr = np.zeros(n_k, dtype=np.int64)
        seen = np.zeros(n_k, dtype=bool)
        for lineno, subj, label in sections[k]:
            if not 1 <= subj <= n_k:
                raise ModelFormatError(
                    f"{path}:{lineno}: subject {subj} out of range 1..{n_k} "
                    f"in mode {k}")
            if seen[subj - 1]:
                raise ModelFormatError(
                    f"{path}:{lineno}: subject {subj} assigned twice in "
                    f"mode {k}")
            if label < 1:
                raise ModelFormatError(
                    f"{path}:{lineno}: labels must be positive")
            seen[subj - 1] = True
            arr[subj - 1] = label
        if not seen.all():
            first = int(np.flatnonzero(~seen)[0]) + 1
            raise ModelFormatError(
                f"{path}: mode {k} subject {first} has no subgroup")
        labels_per_mode.append(arr)
    return SubgroupMap(labels_per_mode)


# --- model files ---------------------------------------------------------

_MAGIC = "multilayer-factor-model v1"


def save_model(model: FactorModel, path):
    """Write a model as self-describing text.

    Floats use 17 significant digits so that save/load round-trips are
    bit-stable.
    """
    sg = model.subgroups
    with open(path, "w") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"order: {model.d}\n")
        fh.write(f"rank: {model.r}\n")
        fh.write("dims: " + ",".join(str(n) for n in model.dims) + "\n")
        fh.write("subgroups: " + ",".join(str(m) for m in sg.m) + "\n")
        for k in range(1, model.d + 1):
            fh.write(f"latent {k}\n")
            for row in model.P[k - 1]:
                fh.write("\t".join("%.17g" % v for v in row) + "\n")
            fh.write(f"nested {k}\n")
            for row in model.Q[k - 1]:
                fh.write("\t".join("%.17g" % v for v in row) + "\n")
            fh.write(f"assign {k}\n")
            labels = sg.labels(k)
            for i, u in enumerate(labels, start=1):
                fh.write(f"{i}\t{u}\n")
            fh.write(f"cold {k}\n")
            ids = np.flatnonzero(model.cold[k - 1]) + 1
            fh.write(" ".join(str(int(i)) for i in ids) + "\n")


def _expect(lines, pos, want, path):
    if pos >= len(lines) or lines[pos].strip() != want:
        got = lines[pos].strip() if pos < len(lines) else "<eof>"
        raise ModelFormatError(f"{path}:{pos + 1}: expected {want!r}, got {got!r}")
    return pos + 1


def _read_matrix(lines, pos, shape, path):
    rows = np.empty(shape)
    for i in range(shape[0]):
        toks = lines[pos].strip().split("\t")
        if len(toks) != shape[1]:
            raise ModelFormatError(
                f"{path}:{pos + 1}: expected {shape[1]} values, got {len(toks)}"
            )
        try:
            rows[i] = [float(t) for t in toks]
        except ValueError as exc:
            raise ModelFormatError(f"{path}:{pos + 1}: bad float") from exc
        pos += 1
    return rows, pos


def _header_value(lines, pos, key, path):
    line = lines[pos].strip() if pos < len(lines) else "<eof>"
    if not line.startswith(key + ":"):
        raise ModelFormatError(f"{path}:{pos + 1}: expected '{key}:' header")
    return line.split(":", 1)[1].strip(), pos + 1


def load_model(path) -> FactorModel:
    with open(path) as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    try:
        return _parse_model(lines, path)
    except ModelFormatError:
        raise
    except (IndexError, ValueError) as exc:
        raise ModelFormatError(f"{path}: truncated or malformed model file "
                               f"({exc})") from exc


def _parse_model(lines, path) -> FactorModel:
    pos = 1
    val, pos = _header_value(lines, pos, "order", path)
    d = int(val)
    val, pos = _header_value(lines, pos, "rank", path)
    r = int(val)
    val, pos = _header_value(lines, pos, "dims", path)
    dims = tuple(int(t) for t in val.split(","))
    val, pos = _header_value(lines, pos, "subgroups", path)
    m = tuple(int(t) for t in val.split(","))
    if len(dims) != d or len(m) != d:
        raise ModelFormatError(f"{path}: dims/subgroups do not match order")
    P, Q, labels, cold = [], [], [], []
    for k in range(1, d + 1):
        pos = _expect(lines, pos, f"latent {k}", path)
        mat, pos = _read_matrix(lines, pos, (dims[k - 1], r), path)
        P.append(mat)
        pos = _expect(lines, pos, f"nested {k}", path)
        mat, pos = _read_matrix(lines, pos, (m[k - 1], r), path)
        Q.append(mat)
        pos = _expect(lines, pos, f"assign {k}", path)
        lab = np.empty(dims[k - 1], dtype=np.int64)
        for i in range(dims[k - 1]):
            toks = lines[pos].strip().split("\t")
            if len(toks) != 2:
                raise ModelFormatError(f"{path}:{pos + 1}: bad assignment row")
            subj, u = int(toks[0]), int(toks[1])
            if subj != i + 1:
                raise ModelFormatError(
                    f"{path}:{pos + 1}: assignment rows must list subjects "
                    f"in order"
                )
            lab[i] = u
            pos += 1
        labels.append(lab)
        pos = _expect(lines, pos, f"cold {k}", path)
        flags = np.zeros(dims[k - 1], dtype=bool)
        toks = lines[pos].strip().split()
        for t in toks:
            flags[int(t) - 1] = True
        cold.append(flags)
        pos += 1
    sg = SubgroupMap(labels, m=m)
    return FactorModel(P, Q, sg, cold)
