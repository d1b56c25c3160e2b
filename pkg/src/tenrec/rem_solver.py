"""Two-step maximum-block-improvement solver.

Each iteration computes a ridge-update candidate for every mode's latent
block, commits only the one with the largest relative loss improvement, then
does the same for the nested blocks.  Stops when the best available
improvement in an iteration falls below the tolerance.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import _kernels
from .factor_model import FactorModel, SubgroupMap, rearrange_columns
from .tensor_core import SparseTensor


class NumericalError(RuntimeError):
    """Non-finite values or a failed solve during fitting."""


@dataclass(frozen=True)
class FitConfig:
    """Solver hyperparameters.

    freeze_nested keeps every nested row at zero and skips nested updates,
    which reduces the model to a plain penalized CP decomposition.
    n_workers > 1 splits accumulation over entry chunks; results are
    deterministic for a fixed worker count.
    """

    rank: int
    lam: float
    tol: float = 1e-4
    max_iter: int = 1000
    seed: int = 0
    init_scale: float = 0.1
    n_workers: int = 1
    freeze_nested: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.init_scale < 0:
            raise ValueError("init_scale must be nonnegative")
        if self.n_workers < 1:
            raise ValueError("n_workers must be at least 1")


@dataclass(frozen=True)
class BlockSystem:
    """Design matrix and response for one subject's ridge subproblem."""

    design: np.ndarray
    response: np.ndarray


@dataclass
class StepRecord:
    iteration: int
    kind: str  # "latent" or "nested"
    mode: int
    ratio: float
    loss: float


@dataclass
class FitResult:
    model: FactorModel
    loss_trajectory: np.ndarray
    steps: List[StepRecord]
    iterations: int
    converged: bool
    notes: List[str] = field(default_factory=list)

    def predict(self, indices) -> np.ndarray:
        from .factor_model import predict_entries
        return predict_entries(self.model, indices)


def block_improvement(loss_before: float, loss_after: float) -> float:
    """Relative improvement 1 - after/before of a candidate block update."""
    if not loss_before > 0:
        raise ValueError("baseline loss must be positive")
    return 1.0 - loss_after / loss_before


def assemble_block_system(model: FactorModel, tensor: SparseTensor, k: int,
                          i_k: int) -> BlockSystem:
    """Design rows for subject i_k of mode k: column j is the product of the
    other modes' effective factor entries.  Empty for cold subjects."""
    if tuple(model.dims) != tensor.dims:
        raise ValueError("model dims do not match tensor dims")
    ids = tensor.subject_entry_ids(k, i_k)
    Z = np.ones((ids.shape[0], model.r))
    for l in range(1, model.d + 1):
        if l == k:
            continue
        Z *= model.combined(l)[tensor.idx0[ids, l - 1]]
    return BlockSystem(design=Z, response=np.array(tensor.values[ids]))


class _State:
    """Preassembled arrays shared by every block update of one fit."""

    def __init__(self, tensor: SparseTensor, subgroups: SubgroupMap):
        if tensor.dims != subgroups.sizes:
            raise ValueError(
                f"tensor dims {tensor.dims} do not match subgroup map sizes "
                f"{subgroups.sizes}"
            )
        self.d = tensor.order
        self.dims = tensor.dims
        self.y = tensor.values
        offsets = np.zeros(self.d, dtype=np.int64)
        offsets[1:] = np.cumsum(tensor.dims)[:-1]
        self.offsets = offsets
        self.gidx = np.ascontiguousarray(tensor.idx0 + offsets[None, :])
        self.subj = [np.ascontiguousarray(tensor.idx0[:, k])
                     for k in range(self.d)]
        self.gcode = [np.ascontiguousarray(
            subgroups.codes0(k + 1)[tensor.idx0[:, k]]) for k in range(self.d)]
        self.group_obs = [np.bincount(self.gcode[k], minlength=subgroups.m[k])
                          for k in range(self.d)]
        self.subgroups = subgroups

    def bcat_from(self, P, Q):
        total = int(sum(self.dims))
        r = P[0].shape[1]
        bcat = np.empty((total, r))
        for k in range(self.d):
            o = self.offsets[k]
            bcat[o:o + self.dims[k]] = P[k] + Q[k][self.subgroups.codes0(k + 1)]
        return bcat


def _accumulate(state: _State, bcat, k0: int, offrows, agg, n_agg: int,
                pool: Optional[ThreadPoolExecutor], n_workers: int):
    nnz = state.y.shape[0]
    args = (state.gidx, state.subj[k0], agg, state.y, bcat, k0, offrows,
            n_agg)
    if pool is None or n_workers == 1 or nnz < 4 * n_workers:
        return _kernels.accumulate(*args, 0, nnz)
    bounds = np.linspace(0, nnz, n_workers + 1).astype(np.int64)
    futures = [pool.submit(_kernels.accumulate, *args, bounds[i],
                           bounds[i + 1]) for i in range(n_workers)]
    parts = [f.result() for f in futures]
    ata = parts[0][0]
    atb = parts[0][1]
    rss = parts[0][2]
    for a, b, s in parts[1:]:
        ata += a
        atb += b
        rss += s
    return ata, atb, rss


def _solve_and_score(ata, atb, rss, lam):
    """Ridge solve per group, and the exact residual sum the candidate rows
    attain: rss - 2 rows.atb + rows' ata rows."""
    r = atb.shape[1]
    A = ata + lam * np.eye(r)
    try:
        rows = np.linalg.solve(A, atb[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular block system: {exc}") from exc
    if not np.all(np.isfinite(rows)):
        raise NumericalError("non-finite block solution")
    quad = np.einsum("gi,gij,gj->g", rows, ata, rows)
    sse = float(rss.sum() - 2.0 * np.sum(rows * atb) + quad.sum())
    return rows, sse


def _candidate(state, bcat, P, Q, k0, lam, kind, pool, n_workers):
    """Candidate rows for one block plus the residual sum they would leave."""
    if kind == "latent":
        offrows = Q[k0][state.subgroups.codes0(k0 + 1)]
        agg = state.subj[k0]
        n_agg = state.dims[k0]
    else:
        offrows = P[k0]
        agg = state.gcode[k0]
        n_agg = state.subgroups.m[k0]
    offrows = np.ascontiguousarray(offrows)
    ata, atb, rss = _accumulate(state, bcat, k0, offrows, agg, n_agg, pool,
                                n_workers)
    return _solve_and_score(ata, atb, rss, lam)


def update_latent_block(model: FactorModel, tensor: SparseTensor, k: int,
                        lam: float) -> np.ndarray:
    """Closed-form ridge update of every mode-k latent row, holding all other
    blocks fixed.  Subjects with no observations get the zero row."""
    if not lam > 0:
        raise ValueError("penalty weight must be positive for block updates")
    _check_finite_model(model)
    state = _State(tensor, model.subgroups)
    bcat = state.bcat_from(model.P, model.Q)
    rows, _ = _candidate(state, bcat, model.P, model.Q, k - 1, lam, "latent",
                         None, 1)
    return rows


def update_nested_block(model: FactorModel, tensor: SparseTensor, k: int,
                        lam: float) -> np.ndarray:
    """Closed-form ridge update of every mode-k unique nested row, stacking
    the member subjects' systems.  Subgroups with no observations get the
    zero row."""
    if not lam > 0:
        raise ValueError("penalty weight must be positive for block updates")
    _check_finite_model(model)
    state = _State(tensor, model.subgroups)
    if np.any(state.group_obs[k - 1] == 0):
        empty = np.flatnonzero(state.group_obs[k - 1] == 0) + 1
        warnings.warn(
            f"mode {k}: subgroup(s) {list(empty)} have no observations; "
            f"their nested rows are set to zero"
        )
    bcat = state.bcat_from(model.P, model.Q)
    rows, _ = _candidate(state, bcat, model.P, model.Q, k - 1, lam, "nested",
                         None, 1)
    return rows


def _check_finite_model(model: FactorModel):
    for mat in list(model.P) + list(model.Q):
        if not np.all(np.isfinite(mat)):
            raise NumericalError("non-finite factor values")


def fit_rem(tensor: SparseTensor, subgroups: SubgroupMap,
            config: FitConfig) -> FitResult:
    """Fit the multilayer model by two-step maximum block improvement.

    Per iteration: candidate latent updates are computed for every mode and
    only the best-improving one is committed; then the same for nested
    updates.  Stops when the best improvement ratio seen in an iteration
    drops below config.tol, or at config.max_iter.
    """
    if tensor.nnz == 0:
        raise ValueError("cannot fit an empty tensor")
    if not config.lam > 0:
        raise ValueError("fitting requires a positive penalty weight")
    if not np.all(np.isfinite(tensor.values)):
        raise NumericalError("non-finite tensor values")
    if not config.freeze_nested:
        subgroups.validate_for_fit()
    notes: List[str] = []
    state = _State(tensor, subgroups)
    d, r = state.d, config.rank

    rng = np.random.default_rng(config.seed)
    P = [rng.standard_normal((n, r)) * config.init_scale for n in state.dims]
    if config.freeze_nested:
        Q = [np.zeros((m, r)) for m in subgroups.m]
    else:
        Q = [rng.standard_normal((m, r)) * config.init_scale
             for m in subgroups.m]
    cold = []
    for k in range(d):
        flags = tensor.observation_counts(k + 1) == 0
        P[k][flags] = 0.0
        cold.append(flags)
        if flags.all():
            notes.append(f"mode {k + 1}: every subject is unobserved")
    if not config.freeze_nested:
        for k in range(d):
            empty = np.flatnonzero(state.group_obs[k] == 0) + 1
            if empty.size:
                notes.append(
                    f"mode {k + 1}: subgroup(s) {list(empty)} have no "
                    f"observations; nested rows pinned at zero"
                )

    bcat = state.bcat_from(P, Q)
    pen_p = np.array([float(np.sum(p * p)) for p in P])
    pen_q = np.array([float(np.sum(q * q)) for q in Q])
    lam = config.lam
    loss = float(_kernels.sse(state.gidx, state.y, bcat, r)) \
        + lam * (pen_p.sum() + pen_q.sum())
    if not np.isfinite(loss):
        raise NumericalError("non-finite initial loss")

    trajectory = [loss]
    steps: List[StepRecord] = []
    converged = False
    iterations = 0
    pool = (ThreadPoolExecutor(max_workers=config.n_workers)
            if config.n_workers > 1 else None)
    try:
        for it in range(1, config.max_iter + 1):
            iterations = it
            best_ratio = -np.inf
            for kind in ("latent", "nested"):
                if kind == "nested" and config.freeze_nested:
                    continue
                cands = []
                for k0 in range(d):
                    rows, sse = _candidate(state, bcat, P, Q, k0, lam, kind,
                                           pool, config.n_workers)
                    row_pen = float(np.sum(rows * rows))
                    if kind == "latent":
                        cand_loss = sse + lam * (
                            pen_p.sum() - pen_p[k0] + row_pen + pen_q.sum())
                    else:
                        cand_loss = sse + lam * (
                            pen_p.sum() + pen_q.sum() - pen_q[k0] + row_pen)
                    if not np.isfinite(cand_loss):
                        raise NumericalError(
                            f"non-finite loss at iteration {it}, {kind} "
                            f"mode {k0 + 1}"
                        )
                    ratio = block_improvement(loss, cand_loss)
                    cands.append((ratio, k0, rows, cand_loss, row_pen))
                ratio, k0, rows, cand_loss, row_pen = max(
                    cands, key=lambda c: (c[0], -c[1]))
                best_ratio = max(best_ratio, max(c[0] for c in cands))
                if ratio > 0.0:
                    if kind == "latent":
                        P[k0] = rows
                        pen_p[k0] = row_pen
                    else:
                        Q[k0] = rows
                        pen_q[k0] = row_pen
                    o = state.offsets[k0]
                    bcat[o:o + state.dims[k0]] = (
                        P[k0] + Q[k0][subgroups.codes0(k0 + 1)])
                    loss = cand_loss
                    trajectory.append(loss)
                    steps.append(StepRecord(iteration=it, kind=kind,
                                            mode=k0 + 1, ratio=ratio,
                                            loss=loss))
            if best_ratio < config.tol:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    model = FactorModel(P, Q, subgroups, cold)
    model = rearrange_columns(model)
    return FitResult(model=model, loss_trajectory=np.asarray(trajectory),
                     steps=steps, iterations=iterations, converged=converged,
                     notes=notes)


def save_run_log(result: FitResult, path):
    """One line per committed block: iteration, block tag, improvement ratio,
    loss after the commit.  Line zero carries the initial loss."""
    with open(path, "w") as fh:
        fh.write("iteration\tblock\tratio\tloss\n")
        fh.write("0\tinit\t-\t%.17g\n" % result.loss_trajectory[0])
        for s in result.steps:
            fh.write("%d\t%s:%d\t%.17g\t%.17g\n"
                     % (s.iteration, s.kind, s.mode, s.ratio, s.loss))
