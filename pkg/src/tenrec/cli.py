"""Command-line front end.

Verbs: simulate, fit, predict, evaluate, benchmark, inspect.  Exit codes:
0 success, 1 I/O problems (missing or malformed files), 2 usage errors,
3 numerical failures.  All randomness flows from --seed; given identical
inputs, flags and seeds, outputs are byte-identical.  A --config file of
key=value lines supplies defaults that explicit flags override.
"""

import argparse
import json
import os
import sys

import numpy as np

from .baselines import fit_cpd, fit_gcpd, fit_mf, load_gcpd, save_gcpd
from .evalbench import (KNOWN_METHODS, BenchmarkSpec, mae, rmse,
                        run_benchmark)
from .factor_model import (ModelFormatError, load_model, load_subgroup_map,
                           identifiability_check, predict_entries,
                           save_model, save_subgroup_map)
from .rem_solver import FitConfig, NumericalError, fit_rem, save_run_log
from .simgen import (Sim1Params, Sim2Params, generate_simulation1,
                     generate_simulation2, inject_cold_start,
                     replication_seeds)
from .tensor_core import (TensorFormatError, load_sparse_tensor,
                          save_sparse_tensor, split_dataset)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# verb -> {config key: (attr name, coercion)}
def _bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


_CONFIG_KEYS = {
    "simulate": {"design": ("design", str), "pi0": ("pi0", float),
                 "phi": ("phi", float), "seed": ("seed", int),
                 "n-users": ("n_users", int), "noise-sd": ("noise_sd", float)},
    "fit": {"method": ("method", str), "rank": ("rank", int),
            "lambda": ("lam", float), "tol": ("tol", float),
            "max-iter": ("max_iter", int), "seed": ("seed", int),
            "init-scale": ("init_scale", float), "threads": ("threads", int),
            "gcpd-cells": ("gcpd_cells", str), "mf-plain": ("mf_plain", _bool)},
    "predict": {},
    "evaluate": {},
    "benchmark": {"design": ("design", str), "pi0": ("pi0", float),
                  "phi": ("phi", float), "methods": ("methods", str),
                  "grid": ("grid", str), "reps": ("reps", int),
                  "seed": ("seed", int), "rank": ("rank", int),
                  "n-users": ("n_users", int), "tol": ("tol", float),
                  "max-iter": ("max_iter", int), "threads": ("threads", int),
                  "noise-sd": ("noise_sd", float),
                  "gcpd-cells": ("gcpd_cells", str)},
    "inspect": {},
}

_BUILTIN_DEFAULTS = {
    "simulate": {"phi": 0.3, "seed": 0, "n_users": 500, "noise_sd": 1.0},
    "fit": {"rank": 3, "tol": 1e-4, "max_iter": 1000, "seed": 0,
            "init_scale": 0.1, "threads": 1, "gcpd_cells": "cross",
            "mf_plain": False},
    "predict": {},
    "evaluate": {},
    "benchmark": {"methods": "rem,cpd,gcpd,mf,gmi", "grid": "1:11",
                  "reps": 10, "seed": 0, "rank": 3, "n_users": 500,
                  "tol": 1e-4, "max_iter": 1000, "threads": 1,
                  "noise_sd": 1.0, "gcpd_cells": "cross"},
    "inspect": {},
}


def _read_config(path):
    values = {}
    with open(path) as fh:
        for lineno, ln in enumerate(fh, start=1):
            s = ln.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise _UsageError(f"{path}:{lineno}: expected key=value")
            key, val = s.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _resolve(args, verb):
    """Fill unset options from the config file, then builtin defaults."""
    file_values = _read_config(args.config) if args.config else {}
    known = _CONFIG_KEYS[verb]
    for key in file_values:
        if key not in known:
            raise _UsageError(f"unknown config key {key!r} for verb {verb}")
    for key, (attr, coerce) in known.items():
        if getattr(args, attr, None) is None and key in file_values:
            setattr(args, attr, coerce(file_values[key]))
    for attr, default in _BUILTIN_DEFAULTS[verb].items():
        if getattr(args, attr, None) is None:
            setattr(args, attr, default)


def _parse_grid(text):
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        return tuple(float(v) for v in range(int(lo), int(hi) + 1))
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _parse_methods(text):
    methods = tuple(tok.strip() for tok in text.split(",") if tok.strip())
    for m in methods:
        if m not in KNOWN_METHODS:
            raise _UsageError(f"unknown method {m!r}")
    return methods


def _build_parser():
    parser = _Parser(prog="tenrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--design", choices=("sim1", "sim2"))
    p.add_argument("--pi0", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-users", type=int, dest="n_users")
    p.add_argument("--noise-sd", type=float, dest="noise_sd")
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("fit", help="fit a model on a training tensor")
    p.add_argument("--method", choices=("rem", "cpd", "gcpd", "mf"))
    p.add_argument("--rank", type=int)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--train", required=True)
    p.add_argument("--groups")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-scale", type=float, dest="init_scale")
    p.add_argument("--threads", type=int)
    p.add_argument("--gcpd-cells", choices=("cross", "mode1"),
                   dest="gcpd_cells")
    p.add_argument("--mf-plain", action="store_true", default=None,
                   dest="mf_plain")
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("predict", help="predict at listed indices")
    p.add_argument("--model", required=True)
    p.add_argument("--indices", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("evaluate", help="score a model on a test tensor")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("benchmark", help="replicated generator benchmark")
    p.add_argument("--design", choices=("sim1", "sim2"))
    p.add_argument("--pi0", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--methods")
    p.add_argument("--grid")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--n-users", type=int, dest="n_users")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--threads", type=int)
    p.add_argument("--noise-sd", type=float, dest="noise_sd")
    p.add_argument("--gcpd-cells", choices=("cross", "mode1"),
                   dest="gcpd_cells")
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("inspect", help="summarize a dataset or model")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--identifiability", action="store_true")
    p.add_argument("--config")
    return parser


def _cmd_simulate(args):
    if args.design is None:
        raise _UsageError("simulate requires --design")
    if args.design not in ("sim1", "sim2"):
        raise _UsageError(f"unknown design {args.design!r}")
    if args.pi0 is None:
        args.pi0 = 0.80 if args.design == "sim1" else 0.95
    data_seed, split_seed, inject_seed = replication_seeds(args.seed, 0)
    if args.design == "sim1":
        params = Sim1Params(pi0=args.pi0, phi_cs=args.phi,
                            noise_sd=args.noise_sd, seed=data_seed)
        tensor, sg, truth = generate_simulation1(params)
    else:
        params = Sim2Params(n_users=args.n_users, pi0=args.pi0,
                            phi_cs=args.phi, noise_sd=args.noise_sd,
                            seed=data_seed)
        tensor, sg, truth = generate_simulation2(params)
    split = split_dataset(tensor, (0.5, 0.25, 0.25), split_seed)
    split = inject_cold_start(split, args.phi, inject_seed)
    os.makedirs(args.out, exist_ok=True)
    save_sparse_tensor(split.train, os.path.join(args.out, "train.tsv"))
    save_sparse_tensor(split.validation,
                       os.path.join(args.out, "validation.tsv"))
    save_sparse_tensor(split.test, os.path.join(args.out, "test.tsv"))
    save_subgroup_map(sg, os.path.join(args.out, "groups.tsv"))
    save_model(truth.model, os.path.join(args.out, "truth_model.txt"))
    manifest = {
        "design": args.design,
        "pi0": args.pi0,
        "phi_cs": args.phi,
        "seed": args.seed,
        "derived_seeds": {"data": data_seed, "split": split_seed,
                          "inject": inject_seed},
        "noise_sd": args.noise_sd,
        "dims": list(tensor.dims),
        "entries": {"train": split.train.nnz,
                    "validation": split.validation.nnz,
                    "test": split.test.nnz},
        "divisor": truth.divisor,
        "files": ["train.tsv", "validation.tsv", "test.tsv", "groups.tsv",
                  "truth_model.txt"],
    }
    if args.design == "sim2":
        manifest["n_users"] = args.n_users
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {args.design} dataset to {args.out} "
          f"(train={split.train.nnz}, validation={split.validation.nnz}, "
          f"test={split.test.nnz})")
    return 0


def _cmd_fit(args):
    if args.method is None:
        raise _UsageError("fit requires --method")
    if args.method not in ("rem", "cpd", "gcpd", "mf"):
        raise _UsageError(f"unknown fit method {args.method!r}")
    if args.lam is None:
        raise _UsageError("fit requires --lambda")
    train = load_sparse_tensor(args.train)
    subgroups = None
    if args.groups:
        subgroups = load_subgroup_map(args.groups, train.dims)
    if args.method in ("rem", "gcpd") and subgroups is None:
        raise _UsageError(f"--method {args.method} requires --groups")
    config = FitConfig(rank=args.rank, lam=args.lam, tol=args.tol,
                       max_iter=args.max_iter, seed=args.seed,
                       init_scale=args.init_scale, n_workers=args.threads)
    os.makedirs(args.out, exist_ok=True)
    manifest = {
        "method": args.method,
        "rank": args.rank,
        "lambda": args.lam,
        "tol": args.tol,
        "max_iter": args.max_iter,
        "seed": args.seed,
        "init_scale": args.init_scale,
        "threads": args.threads,
        "dims": list(train.dims),
        "train": args.train,
        "groups": args.groups,
    }
    if args.method == "gcpd":
        result = fit_gcpd(train, subgroups, config, cells=args.gcpd_cells)
        save_gcpd(result, args.out)
        manifest.update({"cells": args.gcpd_cells,
                         "fitted_cells": len(result.cells),
                         "iterations_total": result.iterations_total,
                         "converged_all": result.converged_all,
                         "grand_mean": result.grand_mean})
        summary = (f"fit gcpd: {len(result.cells)} cells, "
                   f"{result.iterations_total} total iterations")
    else:
        if args.method == "rem":
            result = fit_rem(train, subgroups, config)
        elif args.method == "cpd":
            result = fit_cpd(train, config)
        else:
            sg_used = None if args.mf_plain else subgroups
            result = fit_mf(train, config, sg_used)
        inner = result.inner if args.method == "mf" else result
        save_model(inner.model, os.path.join(args.out, "model.txt"))
        save_run_log(inner, os.path.join(args.out, "run_log.tsv"))
        manifest.update({"iterations": inner.iterations,
                         "converged": inner.converged,
                         "final_loss": inner.loss_trajectory[-1],
                         "notes": inner.notes})
        summary = (f"fit {args.method}: loss={inner.loss_trajectory[-1]:.6g} "
                   f"iterations={inner.iterations} "
                   f"converged={inner.converged}")
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(summary)
    return 0


class _ModelPredictor:
    def __init__(self, model):
        self.model = model
        self.dims = tuple(model.dims)

    def predict(self, indices):
        return predict_entries(self.model, indices)


class _MfPredictor:
    def __init__(self, model, dims):
        self.model = model
        self.dims = tuple(dims)

    def predict(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return predict_entries(self.model, idx[:, :2])


def _load_fitted(path):
    """A predictor with .predict and .dims from a model file or fit
    directory."""
    if os.path.isfile(path):
        return _ModelPredictor(load_model(path))
    manifest_path = os.path.join(path, "manifest.json")
    method = "rem"
    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        method = manifest.get("method", "rem")
    if method == "gcpd":
        return load_gcpd(path)
    model = load_model(os.path.join(path, "model.txt"))
    if method == "mf":
        return _MfPredictor(model, tuple(manifest.get("dims", model.dims)))
    return _ModelPredictor(model)


def _load_index_file(path, d, dims):
    rows = []
    with open(path) as fh:
        for lineno, ln in enumerate(fh, start=1):
            s = ln.strip()
            if not s:
                continue
            if s.lower().startswith("dims:"):
                continue
            toks = s.replace("\t", ",").split(",")
            if len(toks) < d:
                raise TensorFormatError(
                    f"{path}:{lineno}: expected {d} indices")
            try:
                row = [int(t) for t in toks[:d]]
            except ValueError as exc:
                raise TensorFormatError(
                    f"{path}:{lineno}: malformed index") from exc
            for k, i in enumerate(row):
                if not 1 <= i <= dims[k]:
                    raise TensorFormatError(
                        f"{path}:{lineno}: index {i} out of bounds for "
                        f"mode {k + 1} (1..{dims[k]})")
            rows.append(row)
    if not rows:
        raise TensorFormatError(f"{path}: no indices found")
    return np.asarray(rows, dtype=np.int64)


def _cmd_predict(args):
    fitted = _load_fitted(args.model)
    indices = _load_index_file(args.indices, len(fitted.dims), fitted.dims)
    preds = fitted.predict(indices)
    with open(args.out, "w") as fh:
        for row, value in zip(indices, preds):
            fh.write("\t".join(str(int(i)) for i in row)
                     + "\t%.17g\n" % value)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def _cmd_evaluate(args):
    fitted = _load_fitted(args.model)
    test = load_sparse_tensor(args.test)
    if tuple(test.dims) != tuple(fitted.dims):
        raise ValueError(
            f"test dims {test.dims} do not match model dims {fitted.dims}")
    preds = fitted.predict(test.idx0 + 1)
    lines = ["rmse=%.17g" % rmse(preds, test.values),
             "mae=%.17g" % mae(preds, test.values)]
    for ln in lines:
        print(ln)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def _cmd_benchmark(args):
    if args.design is None:
        raise _UsageError("benchmark requires --design")
    if args.pi0 is None:
        args.pi0 = 0.80 if args.design == "sim1" else 0.95
    if args.phi is None:
        args.phi = 0.3
    spec = BenchmarkSpec(design=args.design, pi0=args.pi0, phi_cs=args.phi,
                         methods=_parse_methods(args.methods),
                         lambda_grid=_parse_grid(args.grid),
                         rank=args.rank, replications=args.reps,
                         base_seed=args.seed, n_users=args.n_users,
                         noise_sd=args.noise_sd, tol=args.tol,
                         max_iter=args.max_iter, n_workers=args.threads,
                         gcpd_cells=args.gcpd_cells)
    report = run_benchmark(spec)
    report.save(args.out)
    sys.stdout.write(report.to_table())
    return 0


def _cmd_inspect(args):
    if (args.data is None) == (args.model is None):
        raise _UsageError("inspect needs exactly one of --data or --model")
    if args.data:
        tensor = load_sparse_tensor(args.data)
        total = 1
        for n in tensor.dims:
            total *= n
        print(f"order: {tensor.order}")
        print(f"dims: {','.join(str(n) for n in tensor.dims)}")
        print(f"entries: {tensor.nnz}")
        print(f"density: {tensor.nnz / total:.6g}")
        print(f"value mean: {tensor.values.mean():.6g}")
        print(f"value sd: {tensor.values.std(ddof=1):.6g}")
        for k in range(1, tensor.order + 1):
            cold = int((tensor.observation_counts(k) == 0).sum())
            print(f"mode {k}: {cold} unobserved subject(s)")
        return 0
    fitted = _load_fitted(args.model)
    if not isinstance(fitted, _ModelPredictor):
        print("model directory holds a composite model; basic info only")
        print(f"dims: {','.join(str(n) for n in fitted.dims)}")
        return 0
    model = fitted.model
    print(f"order: {model.d}")
    print(f"rank: {model.r}")
    print(f"dims: {','.join(str(n) for n in model.dims)}")
    print(f"subgroups: {','.join(str(m) for m in model.subgroups.m)}")
    for k in range(1, model.d + 1):
        print(f"mode {k}: {int(model.cold[k - 1].sum())} cold subject(s)")
    if args.identifiability:
        ok, report = identifiability_check(model)
        print(f"k-ranks: {','.join(str(v) for v in report['k_ranks'])}")
        print(f"condition: sum {report['sum']} >= {report['threshold']} "
              f"-> {'satisfied' if ok else 'not satisfied'}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "benchmark": _cmd_benchmark,
    "inspect": _cmd_inspect,
}


def dispatch(argv) -> int:
    """Parse arguments, run the verb, and map failures to exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise _UsageError("a verb is required (try --help)")
        _resolve(args, args.verb)
        return _COMMANDS[args.verb](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (TensorFormatError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else exc
        print(f"error: missing file: {name}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
