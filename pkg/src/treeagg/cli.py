"""Command-line entry point: ``treeagg {fit,cv,simulate,verify,tree,replay}``.

Exit codes: 0 success, 1 input error, 2 the solver hit ``--max-iter``
without converging.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .admm import FitConfig, fit, make_grid
from .experiments import (PAPER_TAUS, ExperimentSpec, SignalWindowError, SweepConfig,
                          c_tilde, run_distortion_sweep, run_scenario_sweep, verify_ols_failure,
                          verify_prediction_bound, verify_support_recovery)
from .linop import CountDesign, normalize_for_theory
from .model_selection import kfold_cv
from .tree import (LINKAGES, TreeError, build_tree_hclust, cut_tree, format_float,
                   read_tree_csv, write_tree_csv)

THREADS_ENV = "TREEAGG_THREADS"
EXIT_OK, EXIT_INPUT, EXIT_NOCONV = 0, 1, 2


class InputError(Exception):
    """Malformed or missing input; the message names the file and line or flag."""


# --- parsing -----------------------------------------------------------------

def _read_text(path: str, flag: str) -> str:
    if path is None:
        raise InputError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{flag}: file not found: {path}")
    return p.read_text()


def _float(tok: str, where: str) -> float:
    try:
        v = float(tok.strip())
    except ValueError:
        raise InputError(f"{where}: not a number: {tok.strip()!r}") from None
    if not np.isfinite(v):
        raise InputError(f"{where}: non-finite value {tok.strip()!r}")
    return v


def _rows(text: str):
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if row and any(c.strip() for c in row):
            yield lineno, row


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def read_vector(path: str, flag: str = "--y") -> np.ndarray:
    """One number per line; a non-numeric first line is taken as a header."""
    vals = []
    for lineno, row in _rows(_read_text(path, flag)):
        if lineno == 1 and not _is_number(row[0]):
            continue
        if len(row) != 1:
            raise InputError(f"{path}:{lineno}: expected one value, got {len(row)}")
        vals.append(_float(row[0], f"{path}:{lineno}"))
    if not vals:
        raise InputError(f"{path}: no values")
    return np.array(vals)


def read_design(path: str, n: int | None = None, p: int | None = None):
    """Dense CSV (first row = feature ids) or sparse triplets ``row,col,value``.

    Triplet rows and columns are 1-based; the shape defaults to the largest
    indices but is taken from ``n``/``p`` when given. Returns
    ``(matrix, feature_ids or None)``.
    """
    text = _read_text(path, "--x")
    rows = list(_rows(text))
    if not rows:
        raise InputError(f"{path}: empty design file")
    header = [h.strip() for h in rows[0][1]]
    if header == ["row", "col", "value"]:
        r, c, v = [], [], []
        for lineno, row in rows[1:]:
            if len(row) != 3:
                raise InputError(f"{path}:{lineno}: expected row,col,value")
            i, j = _float(row[0], f"{path}:{lineno}"), _float(row[1], f"{path}:{lineno}")
            if i != int(i) or j != int(j) or i < 1 or j < 1:
                raise InputError(f"{path}:{lineno}: indices must be positive integers")
            r.append(int(i) - 1)
            c.append(int(j) - 1)
            v.append(_float(row[2], f"{path}:{lineno}"))
        nn = n if n is not None else (max(r) + 1 if r else 0)
        pp = p if p is not None else (max(c) + 1 if c else 0)
        if r and (max(r) >= nn or max(c) >= pp):
            raise InputError(f"{path}: triplet index outside the {nn}x{pp} design")
        return sp.csc_matrix((v, (r, c)), shape=(nn, pp)), None
    data = []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        data.append([_float(t, f"{path}:{lineno}") for t in row])
    return np.array(data, dtype=float).reshape(len(data), len(header)), header


def _match_columns(X, ids, tree):
    """Reorder columns to the tree's leaf order when the ids name the leaves."""
    p = tree.leaf_count
    if X.shape[1] != p:
        raise InputError(f"--x has {X.shape[1]} columns but the tree has {p} leaves")
    leaf_ids = [str(l) for l in tree.labels[:p]] if tree.labels else []
    if ids is not None and leaf_ids and sorted(ids) == sorted(leaf_ids):
        pos = {h: i for i, h in enumerate(ids)}
        X = X[:, [pos[l] for l in leaf_ids]]
    return X


def read_tree(path: str):
    text = _read_text(path, "--tree")
    try:
        return read_tree_csv(text)
    except TreeError as exc:
        raise InputError(f"{path}: {exc}") from None


def read_vectors(path: str) -> np.ndarray:
    data = []
    width = None
    for lineno, row in _rows(_read_text(path, "--vectors")):
        if lineno == 1 and not all(_is_number(t) for t in row):
            continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise InputError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        data.append([_float(t, f"{path}:{lineno}") for t in row])
    if not data:
        raise InputError(f"{path}: no vectors")
    return np.array(data)


def _parse_list(s: str, kind, flag: str):
    try:
        return [kind(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"{flag}: cannot parse {s!r}") from None


# --- output ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header] if isinstance(r, dict) else [_fmt(x) for x in r])
    path.write_text(buf.getvalue())


def write_kv(path: Path, record: dict) -> None:
    path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in record.items()))


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, args, argv, inputs: dict, outputs: list[str], started: float) -> None:
    snap = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    man = {
        "command": args.command,
        "argv": list(argv),
        "config": snap,
        "seed": snap.get("seed"),
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in inputs.items() if v},
        "outputs": sorted(outputs),
        "wall_clock_seconds": round(time.time() - started, 3),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ----------------------------------------------------------------

def _load_problem(args):
    tree = read_tree(args.tree)
    y = read_vector(args.y, "--y")
    X, ids = read_design(args.x, n=len(y), p=tree.leaf_count)
    if X.shape[0] != len(y):
        raise InputError(f"--x has {X.shape[0]} rows but --y has {len(y)} values")
    if not sp.issparse(X):
        X = _match_columns(X, ids, tree)
    elif X.shape[1] != tree.leaf_count:
        raise InputError(f"--x has {X.shape[1]} columns but the tree has {tree.leaf_count} leaves")
    try:
        D = CountDesign.from_any(X)
        if args.normalize:
            D = normalize_for_theory(D)
    except ValueError as exc:
        raise InputError(f"--x: {exc}") from None
    feat = [str(l) for l in tree.labels[:tree.leaf_count]] if tree.labels else \
        [str(j + 1) for j in range(tree.leaf_count)]
    return D, y, tree, feat


def _fit_cfg(args, lam, alpha) -> FitConfig:
    try:
        return FitConfig(lam=lam, alpha=alpha, rho=args.rho, eps_abs=args.eps_abs,
                         eps_rel=args.eps_rel, max_iter=args.max_iter, intercept=args.intercept)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _write_fit(out: Path, res, tree, feat, D) -> list[str]:
    node_ids = [str(l) for l in tree.labels] if tree.labels else \
        [str(i + 1) for i in range(tree.node_count)]
    write_csv(out / "beta.csv", ["feature_id", "coefficient"], zip(feat, res.beta))
    write_csv(out / "gamma.csv", ["node_id", "coefficient"], zip(node_ids, res.gamma))
    diag = {"lambda": res.config.lam, "alpha": res.config.alpha, "rho": res.config.rho,
            "intercept": res.intercept, "iterations": res.iterations,
            "converged": res.converged, "primal_residual": res.primal_residual,
            "dual_residual": res.dual_residual, "objective": res.objective,
            "consensus_gap": res.consensus_gap, "scale_factor": D.scale_factor}
    write_kv(out / "diagnostics.txt", diag)
    return ["beta.csv", "gamma.csv", "diagnostics.txt"]


def cmd_fit(args, argv) -> int:
    started = time.time()
    D, y, tree, feat = _load_problem(args)
    cfg = _fit_cfg(args, args.lam, args.alpha)
    res = fit(D, y, tree, cfg)
    out = _outdir(args)
    outs = _write_fit(out, res, tree, feat, D)
    write_manifest(out, args, argv, {"x": args.x, "y": args.y, "tree": args.tree}, outs, started)
    if not res.converged:
        print(f"warning: no convergence after {res.iterations} iterations", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def cmd_cv(args, argv) -> int:
    started = time.time()
    D, y, tree, feat = _load_problem(args)
    clip = None
    if args.clip:
        lo_hi = _parse_list(args.clip, float, "--clip")
        if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1]:
            raise InputError("--clip expects lo,hi with lo <= hi")
        clip = tuple(lo_hi)
    if args.lambdas or args.alphas:
        lams = _parse_list(args.lambdas, float, "--lambdas") if args.lambdas else None
        alphas = _parse_list(args.alphas, float, "--alphas") if args.alphas else [0.0]
        if lams is None:
            grid = make_grid(D, y, n_lambda=args.n_lambda, ratio=args.lambda_ratio,
                             intercept=args.intercept, alphas=alphas, tree=tree)
        else:
            grid = [(l, a) for a in alphas for l in sorted(lams, reverse=True)]
    else:
        grid = make_grid(D, y, n_lambda=args.n_lambda, n_alpha=args.n_alpha,
                         ratio=args.lambda_ratio, intercept=args.intercept, tree=tree)
    base = _fit_cfg(args, 0.0, 0.0)
    try:
        cv = kfold_cv(D, y, tree, grid, K=args.folds, seed=args.seed, clip=clip,
                      base_cfg=base, threads=args.threads)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = _outdir(args)
    write_csv(out / "cv.csv", ["lambda", "alpha", "cv_mean", "cv_se"],
              [(l, a, m, s) for (l, a), m, s in zip(cv.grid, cv.cv_mean, cv.cv_se)])
    lam, alpha = cv.best
    write_kv(out / "best.txt", {"lambda": lam, "alpha": alpha,
                                "cv_mean": cv.cv_mean[cv.best_index],
                                "cv_se": cv.cv_se[cv.best_index]})
    res = fit(D, y, tree, replace(base, lam=lam, alpha=alpha))
    outs = ["cv.csv", "best.txt"] + _write_fit(out, res, tree, feat, D)
    write_manifest(out, args, argv, {"x": args.x, "y": args.y, "tree": args.tree}, outs, started)
    return EXIT_OK if res.converged else EXIT_NOCONV


def _sweep_cfg(args) -> SweepConfig:
    return SweepConfig(n_lambda=args.n_lambda, n_alpha=args.n_alpha, threads=args.threads)


def cmd_simulate(args, argv) -> int:
    started = time.time()
    reps = args.replicates or (100 if args.full_scale else 25)
    try:
        if args.kind == "scenario":
            spec = ExperimentSpec.preset(args.preset, replicates=reps, seed=args.seed)
            ks = _parse_list(args.k_values, int, "--k-values")
            rows = run_scenario_sweep(spec, ks, _sweep_cfg(args))
            header = ["k", "method", "mean_err", "se", "replicates"]
            panel = "plot_low_dim.csv" if args.preset == "low-dim" else "plot_high_dim.csv"
            plot_x = "k"
        else:
            spec = ExperimentSpec.preset("distortion", replicates=reps, seed=args.seed)
            taus = _parse_list(args.taus, float, "--taus")
            rows = run_distortion_sweep(spec, taus, _sweep_cfg(args))
            header = ["tau", "method", "mean_err", "se", "replicates"]
            panel, plot_x = "plot_distortion.csv", "tau"
    except (KeyError, ValueError) as exc:
        raise InputError(str(exc).strip("'\"")) from None
    out = _outdir(args)
    write_csv(out / "results.csv", header, rows)
    write_csv(out / panel, [plot_x, "method", "mean_err", "lower", "upper"],
              [(r[plot_x], r["method"], r["mean_err"], r["mean_err"] - r["se"],
                r["mean_err"] + r["se"]) for r in rows])
    write_manifest(out, args, argv, {}, ["results.csv", panel], started)
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    started = time.time()
    out = _outdir(args)
    try:
        if args.kind == "ols":
            rows = verify_ols_failure(_parse_list(args.n_values, int, "--n-values"), args.k,
                                      args.eta, args.sigma, args.replicates or 100000, args.seed)
            write_csv(out / "ols.csv", list(rows[0]), rows)
            outs, ok = ["ols.csv"], all(r["holds"] for r in rows)
        elif args.kind == "recovery":
            rec = verify_support_recovery(args.n, args.k, args.signal, args.replicates or 1000,
                                          args.sigma, args.seed)
            d = rec.as_dict()
            write_kv(out / "recovery.txt", d)
            print(f"c_tilde={format_float(c_tilde())}")
            outs, ok = ["recovery.txt"], True
        else:
            spec = ExperimentSpec(n=args.n, p=args.p, k=args.k, s=args.s,
                                  replicates=args.replicates or 200, seed=args.seed)
            res = verify_prediction_bound(spec)
            per = res.pop("per_replicate")
            write_csv(out / "bound.csv", list(per[0]), per)
            write_kv(out / "bound_summary.txt", res)
            outs = ["bound.csv", "bound_summary.txt"]
            ok = res["violation_bound"] <= res["allowed"] and res["tree_size_ok"] and res["column_norm_ok"]
    except SignalWindowError as exc:
        raise InputError(str(exc)) from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    write_manifest(out, args, argv, {}, outs, started)
    print("check passed" if ok else "check FAILED")
    return EXIT_OK


def cmd_tree(args, argv) -> int:
    started = time.time()
    out = _outdir(args)
    if args.action == "build":
        V = read_vectors(args.vectors)
        tree = build_tree_hclust(V, args.linkage)
        write_tree_csv(tree, out / "tree.csv")
        write_manifest(out, args, argv, {"vectors": args.vectors}, ["tree.csv"], started)
        return EXIT_OK
    tree = read_tree(args.tree)
    X = None
    if args.mode == "density":
        X, ids = read_design(args.x, p=tree.leaf_count)
        if not sp.issparse(X):
            X = _match_columns(X, ids, tree)
    try:
        B = cut_tree(tree, args.mode, args.threshold, X)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    labels = tree.labels if tree.labels else tuple(range(1, tree.node_count + 1))
    rows = [(labels[u - 1], " ".join(str(labels[j]) for j in tree.leaf_sets[u - 1]))
            for u in B.ordered(tree)]
    write_csv(out / "aggregating_set.csv", ["node_id", "leaves"], rows)
    write_manifest(out, args, argv, {"tree": args.tree, "x": args.x}, ["aggregating_set.csv"],
                   started)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    man = json.loads(_read_text(args.manifest, "manifest"))
    return main(man["argv"])


# --- argument parser ---------------------------------------------------------

def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _solver_flags(sp_):
    sp_.add_argument("--x", help="design CSV (dense with feature-id header, or row,col,value)")
    sp_.add_argument("--y", help="response file, one value per line")
    sp_.add_argument("--tree", help="tree CSV with node_id,parent_id[,height]")
    sp_.add_argument("--rho", type=float, default=1.0)
    sp_.add_argument("--eps-abs", type=float, default=1e-5)
    sp_.add_argument("--eps-rel", type=float, default=1e-4)
    sp_.add_argument("--max-iter", type=int, default=10000)
    sp_.add_argument("--intercept", action="store_true")
    sp_.add_argument("--normalize", action="store_true", help="scale X so ||X 1||^2 = n")
    sp_.add_argument("--out", default=".")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treeagg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--threads", type=int, default=_default_threads(),
                    help=f"worker threads (default from ${THREADS_ENV}, else 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit at one (lambda, alpha)")
    _solver_flags(f)
    f.add_argument("--lambda", dest="lam", type=float, required=True)
    f.add_argument("--alpha", type=float, required=True)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cv", help="K-fold cross-validation over a (lambda, alpha) grid")
    _solver_flags(c)
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--n-lambda", type=int, default=50)
    c.add_argument("--n-alpha", type=int, default=8)
    c.add_argument("--lambda-ratio", type=float, default=1e-3)
    c.add_argument("--lambdas", help="explicit comma-separated lambdas")
    c.add_argument("--alphas", help="explicit comma-separated alphas")
    c.add_argument("--clip", help="clip predictions to lo,hi")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cv)

    s = sub.add_parser("simulate", help="simulation sweeps")
    s.add_argument("kind", choices=["scenario", "distortion"])
    s.add_argument("--preset", default="low-dim")
    s.add_argument("--k-values", default="5,10,20,25")
    s.add_argument("--taus", default=",".join(str(t) for t in PAPER_TAUS))
    s.add_argument("--replicates", type=int)
    s.add_argument("--full-scale", action="store_true", help="100 replicates")
    s.add_argument("--n-lambda", type=int, default=50)
    s.add_argument("--n-alpha", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="Monte-Carlo checks of the theory")
    v.add_argument("kind", choices=["ols", "recovery", "bound"])
    v.add_argument("--n-values", default="100,1000,10000")
    v.add_argument("--n", type=int, default=10000)
    v.add_argument("--p", type=int, default=200)
    v.add_argument("--k", type=int, default=4)
    v.add_argument("--s", type=float, default=0.2)
    v.add_argument("--eta", type=float, default=1.0)
    v.add_argument("--sigma", type=float, default=1.0)
    v.add_argument("--signal", type=float)
    v.add_argument("--replicates", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=".")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("tree", help="build or cut a feature tree")
    t.add_argument("action", choices=["build", "cut"])
    t.add_argument("--vectors")
    t.add_argument("--linkage", choices=LINKAGES, default="complete")
    t.add_argument("--tree")
    t.add_argument("--mode", choices=["height", "density"], default="height")
    t.add_argument("--threshold", type=float, default=0.0)
    t.add_argument("--x")
    t.add_argument("--out", default=".")
    t.set_defaults(func=cmd_tree)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args, argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
