"""Command-line front end: ``otdiff <subcommand> ...``.

Every subcommand writes its CSV tables into ``--out`` together with a
``manifest.json`` describing the run.  Exit codes: 0 success, 1 input
error, 2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from ._parallel import thread_scope
from .errors import CapabilityError, FormatError, NumericalError, ShapeError, SizeError
from .flows import FlowConfig, run_flow
from .geometry_io import (
    GaussianMixture,
    Graph,
    PointCloud,
    VoxelGrid,
    load_any,
    load_point_cloud,
    load_signal,
    load_voxel_grid,
    write_point_cloud,
    write_signal,
    write_table,
    write_voxel_grid,
)
from .normalize import (
    DiffusionOperator,
    diffuse,
    dirac,
    load_scaling,
    mass,
    row_normalize_apply,
    save_scaling,
    sinkhorn_normalize,
    spectral_truncation_apply,
    symmetric_normalize_apply,
)
from .operators import build_dense_operator, build_operator, estimate_voxel_masses, smatvec
from .spectral import estimate_laplacian_eigenvalues, top_eigenpairs

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class NonConvergence(Exception):
    pass


def _modality(data) -> str:
    if isinstance(data, Graph):
        return "graph"
    if isinstance(data, VoxelGrid):
        return "voxels"
    if isinstance(data, GaussianMixture):
        return "gmm"
    return "points"


def _load(args):
    return load_any(args.input, getattr(args, "kind", None), getattr(args, "mass_file", None))


def _operator(args, data):
    if isinstance(data, Graph) and args.epsilon == 0 and data.n > 1 and data.n_components() > 1:
        raise NonConvergence(
            f"graph has {data.n_components()} connected components and epsilon = 0: "
            "the Sinkhorn scaling is not unique; pass --epsilon > 0"
        )
    op = build_operator(data, sigma=args.sigma, epsilon=args.epsilon, kernel=args.kernel)
    if getattr(args, "dense", False):
        from .oracle import dense_kernel

        op = build_dense_operator(dense_kernel(op), op.masses)
    return op


def _write_manifest(args, started: float, **extra) -> None:
    params = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in ("func", "out") and not callable(v)
    }
    manifest = {
        "subcommand": args.command,
        "parameters": params,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_time": round(time.time() - started, 6),
    }
    manifest.update(extra)
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def cmd_normalize(args) -> int:
    data = _load(args)
    op = _operator(args, data)
    scaling = sinkhorn_normalize(op, tol=args.tol, max_iter=args.max_iter, mode=args.mode)
    save_scaling(
        os.path.join(args.out, "scaling.csv"),
        scaling,
        tol=args.tol,
        sigma=args.sigma,
        modality=_modality(data),
        epsilon=args.epsilon,
        kernel=args.kernel,
    )
    print(f"iterations={scaling.iterations} error={scaling.final_error:.3e} converged={scaling.converged}")
    args._extra = {"converged": scaling.converged, "iterations": scaling.iterations}
    if not scaling.converged:
        raise NonConvergence(f"no convergence after {scaling.iterations} iterations (error {scaling.final_error:.3e})")
    return EXIT_OK


def _restore_params(args, meta):
    for key in ("sigma", "epsilon", "kernel"):
        if getattr(args, key, None) is None and meta.get(key) is not None:
            setattr(args, key, meta[key])
    if args.epsilon is None:
        args.epsilon = 0.0
    if args.kernel is None:
        args.kernel = "gaussian"


def cmd_diffuse(args) -> int:
    data = _load(args)
    scaling, meta = load_scaling(args.scaling)
    _restore_params(args, meta)
    op = _operator(args, data)
    if scaling.n != op.n:
        raise ShapeError(f"scaling has {scaling.n} entries but the input has {op.n} elements")
    if args.signal is not None:
        f = load_signal(args.signal)
    elif args.dirac is not None:
        f = dirac(op.masses, args.dirac)[:, None]
    else:
        raise FormatError("pass --signal or --dirac")
    if f.shape[0] != op.n:
        raise ShapeError(f"signal has {f.shape[0]} rows, input has {op.n} elements")
    out = diffuse(DiffusionOperator(op, scaling), f, steps=args.steps)
    write_signal(os.path.join(args.out, "signal.csv"), out)
    m_in, m_out = mass(op.masses, f), mass(op.masses, out)
    for p, (a, b) in enumerate(zip(np.atleast_1d(m_in), np.atleast_1d(m_out))):
        print(f"channel {p}: input mass {a:.12g} output mass {b:.12g}")
    args._extra = {"input_mass": np.atleast_1d(m_in).tolist(), "output_mass": np.atleast_1d(m_out).tolist()}
    return EXIT_OK


def cmd_compare(args) -> int:
    data = _load(args)
    if not isinstance(data, Graph):
        raise FormatError("compare expects a graph input")
    op = _operator(args, data)
    f = dirac(op.masses, args.dirac)
    scaling = sinkhorn_normalize(op, tol=args.tol, max_iter=args.max_iter)
    if not scaling.converged:
        raise NonConvergence(f"Sinkhorn did not converge (error {scaling.final_error:.3e})")
    rank = data.n if args.rank is None else args.rank
    outputs = {
        "raw": smatvec(op, f),
        "row": row_normalize_apply(op, f),
        "symmetric": symmetric_normalize_apply(op, f),
        "spectral": spectral_truncation_apply(data, args.t, rank, f),
        "sinkhorn": DiffusionOperator(op, scaling).matvec(f),
    }
    names = list(outputs)
    masses = [float(mass(op.masses, v)) for v in outputs.values()]
    mins = [float(np.min(v)) for v in outputs.values()]
    path = os.path.join(args.out, "compare.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method,mass,min_entry\n")
        for name, ms, mn in zip(names, masses, mins):
            fh.write(f"{name},{ms:.17g},{mn:.17g}\n")
    for name, ms, mn in zip(names, masses, mins):
        print(f"{name:>10}  mass {ms:.6f}  min {mn:+.3e}")
    return EXIT_OK


def cmd_eigs(args) -> int:
    data = _load(args)
    op = _operator(args, data)
    scaling = sinkhorn_normalize(op, tol=args.tol, max_iter=args.max_iter)
    if not scaling.converged:
        raise NonConvergence(f"Sinkhorn did not converge (error {scaling.final_error:.3e})")
    basis = top_eigenpairs(DiffusionOperator(op, scaling), args.k, solver_tol=args.solver_tol, seed=args.seed)
    modality = _modality(data)
    lam = basis.eigenvalues
    if modality == "graph":
        est = np.full(lam.shape, np.nan)
    else:
        kwargs = {}
        if modality == "gmm":
            kwargs = {"gmm_trace_avg": data.mean_trace(), "d": args.gmm_d or data.dim}
        est = np.full(lam.shape, np.nan)
        est[lam > 0] = estimate_laplacian_eigenvalues(lam[lam > 0], args.sigma, modality, **kwargs)
    write_table(
        os.path.join(args.out, "eigenvalues.csv"),
        ["index", "lambda_Q", "lambda_est", "residual"],
        [np.arange(basis.k), lam, est, basis.residuals],
    )
    phi = basis.eigenvectors
    write_table(
        os.path.join(args.out, "eigenvectors.csv"),
        ["index"] + [f"phi{i}" for i in range(basis.k)],
        [np.arange(op.n)] + [phi[:, i] for i in range(basis.k)],
    )
    args._extra = {"converged": basis.converged, "matvecs": basis.matvecs}
    if not basis.converged:
        raise NonConvergence(f"eigensolver stopped after {basis.matvecs} products; max residual {basis.residuals.max():.2e}")
    return EXIT_OK


def cmd_convergence(args) -> int:
    data = _load(args)
    op = _operator(args, data)
    scaling = sinkhorn_normalize(op, tol=args.tol, max_iter=args.max_iter, mode=args.mode)
    hist = np.asarray(scaling.history)
    write_table(os.path.join(args.out, "convergence.csv"), ["iteration", "error"], [np.arange(hist.size), hist])
    for i, e in enumerate(hist):
        print(f"{i:4d}  {e:.6e}")
    return EXIT_OK


def cmd_masses(args) -> int:
    grid = load_voxel_grid(args.input)
    out = estimate_voxel_masses(grid, args.sigma_voxels)
    write_voxel_grid(os.path.join(args.out, "masses.vox"), out)
    return EXIT_OK


def cmd_flow(args) -> int:
    source = load_point_cloud(args.source, mass_policy="uniform")
    target = load_point_cloud(args.target, mass_policy="uniform")
    cfg = FlowConfig(
        eta=args.eta,
        steps=args.steps,
        sigma=args.sigma,
        preconditioner=args.precond,
        seed=args.seed,
        snapshot_stride=args.stride,
    )
    traj = run_flow(source, target, cfg)
    for step, pos, _ in traj.snapshots:
        write_point_cloud(os.path.join(args.out, f"positions_{step:06d}.csv"), PointCloud.uniform(pos))
    steps = np.array([s for s, _, _ in traj.snapshots])
    write_table(os.path.join(args.out, "energy.csv"), ["step", "energy"], [steps, traj.energies])
    print(f"initial energy {traj.energies[0]:.6e}  final energy {traj.energies[-1]:.6e}")
    return EXIT_OK


def _add_common(p, sigma=True, epsilon=True, defaults=True):
    p.add_argument("input")
    p.add_argument("--kind", choices=["points", "graph", "voxels", "gmm"], help="override extension-based detection")
    p.add_argument("--mass-file", help="one-column vertex masses (graphs)")
    if sigma:
        p.add_argument("--sigma", type=float, help="kernel radius")
        p.add_argument("--kernel", choices=["gaussian", "exponential"], default="gaussian" if defaults else None)
    if epsilon:
        p.add_argument("--epsilon", type=float, default=0.0 if defaults else None, help="graph regularizer")
    p.add_argument("--dense", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"otdiff {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default $OTDIFF_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="compute the Sinkhorn scaling of an input")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--mode", choices=["linear", "log"], default="linear")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("diffuse", help="apply the normalized diffusion to a signal")
    _add_common(p, defaults=False)
    p.add_argument("--scaling", required=True, help="scaling.csv written by 'normalize'")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--signal", help="signal CSV (index,f0,...)")
    group.add_argument("--dirac", type=int, help="unit-mass Dirac at this element")
    p.add_argument("--steps", type=int, default=1)
    p.set_defaults(func=cmd_diffuse)

    p = sub.add_parser("compare", help="mass and positivity of the graph normalizations")
    _add_common(p, sigma=False)
    p.add_argument("--dirac", type=int, default=0)
    p.add_argument("--t", type=float, default=1.0, help="heat time of the spectral baseline")
    p.add_argument("--rank", type=int, default=None, help="eigenvectors kept by the spectral baseline")
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--max-iter", type=int, default=1000)
    p.set_defaults(func=cmd_compare, sigma=None, kernel="gaussian")

    p = sub.add_parser("eigs", help="leading eigenpairs and Laplacian eigenvalue estimates")
    _add_common(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-10, help="Sinkhorn tolerance")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--solver-tol", type=float, default=1e-8)
    p.add_argument("--gmm-d", type=int, choices=[2, 3], default=None, help="2 for surfaces, 3 for volumes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eigs)

    p = sub.add_parser("convergence", help="per-iteration Sinkhorn error")
    _add_common(p)
    p.add_argument("--max-iter", type=int, default=20)
    p.add_argument("--tol", type=float, default=0.0)
    p.add_argument("--mode", choices=["linear", "log"], default="linear")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("masses", help="kernel density masses for a voxel grid")
    p.add_argument("input")
    p.add_argument("--sigma-voxels", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_masses)

    p = sub.add_parser("flow", help="energy-distance particle flow")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--precond", choices=["identity", "kernel", "qdiff"], default="qdiff")
    p.add_argument("--sigma", type=float, default=0.07)
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--stride", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    args._extra = {}
    try:
        os.makedirs(args.out, exist_ok=True)
        with thread_scope(args.threads):
            code = args.func(args)
    except NonConvergence as exc:
        print(f"otdiff {args.command}: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except NumericalError as exc:
        print(f"otdiff {args.command}: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (FormatError, ShapeError, SizeError, CapabilityError, ValueError, OSError) as exc:
        print(f"otdiff {args.command}: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    extra = dict(args._extra)
    del args._extra
    try:
        _write_manifest(args, started, exit_code=code, **extra)
    except OSError as exc:
        print(f"otdiff {args.command}: could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_INPUT
    return code


if __name__ == "__main__":
    sys.exit(main())
