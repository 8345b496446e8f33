"""Command-line harness: simulate benchmark data, run smoothers, and emit
the benchmark tables as CSV.

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
failures (degenerate weights and the like).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .bench import (
    ALGORITHMS,
    RunConfig,
    bench,
    bench_rows_to_csv,
    default_T,
    evaluate_run,
    run_smoother,
    simulate_benchmark,
)
from .exceptions import AllWeightsZero, ClgError
from .models import theta_of_z, trajectory_from_csv, trajectory_to_csv

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clgsmooth",
        description="Rao-Blackwellized particle smoothing benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate benchmark data to CSV")
    sim.add_argument("--model", required=True, choices=["theta", "turn"])
    sim.add_argument("--T", required=True, type=int)
    sim.add_argument("--seed", required=True, type=int)
    sim.add_argument("--out", required=True)

    smo = sub.add_parser("smooth", help="run one smoother on a data file")
    smo.add_argument("--algo", required=True, choices=list(ALGORITHMS))
    smo.add_argument("--model", required=True, choices=["theta", "turn"])
    smo.add_argument("--N", required=True, type=int)
    smo.add_argument("--M", required=True, type=int)
    smo.add_argument("--R", type=int, default=10)
    smo.add_argument("--sqrt", choices=["on", "off"], default="off")
    smo.add_argument("--data", required=True)
    smo.add_argument("--seed", required=True, type=int)
    smo.add_argument("--traj-out", required=True)
    smo.add_argument("--metrics-out", required=True)

    ben = sub.add_parser("bench", help="run the benchmark table")
    ben.add_argument("--model", required=True, choices=["theta", "turn"])
    ben.add_argument("--batches", required=True, type=int)
    ben.add_argument("--N", required=True, type=int)
    ben.add_argument("--M", required=True, type=int)
    ben.add_argument("--algos", required=True,
                     help="comma-separated list, e.g. rbps,rbfs")
    ben.add_argument("--seed", required=True, type=int)
    ben.add_argument("--out", required=True)
    return parser


def _cmd_simulate(args) -> int:
    traj = simulate_benchmark(args.model, args.T, args.seed)
    trajectory_to_csv(traj, args.out)
    print(f"wrote {args.T} steps of '{args.model}' data to {args.out}")
    return 0


def _write_traj_csv(run, path):
    u = run.u_trajs
    z = run.lin_means if run.lin_means is not None else run.z_samples
    if run.lin_covs is not None:
        pdiag = np.einsum("mtii->mti", run.lin_covs)
    else:
        pdiag = np.zeros_like(z)
    M, T, n_u = u.shape
    n_z = z.shape[2]
    cols = (
        ["j", "t"]
        + [f"u_{i+1}" for i in range(n_u)]
        + [f"zsm_{i+1}" for i in range(n_z)]
        + [f"Pdiag_{i+1}" for i in range(n_z)]
    )
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for j in range(M):
            for t in range(T):
                row = [str(j + 1), str(t + 1)]
                row += [format(v, ".17g") for v in u[j, t]]
                row += [format(v, ".17g") for v in z[j, t]]
                row += [format(v, ".17g") for v in pdiag[j, t]]
                fh.write(",".join(row) + "\n")


def _write_metrics_csv(run, data, model_id, path):
    from .metrics import unique_particles

    u_hat = run.u_mean()
    err_u = np.linalg.norm(u_hat - data.u, axis=1)
    if model_id == "theta":
        err_lin = np.abs(theta_of_z(run.z_mean()) - theta_of_z(data.z))
    else:
        err_lin = np.linalg.norm(run.z_mean() - data.z, axis=1)
    uniq = unique_particles(run.u_trajs)
    metrics = evaluate_run(run, data, model_id)
    with open(path, "w") as fh:
        fh.write("t,err_u,err_lin,unique_u,post_logdens_z\n")
        for t in range(len(err_u)):
            post = "" if metrics.post_logdens is None else (
                format(metrics.post_logdens[t], ".17g")
            )
            fh.write(
                f"{t + 1},{err_u[t]:.17g},{err_lin[t]:.17g},{uniq[t]},{post}\n"
            )


def _cmd_smooth(args) -> int:
    cfg = RunConfig(model=args.model, N=args.N, M=args.M, R=args.R,
                    algo=args.algo, seed=args.seed,
                    sqrt_form=args.sqrt == "on")
    for warning in cfg.warnings():
        print(f"warning: {warning}", file=sys.stderr)
    data = trajectory_from_csv(args.data)
    run = run_smoother(
        args.algo, args.model, data.y, args.N, args.M, seed=args.seed,
        r_steps=args.R, sqrt_form=args.sqrt == "on",
    )
    _write_traj_csv(run, args.traj_out)
    _write_metrics_csv(run, data, args.model, args.metrics_out)
    m = evaluate_run(run, data, args.model)
    print(
        f"{args.algo} on {args.model}: rmse_u={m.rmse_u:.4g} "
        f"rmse_lin={m.rmse_lin:.4g}; trajectories -> {args.traj_out}, "
        f"metrics -> {args.metrics_out}"
    )
    return 0


def _cmd_bench(args) -> int:
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    cfg = RunConfig(model=args.model, N=args.N, M=args.M, batches=args.batches,
                    seed=args.seed)
    for warning in cfg.warnings():
        print(f"warning: {warning}", file=sys.stderr)

    def progress(done, total):
        if done % max(1, total // 10) == 0 or done == total:
            print(f"  batch {done}/{total}", file=sys.stderr)

    rows, _ = bench(args.model, args.batches, args.N, args.M, algos,
                    seed=args.seed, progress=progress)
    bench_rows_to_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    for row in rows:
        print(
            f"  {row['algo']:<9s} rmse_u={row['rmse_u']:.4g} "
            f"rmse_lin={row['rmse_lin']:.4g} ±{row['ci_halfwidth']:.2g}"
        )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "smooth":
            return _cmd_smooth(args)
        return _cmd_bench(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AllWeightsZero as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.log_weights is not None:
            dump = "logweights_dump.csv"
            np.savetxt(dump, np.atleast_2d(exc.log_weights), delimiter=",")
            print(f"log-weight diagnostics dumped to {dump}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ClgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
