"""Benchmark harness: run any smoother on the built-in benchmark systems
and aggregate the metrics the experiments report."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .approx import linearized_measurement_fn
from .backward import backward_simulate, mcmc_backward_simulate, smooth_trajectories
from .baselines import ffbs_run, rbffjbs_run, rbfs_run
from .forward import rbpf_run
from .metrics import posterior_logdensity, rmse, unique_particles
from .models import (
    THETA_WEIGHTS,
    Trajectory,
    builtin_theta_model,
    builtin_turn_model,
    load_config,
    save_config,
    simulate,
    theta_of_z,
    turn_benchmark_trajectory,
)

__all__ = [
    "ALGORITHMS",
    "RunConfig",
    "SmootherRun",
    "default_T",
    "make_model",
    "simulate_benchmark",
    "run_smoother",
    "evaluate_run",
    "bench",
    "bench_rows_to_csv",
]

ALGORITHMS = ("ffbs", "rbfs", "rbffjbs", "rbps", "rbps-mcmc")
_TURN_UNSUPPORTED = ("ffbs", "rbps-mcmc")


@dataclass
class RunConfig:
    """One smoothing-run configuration; serializable as key = value text."""

    model: str = "theta"
    T: int = 100
    N: int = 300
    M: int = 100
    R: int = 10
    algo: str = "rbps"
    batches: int = 100
    seed: int = 0
    resample: str = "ess"
    sqrt_form: bool = False

    def __post_init__(self):
        for name in ("T", "N", "M", "R", "batches"):
            if getattr(self, name) < 1 and not (name == "R" and self.R == 0):
                raise ValueError(f"{name} must be >= 1")

    def warnings(self):
        out = []
        if self.M > self.N:
            out.append(
                f"M={self.M} exceeds N={self.N}; M <= N is recommended "
                "(typically M = N/3)"
            )
        return out

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = load_config(path)
        known = {k: v for k, v in cfg.items() if k in cls.__dataclass_fields__}
        if "sqrt_form" in known:
            known["sqrt_form"] = str(known["sqrt_form"]).lower() in ("1", "true", "on")
        return cls(**known)

    def to_file(self, path) -> None:
        save_config(self.__dict__, path)


def default_T(model_id: str) -> int:
    return 100


def make_model(model_id: str):
    if model_id == "theta":
        return builtin_theta_model()
    if model_id == "turn":
        return builtin_turn_model()
    raise ValueError(f"unknown model {model_id!r} (expected 'theta' or 'turn')")


def simulate_benchmark(model_id: str, T: int, seed: int) -> Trajectory:
    if model_id == "theta":
        return simulate(builtin_theta_model(), T, seed=seed)
    if model_id == "turn":
        return turn_benchmark_trajectory(T, seed=seed)
    raise ValueError(f"unknown model {model_id!r}")


@dataclass
class SmootherRun:
    """Normalized smoother output consumed by the metric layer."""

    algo: str
    u_trajs: np.ndarray  # (M, T, n_u)
    weights: Optional[np.ndarray] = None  # (M,), None = uniform
    lin_means: Optional[np.ndarray] = None  # (M, T, n_z)
    lin_covs: Optional[np.ndarray] = None  # (M, T, n_z, n_z)
    z_samples: Optional[np.ndarray] = None  # (M, T, n_z)

    def u_mean(self):
        return _wmean(self.u_trajs, self.weights)

    def z_mean(self):
        src = self.lin_means if self.lin_means is not None else self.z_samples
        return _wmean(src, self.weights)


def _wmean(arr, weights):
    if weights is None:
        return np.mean(arr, axis=0)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return np.einsum("m,mti->ti", w, arr)


def run_smoother(
    algo: str,
    model_id: str,
    y,
    n_particles: int,
    n_traj: int,
    seed: int = 0,
    r_steps: int = 10,
    sqrt_form: bool = False,
    resample: str = "ess",
) -> SmootherRun:
    """Run one smoothing algorithm on observations from a benchmark model."""
    if algo not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")
    if model_id == "turn" and algo in _TURN_UNSUPPORTED:
        reason = (
            "a plain particle filter cannot track this model reliably"
            if algo == "ffbs"
            else "MCMC rejuvenation needs measurement matrices at arbitrary "
            "u values, which the approximate pipeline records per particle"
        )
        raise ValueError(f"algorithm {algo!r} is not supported on 'turn': {reason}")
    model = make_model(model_id)
    meas_fn = None
    if model_id == "turn":
        meas_fn = linearized_measurement_fn(model)

    if algo == "ffbs":
        res = ffbs_run(model, y, n_particles, n_traj, seed=seed, resample=resample)
        return SmootherRun(algo, res.u, z_samples=res.z)

    filt = rbpf_run(
        model, y, n_particles, seed=seed, resample=resample,
        measurement_fn=meas_fn, record=meas_fn is not None,
    )
    if algo == "rbfs":
        res = rbfs_run(model, y, n_particles, filt=filt)
        return SmootherRun(algo, res.u, weights=res.weights,
                           lin_means=res.lin_means, lin_covs=res.lin_covs)
    if algo == "rbffjbs":
        res = rbffjbs_run(model, y, n_particles, n_traj, seed=seed + 1, filt=filt)
        return SmootherRun(algo, res.u, lin_means=res.lin_means,
                           lin_covs=res.lin_covs, z_samples=res.z_samples)
    if algo == "rbps":
        trajs = backward_simulate(filt, model, n_traj, seed=seed + 1,
                                  sqrt_form=sqrt_form)
    else:  # rbps-mcmc
        trajs = mcmc_backward_simulate(filt, model, n_traj, r_steps=r_steps,
                                       seed=seed + 1)
    smooth_trajectories(model, trajs, filt)
    u = np.stack([tr.u_path for tr in trajs])
    means = np.stack([tr.smoothed_means for tr in trajs])
    covs = np.einsum(
        "mtij,mtkj->mtik",
        np.stack([tr.smoothed_sqrt_covs for tr in trajs]),
        np.stack([tr.smoothed_sqrt_covs for tr in trajs]),
    )
    return SmootherRun(algo, u, lin_means=means, lin_covs=covs)


@dataclass
class RunMetrics:
    rmse_u: float
    rmse_lin: float  # theta for benchmark 1, full z for benchmark 2
    unique_u: np.ndarray  # (T,)
    post_logdens: Optional[np.ndarray]  # (T,) or None when no Gaussians


def evaluate_run(run: SmootherRun, data: Trajectory, model_id: str) -> RunMetrics:
    u_hat = run.u_mean()
    rmse_u = rmse(u_hat, data.u)
    if model_id == "theta":
        z_hat = run.z_mean()
        rmse_lin = rmse(theta_of_z(z_hat), theta_of_z(data.z))
    else:
        rmse_lin = rmse(run.z_mean(), data.z)
    uniq = unique_particles(run.u_trajs)
    post = None
    if run.lin_means is not None:
        post = posterior_logdensity(run.lin_means, run.lin_covs, data.z,
                                    weights=run.weights)
    return RunMetrics(rmse_u, rmse_lin, uniq, post)


def bench(
    model_id: str,
    batches: int,
    n_particles: int,
    n_traj: int,
    algos,
    seed: int = 0,
    T: Optional[int] = None,
    r_steps: int = 10,
    progress=None,
):
    """Run every algorithm on ``batches`` independent data sets.

    Every batch b draws its data from seed ``spawn(seed, b)`` and every
    algorithm sees the same data (paired comparison).  Returns
    (rows, per_batch) where rows aggregate per algorithm:
    ``{"algo", "rmse_u", "rmse_lin", "ci_halfwidth", ...}`` with the CI the
    1.96-sigma half-width of the second RMSE column over batches.
    """
    T = default_T(model_id) if T is None else int(T)
    algos = list(algos)
    for algo in algos:
        if algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {algo!r}")
        if model_id == "turn" and algo in _TURN_UNSUPPORTED:
            raise ValueError(f"algorithm {algo!r} is not supported on 'turn'")
    data_seeds = [int(s.generate_state(1)[0] % (1 << 31))
                  for s in np.random.SeedSequence(seed).spawn(batches)]
    per_batch = {algo: [] for algo in algos}
    for b in range(batches):
        data = simulate_benchmark(model_id, T, data_seeds[b])
        for algo in algos:
            run = run_smoother(
                algo, model_id, data.y, n_particles, n_traj,
                seed=data_seeds[b] + 7919, r_steps=r_steps,
            )
            per_batch[algo].append(evaluate_run(run, data, model_id))
        if progress is not None:
            progress(b + 1, batches)
    rows = []
    for algo in algos:
        ru = np.array([m.rmse_u for m in per_batch[algo]])
        rl = np.array([m.rmse_lin for m in per_batch[algo]])
        rows.append(
            {
                "algo": algo,
                "rmse_u": float(ru.mean()),
                "rmse_lin": float(rl.mean()),
                "ci_halfwidth": float(
                    1.96 * rl.std(ddof=1) / np.sqrt(len(rl))
                ) if len(rl) > 1 else 0.0,
                "rmse_u_ci": float(
                    1.96 * ru.std(ddof=1) / np.sqrt(len(ru))
                ) if len(ru) > 1 else 0.0,
            }
        )
    return rows, per_batch


def bench_rows_to_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("algo,rmse_u,rmse_theta_or_z,ci_halfwidth\n")
        for row in rows:
            fh.write(
                f"{row['algo']},{row['rmse_u']:.6g},{row['rmse_lin']:.6g},"
                f"{row['ci_halfwidth']:.6g}\n"
            )
