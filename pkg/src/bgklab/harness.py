"""Experiment orchestration: configuration, validation, the five experiments, artifacts.

Every experiment writes into ``<output_dir>/<experiment>/``:

* ``aggregate.csv`` -- one row per statistic (columns in ``csv_schema.json``)
* ``replicas.csv``  -- per-replica raw statistics
* ``manifest.json`` -- the resolved config, tolerances and sha256 content hashes

Outputs depend only on the config and the seed.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io as _io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

from . import io as bio
from .bgk import (
    LOCAL,
    DensityGrid,
    HomogeneousDensity,
    SolverError,
    best_local_horizon,
    contraction_bound,
    stability_diagnostics,
    flux_ode,
    homogeneous_solve,
    local_horizon,
    picard_map,
    solve,
)
from .geometry import manifold as make_manifold
from .interaction import RegularityConstants, VonMisesLaw, mean_flux, node_densities
from .metrics import (
    ASSIGNMENT_BUDGET,
    chaoticity_covariance,
    coupling_envelope_log,
    loglog_slope,
    martingale_path,
    martingale_stats,
    observable_dictionary,
    w1_vs_density,
    w1_vs_node_masses,
)
from .observation import KernelSpec
from .pdmp import replica_streams, simulate_coupled, simulate_homogeneous

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3
Y_TOLERANCE = 1e-9

DEFAULTS = {
    "kernel": {"profile": "smooth_bump", "radius": 1.0, "epsilon": 1.0, "unit_sup": False},
    "N": [100],
    "replicas": 10,
    "initial": {"cosine_amplitude": 0.0},
    "solver": {
        "mode": "kernel",
        "n": 16,
        "dt": 0.01,
        "picard_tol": 1e-8,
        "max_iters": 50,
        "mass_tol": 1e-3,
        "write_density": False,
    },
    "statistics": {"w1_resamples": 0, "observables": ["e0"], "homogeneous_dt": 0.01},
    "trajectories": "none",
    "output_dir": "out",
}

# stream tags keep the random streams of different experiment parts disjoint
TAG_COUPLED, TAG_HOMOG, TAG_W1 = 1, 2, 3


class ConfigError(ValueError):
    pass


class InvariantError(RuntimeError):
    pass


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    level: str
    code: str
    message: str

    def __str__(self):
        return f"{self.level}: [{self.code}] {self.message}"


# --- configuration ------------------------------------------------------------------


def load_schema():
    return json.loads(resources.files("bgklab").joinpath("config_schema.json").read_text(encoding="utf-8"))


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def schema_diagnostics(raw):
    validator = jsonschema.Draft202012Validator(load_schema())
    out = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path)):
        path = "/" + "/".join(str(p) for p in err.absolute_path)
        out.append(Diagnostic("error", "schema", f"{path}: {err.message}"))
    return out


def resolve(raw):
    """Schema-check a raw config and fill in defaults; raises ConfigError."""
    errs = schema_diagnostics(raw)
    if errs:
        raise ConfigError("; ".join(e.message for e in errs))
    cfg = _merge(DEFAULTS, raw)
    cfg.setdefault("sample_times", [cfg["t_end"]])
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def build_manifold(cfg):
    return make_manifold(cfg["manifold"], cfg.get("quadrature_order"))


def build_kernel(cfg, eps=None):
    k = cfg["kernel"]
    if k["unit_sup"]:
        base = KernelSpec.with_unit_sup(cfg["d"], k["profile"])
    else:
        base = KernelSpec(k["radius"], cfg["d"], k["profile"])
    return base.rescale(k["epsilon"] if eps is None else eps)


def initial_flux(cfg, mfd):
    J0 = cfg["initial"].get("orientation_flux")
    return np.zeros(mfd.embed_dim) if J0 is None else np.asarray(J0, dtype=float)


def _spatial_profile(cfg):
    amp = cfg["initial"]["cosine_amplitude"]
    L = cfg["L"]
    return lambda x: 1.0 + amp * np.cos(2 * np.pi * x[..., 0] / L)


def initial_grid(cfg, mfd):
    s = cfg["solver"]
    return DensityGrid.product(
        mfd, s["n"], cfg["d"], cfg["L"], spatial=_spatial_profile(cfg), orientation=node_densities(initial_flux(cfg, mfd), mfd)
    )


def sample_initial(cfg, mfd, n, rng):
    """i.i.d. agents from rho0(x) M_{J0}(m); positions by rejection against uniform."""
    amp = cfg["initial"]["cosine_amplitude"]
    L, d = cfg["L"], cfg["d"]
    profile = _spatial_profile(cfg)
    xs = []
    have = 0
    while have < n:
        x = rng.random((2 * (n - have) + 8, d)) * L
        keep = rng.random(len(x)) * (1 + amp) < profile(x)
        xs.append(x[keep])
        have += int(keep.sum())
    x = np.concatenate(xs)[:n]
    m = VonMisesLaw(initial_flux(cfg, mfd), mfd).sample(rng, n)
    return x, m


# --- validation ---------------------------------------------------------------------


def validate(raw):
    """Diagnostics for a raw config: schema, consistency, horizon and kernel checks."""
    diags = schema_diagnostics(raw)
    if diags:
        return diags
    cfg = resolve(raw)
    exp = cfg["experiment"]
    mfd = build_manifold(cfg)
    if ("eps_schedule" in cfg) != (exp == "moderate"):
        diags.append(Diagnostic("error", "eps_schedule", "/eps_schedule must be given exactly when experiment is 'moderate'"))
    J0 = cfg["initial"].get("orientation_flux")
    if J0 is not None and len(J0) != mfd.embed_dim:
        diags.append(
            Diagnostic("error", "initial", f"/initial/orientation_flux has {len(J0)} entries, {mfd.kind} needs {mfd.embed_dim}")
        )
        return diags
    if exp != "homog" and mfd.velocity_dim != cfg["d"]:
        diags.append(
            Diagnostic("error", "dimension", f"/d={cfg['d']} but the velocity map of {mfd.kind} lives in R^{mfd.velocity_dim}")
        )
        return diags
    if any(t > cfg["t_end"] for t in cfg["sample_times"]):
        diags.append(Diagnostic("error", "sample_times", "/sample_times must not exceed t_end"))
    s = cfg["solver"]
    if exp != "homog":
        steps = cfg["t_end"] / s["dt"]
        if abs(steps - round(steps)) > 1e-9:
            diags.append(Diagnostic("error", "solver_dt", "/solver/dt must divide t_end"))
        eps_list = cfg.get("eps_schedule", [cfg["kernel"]["epsilon"]])
        for eps in eps_list:
            k = build_kernel(cfg, eps)
            if k.support > cfg["L"] / 2:
                diags.append(
                    Diagnostic(
                        "error",
                        "kernel_support",
                        f"kernel support {k.support:g} (eps={eps:g}) exceeds half the torus side L/2={cfg['L'] / 2:g}",
                    )
                )
        if s["mode"] == "local" or exp == "moderate":
            sup0 = initial_grid(cfg, mfd).sup_norm()
            a = s.get("a")
            if a is None:
                a, horizon = best_local_horizon(sup0)
            else:
                horizon = local_horizon(sup0, a)
            if cfg["t_end"] > horizon:
                diags.append(
                    Diagnostic(
                        "error",
                        "local_horizon",
                        f"t_end={cfg['t_end']:g} exceeds the local existence horizon "
                        f"T <= log((a*alpha(a) - |f0|_inf)/(a*alpha(a) - a)) = {horizon:.4g} with a={a:.4g}, |f0|_inf={sup0:.4g}",
                    )
                )
    if exp == "moderate":
        for eps in cfg.get("eps_schedule", []):
            k = build_kernel(cfg, eps)
            for n in cfg["N"]:
                val = joint_limit_log_diagnostic(k, cfg["t_end"], n)
                diags.append(
                    Diagnostic("info", "joint_limit", f"N={n}, eps={eps:g}: log(exp(2T theta(|K|_inf) |K|_Lip)/sqrt(N)) = {val:.4g}")
                )
    if cfg["statistics"]["w1_resamples"] > 0 and max(cfg["N"]) > ASSIGNMENT_BUDGET:
        diags.append(Diagnostic("error", "assignment_budget", f"N above the assignment budget {ASSIGNMENT_BUDGET}"))
    if exp in ("poc", "couple", "moderate", "homog") and cfg["replicas"] < 3:
        diags.append(Diagnostic("warning", "replicas", "fewer than 3 replicas: standard errors are undefined"))
    return diags


def joint_limit_log_diagnostic(kernel, T, n):
    """log of exp(2 T theta(|K|_inf) |K|_Lip) / sqrt(N), evaluated in log space."""
    with np.errstate(over="ignore"):
        return float(2 * T * RegularityConstants(kernel.sup_norm).theta * kernel.lip_norm - 0.5 * math.log(n))


# --- bookkeeping --------------------------------------------------------------------


class Budget:
    def __init__(self, seconds=None):
        self.seconds = seconds
        self.start = time.monotonic()

    def check(self, what=""):
        if self.seconds is not None and time.monotonic() - self.start > self.seconds:
            raise BudgetExceeded(f"time budget of {self.seconds:g} s exceeded {what}".strip())


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Recorder:
    AGG = ["experiment", "N", "eps", "t", "seed", "statistic", "value", "stderr"]
    REP = ["experiment", "N", "eps", "replica", "t", "statistic", "value"]

    def __init__(self, experiment, seed):
        self.experiment = experiment
        self.seed = seed
        self.rows = []
        self.replica_rows = []

    def add(self, statistic, value, stderr=None, N=None, eps=None, t=None):
        self.rows.append([self.experiment, N, eps, t, self.seed, statistic, value, stderr])

    def add_replica(self, statistic, value, replica, N=None, eps=None, t=None):
        self.replica_rows.append([self.experiment, N, eps, replica, t, statistic, value])

    def get(self, statistic, **match):
        idx = {"N": 1, "eps": 2, "t": 3}
        out = []
        for row in self.rows:
            if row[5] != statistic:
                continue
            if all(row[idx[k]] is not None and np.isclose(row[idx[k]], v) for k, v in match.items()):
                out.append(row)
        return out

    @staticmethod
    def _render(header, rows):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0], *[_cell(v) if not isinstance(v, str) else v for v in row[1:]]])
        return buf.getvalue()

    def aggregate_csv(self):
        return self._render(self.AGG, self.rows)

    def replicas_csv(self):
        return self._render(self.REP, self.replica_rows)


@dataclass
class RunResult:
    experiment: str
    out_dir: str
    recorder: Recorder
    manifest: dict
    details: dict


# --- worker pool --------------------------------------------------------------------

_WORKER = {}


def _init_worker(state):
    _WORKER.clear()
    _WORKER.update(state)


def _map_jobs(fn, jobs, threads, state, budget, label):
    """Run fn over jobs in order, serially or on a process pool."""
    results = []
    if threads <= 1:
        _init_worker(state)
        for job in jobs:
            results.append(fn(job))
            budget.check(label)
        return results
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(state,)) as pool:
        try:
            for res in pool.map(fn, jobs):
                results.append(res)
                budget.check(label)
        except BudgetExceeded:
            pool.shutdown(wait=False, cancel_futures=True)
            raise
    return results


# --- coupled sweeps (poc, couple, moderate) -------------------------------------------


def _coupled_job(job):
    n, replica, eps = job
    cfg, solution, kernel, mfd = _WORKER["cfg"], _WORKER["solution"], _WORKER["kernel"], _WORKER["mfd"]
    streams = replica_streams(cfg["seed"], TAG_COUPLED, n, replica)
    x0, m0 = sample_initial(cfg, mfd, n, streams.draws)
    res = simulate_coupled(x0, m0, kernel, mfd, solution, cfg["t_end"], streams, cfg["sample_times"], cfg["L"])
    gap = float(np.max(np.abs(res.Y - res.Y_recomputed))) if len(res.Y) else 0.0
    out = {
        "N": n,
        "replica": replica,
        "Y_over_N": res.Y / n,
        "mean_error": float(res.error_values.mean()) if res.n_jumps else np.nan,
        "first_error": res.first_jump_error if res.first_jump_error is not None else np.nan,
        "n_jumps": res.n_jumps,
        "Y_gap": gap,
        "emb_final": mfd.embed(res.particles[1][-1]).reshape(n, -1),
        "trajectory": (res.particles[0], res.particles[1]) if cfg["trajectories"] != "none" else None,
    }
    resamples = cfg["statistics"]["w1_resamples"]
    if resamples and _WORKER.get("want_w1"):
        rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(TAG_W1, n, replica)))
        f_end = solution.snapshots[-1]
        out["w1"] = w1_vs_density(res.particles[0][-1], res.particles[1][-1], f_end, resamples, rng)[0]
    return out


def _solve_for(cfg, mfd, kernel, t_end=None):
    s = cfg["solver"]
    f0 = initial_grid(cfg, mfd)
    return solve(
        f0,
        cfg["t_end"] if t_end is None else t_end,
        s["dt"],
        kernel,
        a=s.get("a"),
        picard_tol=s["picard_tol"],
        max_iters=s["max_iters"],
        mass_tol=s["mass_tol"],
    )


def _coupled_sweep(cfg, rec, mfd, kernel, eps, threads, budget, want_w1=False):
    solution = _solve_for(cfg, mfd, kernel)
    rec.add("solver_mass_drift", solution.cumulative_drift, eps=eps, t=cfg["t_end"])
    jobs = [(n, r, eps) for n in cfg["N"] for r in range(cfg["replicas"])]
    state = {"cfg": cfg, "solution": solution, "kernel": kernel, "mfd": mfd, "want_w1": want_w1}
    results = _map_jobs(_coupled_job, jobs, threads, state, budget, "during the coupled sweep")
    by_n = {n: [r for r in results if r["N"] == n] for n in cfg["N"]}
    times = np.asarray(sorted(cfg["sample_times"]), dtype=float)
    summary = {}
    for n, rs in by_n.items():
        worst = max(r["Y_gap"] for r in rs)
        if worst > Y_TOLERANCE * max(1.0, n):
            raise InvariantError(f"maintained Y differs from its recomputation by {worst:.3e} (N={n})")
        Y = np.array([r["Y_over_N"] for r in rs])
        err = np.array([r["mean_error"] for r in rs])
        first = np.array([r["first_error"] for r in rs])
        for r in rs:
            for t, y in zip(times, r["Y_over_N"]):
                rec.add_replica("Y_over_N", y, r["replica"], N=n, eps=eps, t=t)
            rec.add_replica("mean_error", r["mean_error"], r["replica"], N=n, eps=eps, t=cfg["t_end"])
            rec.add_replica("n_jumps", r["n_jumps"], r["replica"], N=n, eps=eps, t=cfg["t_end"])
        se = Y.std(axis=0, ddof=1) / np.sqrt(len(rs)) if len(rs) > 1 else np.full(len(times), np.nan)
        for k, t in enumerate(times):
            rec.add("mean_Y_over_N", Y[:, k].mean(), se[k], N=n, eps=eps, t=t)
        rec.add("mean_error", np.nanmean(err), _se(err), N=n, eps=eps, t=cfg["t_end"])
        rec.add("mean_first_jump_error", np.nanmean(first), _se(first), N=n, eps=eps, t=cfg["t_end"])
        summary[n] = {
            "Y": Y[:, -1].mean(),
            "Y_se": se[-1],
            "error": np.nanmean(err),
            "first_error": np.nanmean(first),
            "emb": np.array([r["emb_final"] for r in rs]),
            "w1": [r["w1"] for r in rs if "w1" in r],
            "trajectories": [(r["replica"], r["trajectory"]) for r in rs if r["trajectory"] is not None],
        }
    ns = np.array(cfg["N"], dtype=float)
    if len(ns) > 1:
        rec.add("slope_Y_over_N", loglog_slope(ns, [summary[n]["Y"] for n in cfg["N"]]), eps=eps, t=cfg["t_end"])
        rec.add("slope_mean_error", loglog_slope(ns, [summary[n]["error"] for n in cfg["N"]]), eps=eps, t=cfg["t_end"])
    return solution, summary


def _se(v):
    v = np.asarray(v, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else None


def _write_trajectories(cfg, out_dir, summary, mfd):
    fmt = cfg["trajectories"]
    if fmt == "none":
        return []
    times = sorted(cfg["sample_times"])
    written = []
    for n, s in summary.items():
        records = [(rep, t, xs[k], ms[k]) for rep, (xs, ms) in s["trajectories"] for k, t in enumerate(times)]
        coord_dim = int(np.prod(mfd.coord_shape)) if mfd.coord_shape else 1
        if fmt == "csv":
            name = f"trajectories_N{n}.csv"
            bio.write_trajectory_csv(os.path.join(out_dir, name), records, cfg["d"], coord_dim)
        else:
            name = f"trajectories_N{n}.bin"
            bio.write_trajectory_binary(os.path.join(out_dir, name), records, n, cfg["d"], mfd.kind, cfg["seed"], coord_dim)
        written.append(name)
    return written


def run_poc(cfg, rec, out_dir, threads, budget):
    mfd = build_manifold(cfg)
    kernel = build_kernel(cfg)
    eps = cfg["kernel"]["epsilon"]
    _, summary = _coupled_sweep(cfg, rec, mfd, kernel, eps, threads, budget, want_w1=True)
    for n, s in summary.items():
        emb = s["emb"]
        if emb.shape[0] >= 3 and n >= 2:
            for i in range(emb.shape[2]):
                for j in range(i, emb.shape[2]):
                    cov, se = chaoticity_covariance(emb[..., i], emb[..., j])
                    rec.add(f"cov_e{i}_e{j}", cov, se, N=n, eps=eps, t=cfg["t_end"])
        if s["w1"]:
            rec.add("w1_vs_solver", np.mean(s["w1"]), _se(s["w1"]), N=n, eps=eps, t=cfg["t_end"])
    files = _write_trajectories(cfg, out_dir, summary, mfd)
    return {"summary": summary, "files": files}


def run_couple(cfg, rec, out_dir, threads, budget):
    mfd = build_manifold(cfg)
    kernel = build_kernel(cfg)
    eps = cfg["kernel"]["epsilon"]
    _, summary = _coupled_sweep(cfg, rec, mfd, kernel, eps, threads, budget)
    lam = mfd.velocity_bounds[0]
    t = cfg["t_end"]
    ns = cfg["N"]
    env = {n: coupling_envelope_log(n, t, kernel, lam) for n in ns}
    # anchor C at the largest N, where the envelope is tightest relative to the data
    anchor = max(ns)
    log_c = math.log(summary[anchor]["Y"]) - env[anchor]
    rec.add("envelope_logC", log_c, N=anchor, eps=eps, t=t)
    for n in ns:
        rec.add("envelope_log", env[n], N=n, eps=eps, t=t)
        rec.add("envelope_ratio", math.exp(math.log(summary[n]["Y"]) - log_c - env[n]), N=n, eps=eps, t=t)
    files = _write_trajectories(cfg, out_dir, summary, mfd)
    return {"summary": summary, "envelope_log": env, "log_C": log_c, "files": files}


def run_moderate(cfg, rec, out_dir, threads, budget):
    mfd = build_manifold(cfg)
    schedule = sorted(cfg["eps_schedule"], reverse=True)
    # (a) particle -> kinetic limit at the widest kernel of the schedule
    _, summary = _coupled_sweep(cfg, rec, mfd, build_kernel(cfg, schedule[0]), schedule[0], threads, budget)
    # (b) kernel -> local limit of the solver along the schedule
    local = _solve_for(cfg, mfd, LOCAL)
    budget.check("after the local solve")
    rec.add("local_horizon", local.horizon, t=cfg["t_end"])
    l1 = {}
    for eps in schedule:
        sol = _solve_for(cfg, mfd, build_kernel(cfg, eps))
        l1[eps] = sol.snapshots[-1].l1(local.snapshots[-1])
        rec.add("l1_kernel_vs_local", l1[eps], eps=eps, t=cfg["t_end"])
        budget.check("during the epsilon sweep")
    # (c) the joint-limit admissibility quantity, informational only
    diag = {}
    for eps in schedule:
        k = build_kernel(cfg, eps)
        for n in cfg["N"]:
            val = joint_limit_log_diagnostic(k, cfg["t_end"], n)
            diag[(n, eps)] = val
            rec.add("log_joint_limit_diagnostic", val, N=n, eps=eps, t=cfg["t_end"])
            log.warning("joint-limit diagnostic N=%d eps=%g: log value %.4g (must tend to -inf)", n, eps, val)
    return {"summary": summary, "l1": l1, "joint_limit": diag}


# --- homogeneous process ------------------------------------------------------------


def _homog_job(job):
    n, replica = job
    cfg, mfd = _WORKER["cfg"], _WORKER["mfd"]
    streams = replica_streams(cfg["seed"], TAG_HOMOG, n, replica)
    m0 = VonMisesLaw(initial_flux(cfg, mfd), mfd).sample(streams.draws, n)
    traj = simulate_homogeneous(m0, mfd, cfg["t_end"], streams, cfg["sample_times"])
    obs = observable_dictionary(mfd)
    paths = {name: martingale_path(traj, obs[name], mfd, replica) for name in cfg["statistics"]["observables"]}
    flux = np.array([mfd.embed(m).reshape(n, -1).mean(axis=0) for m in traj.orientations])
    out = {"N": n, "replica": replica, "flux": flux, "paths": paths, "n_jumps": len(traj.log)}
    resamples = cfg["statistics"]["w1_resamples"]
    if resamples:
        rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(TAG_W1, n, replica)))
        nu_end = HomogeneousDensity(_WORKER["nu_end"], mfd)
        out["w1"] = w1_vs_node_masses(traj.orientations[-1], nu_end, resamples, rng)[0]
    if cfg["trajectories"] != "none":
        out["trajectory"] = traj.orientations
    return out


def run_homog(cfg, rec, out_dir, threads, budget):
    mfd = build_manifold(cfg)
    obs_all = observable_dictionary(mfd)
    unknown = [o for o in cfg["statistics"]["observables"] if o not in obs_all]
    if unknown:
        raise ConfigError(f"/statistics/observables: unknown observables {unknown}; choose from {sorted(obs_all)}")
    dt = cfg["statistics"]["homogeneous_dt"]
    J0 = initial_flux(cfg, mfd)
    nu0 = HomogeneousDensity.from_density(node_densities(J0, mfd), mfd)
    t_ode, masses = homogeneous_solve(nu0, cfg["t_end"], dt)
    _, J_ode = flux_ode(mean_flux(J0, mfd), cfg["t_end"], dt, mfd)
    times = np.asarray(sorted(cfg["sample_times"]), dtype=float)
    idx = np.rint(times / dt).astype(int)
    if np.any(np.abs(idx * dt - times) > 1e-9):
        raise ConfigError("/sample_times must be multiples of /statistics/homogeneous_dt")
    J_meas = masses @ mfd.node_embeddings
    jobs = [(n, r) for n in cfg["N"] for r in range(cfg["replicas"])]
    state = {"cfg": cfg, "mfd": mfd, "nu_end": masses[idx[-1]]}
    results = _map_jobs(_homog_job, jobs, threads, state, budget, "during the homogeneous sweep")
    details = {"times": times, "J_ode": J_ode[idx], "J_measure": J_meas[idx], "per_N": {}}
    for k, t in enumerate(times):
        rec.add("flux_norm_ode", np.linalg.norm(J_ode[idx[k]]), t=t)
        rec.add("flux_norm_measure_ode", np.linalg.norm(J_meas[idx[k]]), t=t)
    for n in cfg["N"]:
        rs = [r for r in results if r["N"] == n]
        flux = np.array([r["flux"] for r in rs])
        mean = flux.mean(axis=0)
        se = flux.std(axis=0, ddof=1) / np.sqrt(len(rs)) if len(rs) > 1 else np.full_like(mean, np.nan)
        for k, t in enumerate(times):
            rec.add("flux_norm_particles", np.linalg.norm(mean[k]), t=t, N=n)
            for c in range(mean.shape[1]):
                rec.add(f"flux_component_{c}", mean[k, c], se[k, c], t=t, N=n)
        per = {"flux_mean": mean, "flux_se": se, "martingale": {}}
        for name in cfg["statistics"]["observables"]:
            st = martingale_stats([r["paths"][name] for r in rs], obs_all[name], mfd, n)
            per["martingale"][name] = st
            for k, t in enumerate(times):
                rec.add(f"martingale_mean_{name}", st["mean_M"][k], st["se_M"][k], t=t, N=n)
                rec.add(f"martingale_qv_gap_{name}", st["mean_M2_minus_comp"][k], st["se_M2_minus_comp"][k], t=t, N=n)
                rec.add(f"martingale_sup_M2_{name}", st["mean_sup_M2"][k], t=t, N=n)
                rec.add(f"martingale_sup_bound_{name}", st["sup_bound"][k], t=t, N=n)
        w1 = [r["w1"] for r in rs if "w1" in r]
        if w1:
            per["w1"] = (float(np.mean(w1)), _se(w1))
            rec.add("w1_vs_measure_ode", np.mean(w1), _se(w1), t=times[-1], N=n)
        for r in rs:
            rec.add_replica("n_jumps", r["n_jumps"], r["replica"], N=n, t=cfg["t_end"])
        details["per_N"][n] = per
        if cfg["trajectories"] != "none":
            records = [(r["replica"], t, None, r["trajectory"][k]) for r in rs for k, t in enumerate(times)]
            coord_dim = int(np.prod(mfd.coord_shape)) if mfd.coord_shape else 1
            if cfg["trajectories"] == "csv":
                bio.write_trajectory_csv(os.path.join(out_dir, f"trajectories_N{n}.csv"), records, 0, coord_dim)
            else:
                bio.write_trajectory_binary(
                    os.path.join(out_dir, f"trajectories_N{n}.bin"), records, n, 0, mfd.kind, cfg["seed"], coord_dim
                )
    return details


# --- solver-only experiment ---------------------------------------------------------


def run_solve(cfg, rec, out_dir, threads, budget):
    mfd = build_manifold(cfg)
    s = cfg["solver"]
    kernel = LOCAL if s["mode"] == "local" else build_kernel(cfg)
    eps = None if kernel is LOCAL else cfg["kernel"]["epsilon"]
    sol = _solve_for(cfg, mfd, kernel)
    budget.check("after the solve")
    rec.add("mass_drift", sol.cumulative_drift, eps=eps, t=cfg["t_end"])
    rec.add("max_picard_iterations", max(sol.iterations), eps=eps, t=cfg["t_end"])
    for f in sol.snapshots:
        rec.add("flux_norm", float(np.linalg.norm(f.local_flux().mean(axis=tuple(range(f.d))) * cfg["L"] ** cfg["d"])), eps=eps, t=f.t)
    # one-step Lipschitz ratio of the fixed-point map on perturbed inputs
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(4,)))
    f0 = sol.snapshots[0]
    g1 = f0.replace(f0.values * (1 + 0.2 * rng.random(f0.values.shape))).normalized()
    g2 = g1.replace(g1.values * (1 + 0.01 * rng.standard_normal(f0.values.shape))).normalized()
    ratio = picard_map(f0, g1, s["dt"], kernel).l1(picard_map(f0, g2, s["dt"], kernel)) / g1.l1(g2)
    bound = contraction_bound(f0, kernel, sol.a) * s["dt"]
    rec.add("contraction_ratio", ratio, eps=eps, t=s["dt"])
    rec.add("contraction_bound", bound, eps=eps, t=s["dt"])
    diag = stability_diagnostics(sol.snapshots, shifts=[(1,) + (0,) * (cfg["d"] - 1)], radius=cfg["L"] / 2)
    for tr in diag["translation"]:
        rec.add("translation_ratio", tr["sup_ratio"], eps=eps, t=cfg["t_end"])
    if diag["tightness"]:
        rec.add("outside_mass_final", diag["tightness"]["outside_final"], eps=eps, t=cfg["t_end"])
        rec.add("outside_mass_initial", diag["tightness"]["outside_initial"], eps=eps, t=cfg["t_end"])
    for e in diag["equicontinuity"]:
        rec.add("time_increment_l1", e["max_l1"], eps=eps, t=e["h"])
    files = []
    if s["write_density"]:
        name = f"density_t{cfg['t_end']:g}.csv"
        bio.write_density_csv(os.path.join(out_dir, name), sol.snapshots[-1])
        files.append(name)
    return {"solution": sol, "diagnostics": diag, "files": files}


EXPERIMENTS = {"poc": run_poc, "couple": run_couple, "moderate": run_moderate, "homog": run_homog, "solve": run_solve}


def _sha256(data):
    return hashlib.sha256(data if isinstance(data, bytes) else data.encode("utf-8")).hexdigest()


def run(raw, seed=None, out_dir=None, threads=1, budget_seconds=None):
    """Run one experiment; raises ConfigError, InvariantError or BudgetExceeded."""
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = int(seed)
    if out_dir is not None:
        raw["output_dir"] = str(out_dir)
    cfg = resolve(raw)
    errors = [d for d in validate(raw) if d.level == "error"]
    if errors:
        raise ConfigError("; ".join(str(e) for e in errors))
    budget = Budget(budget_seconds)
    exp = cfg["experiment"]
    target = os.path.join(cfg["output_dir"], exp)
    os.makedirs(target, exist_ok=True)
    rec = Recorder(exp, cfg["seed"])
    try:
        details = EXPERIMENTS[exp](cfg, rec, target, max(1, int(threads)), budget)
    except SolverError as exc:
        raise InvariantError(str(exc)) from exc
    aggregate = rec.aggregate_csv()
    replicas = rec.replicas_csv()
    files = {"aggregate.csv": aggregate, "replicas.csv": replicas}
    for name, text in files.items():
        with open(os.path.join(target, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    hashes = {name: _sha256(text) for name, text in files.items()}
    for name in details.get("files", []):
        with open(os.path.join(target, name), "rb") as fh:
            hashes[name] = _sha256(fh.read())
    manifest = {
        "experiment": exp,
        "config": cfg,
        "tolerances": {
            "picard_tol": cfg["solver"]["picard_tol"],
            "mass_tol": cfg["solver"]["mass_tol"],
            "Y_recompute_tol": Y_TOLERANCE,
            "max_picard_iterations": cfg["solver"]["max_iters"],
        },
        "files": hashes,
        "content_hash": _sha256("".join(hashes[k] for k in sorted(hashes))),
    }
    with open(os.path.join(target, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return RunResult(exp, target, rec, manifest, details)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
