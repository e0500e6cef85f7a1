"""Registered experiments and report emission.

Each experiment takes an :class:`ExperimentConfig`, runs its Monte Carlo or
deterministic checks and returns a :class:`Report`; ``Report.write`` emits a
CSV of raw rows and a JSON summary.  Paths are generated in fixed chunks of
path ids and reduced in chunk order, so results do not depend on the number
of workers (``FRACGIRSANOV_WORKERS``).
"""

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from . import registry
from ._accel import backend
from .fractional import (TimeGrid, covariance, fbm_cholesky_oracle, fbm_from_increments,
                         Increments, kernel_cell_weights, sample_increment_batch)
from .girsanov import (cf_determinant_closed, cf_determinant_spectral, chain_rule_derivative,
                       forward_density, forward_transform, inverse_density, inverse_transform,
                       shift_derivative, transformed_functional)
from .malliavin import (derivative_field, eval_functional, finite_difference_directional,
                        skorokhod_integral, sobolev_samples)
from .sde import (InitialCondition, duality_terms, perturbation_probe, solve_skorokhod_sde,
                  temporal_forward_check, temporal_inverse_check, validate_drift)
from .stats import McStats, mc_summarize, paired_summary

SCHEMA_VERSION = 1
WORKERS_ENV = "FRACGIRSANOV_WORKERS"
CHUNK = 2000
N_CEILING = 512
SAMPLE_CEILING = 10 ** 6

TOLERANCES = {
    "z": 3.0,
    "gram_rel": 0.02,
    "gram_rel_half": 1e-12,
    "gram_tmin": 0.1,
    "picard_tol": 1e-10,
    "max_iter": 60,
    "roundtrip_factor": 10.0,
    "cf_rel": 1e-3,
    "gbm_rel": 1e-8,
    "evolution_dt_factor": 1.0,
    "fd_rel": 0.01,
    "fd_eps": 1e-4,
    "temporal_dt_factor": 1.0,
}

BASE = {"hurst": 0.3, "n": 64, "samples": 10000, "seed": 1234}

# per-experiment overrides of BASE
DEFAULTS = {
    "gram-check": {"hurst": 0.25, "n": 256, "samples": 1},
    "generator-agreement": {},
    "duality-check": {},
    "picard-rate": {"samples": 100},
    "roundtrip": {"n": 128, "samples": 100},
    "cf-det-crosscheck": {"n": 128, "samples": 4},
    "girsanov-identity": {},
    "density-mass": {},
    "gbm-reduction": {"hurst": 0.5, "n": 256, "samples": 1000, "sigma": "const:0.5",
                      "drift": "zero", "x0": "1.0"},
    "mean-conservation": {"sigma": "0.5*sin@0.5", "drift": "sin", "x0": "1.0"},
    "sde-residual": {},
    "derivative-check": {"samples": 10},
}

EXPERIMENTS = tuple(DEFAULTS)

SDE_CASES = (("0.5*sin@0.5", "sin", "gauss@0.5", "cos@1.0"),
             ("0.4*cos@1.0", "sincos@0.5", "gauss@0.5", "sin@0.75"))
TEMPORAL_PROCESSES = ("0.4*sin@0.5:ramp", "0.3*tanh@0.25,0.75:decay", "0.4*cos@1.0:ramp",
                      "0.5*gauss@0.75:decay", "0.3*atan@0.25,1.0:ramp")


class ConfigError(ValueError):
    """Invalid configuration: unknown experiment, bad key, or resource ceiling exceeded."""


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    hurst: float = None
    n: int = None
    samples: int = None
    seed: int = None
    sigma: str = None
    drift: str = None
    x0: str = None
    functional: str = None
    tau: float = 1.0
    tolerances: dict = field(default_factory=dict)
    out: str = "results"

    def resolved(self):
        """Fill unset fields from the experiment defaults and validate."""
        if self.experiment not in DEFAULTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; known: {', '.join(EXPERIMENTS)}")
        vals = dict(BASE)
        vals.update(DEFAULTS[self.experiment])
        given = {k: v for k, v in asdict(self).items() if v is not None}
        vals.update({k: v for k, v in given.items() if k not in ("tolerances",)})
        unknown = set(self.tolerances) - set(TOLERANCES)
        if unknown:
            raise ConfigError(f"unknown tolerance keys {sorted(unknown)}")
        tol = dict(TOLERANCES)
        tol.update({k: float(v) for k, v in self.tolerances.items()})
        cfg = ExperimentConfig(**{**vals, "tolerances": tol})
        cfg._validate()
        return cfg

    def _validate(self):
        if not 0.0 < self.hurst < 1.0:
            raise ConfigError(f"hurst must lie in (0, 1), got {self.hurst}")
        if self.n < 1 or self.n > N_CEILING:
            raise ConfigError(f"grid size n = {self.n} outside [1, {N_CEILING}]")
        if self.samples < 1 or self.samples > SAMPLE_CEILING:
            raise ConfigError(f"sample count {self.samples} outside [1, {SAMPLE_CEILING}]")
        try:
            if self.sigma is not None:
                registry.step_process(self.sigma)
            if self.functional is not None:
                registry.functional(self.functional)
            if self.drift is not None:
                registry.drift_spec(self.drift)
            if self.x0 is not None:
                InitialCondition.parse(self.x0)
        except registry.RegistryError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def grid(self):
        return TimeGrid(self.n)

    def to_dict(self):
        """The experiment-defining fields; the output directory is not one of them."""
        d = asdict(self)
        d.pop("out")
        d["tolerances"] = dict(sorted(d["tolerances"].items()))
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Check:
    name: str
    value: float
    limit: float
    passed: bool
    detail: str = ""


@dataclass
class Report:
    config: ExperimentConfig
    checks: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    streams: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.checks) and all(c.passed for c in self.checks)

    def check(self, name, value, limit, passed=None, detail=""):
        value = float(value)
        ok = (value <= limit) if passed is None else bool(passed)
        self.checks.append(Check(name, value, float(limit), ok, detail))
        return ok

    def z_check(self, name, stats, detail=""):
        zmax = self.config.tolerances["z"]
        self.checks.append(Check(name, abs(stats.z), zmax, abs(stats.z) <= zmax, detail))

    def summary(self):
        cfg = self.config
        return _clean({
            "schema_version": SCHEMA_VERSION,
            "experiment": cfg.experiment,
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "seed": cfg.seed,
            "grid": {"n": cfg.n, "dt": 1.0 / cfg.n},
            "hurst": cfg.hurst,
            "samples": cfg.samples,
            "rng": {"generator": "philox", "key": "(seed, crc32(tag) << 32 | path_id)",
                    "chunk": CHUNK, "streams": self.streams},
            "backend": backend(),
            "tolerances": cfg.tolerances,
            "checks": [asdict(c) for c in self.checks],
            "diagnostics": self.diagnostics,
            "passed": self.passed,
        })

    def write(self, out=None):
        """Write <experiment>.csv and <experiment>.json; returns the two paths."""
        out = Path(out or self.config.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = out / self.config.experiment
        fields = []
        for row in self.rows:
            for key in row:
                if key not in fields:
                    fields.append(key)
        with open(f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields or ["empty"], restval="",
                                    lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})
        with open(f"{stem}.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=False, allow_nan=False)
            fh.write("\n")
        return Path(f"{stem}.csv"), Path(f"{stem}.json")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# Monte Carlo plumbing


def workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from None


def chunks(N, size=CHUNK):
    return [np.arange(lo, min(N, lo + size)) for lo in range(0, N, size)]


def mc_map(fn, weights, seed, tag, N):
    """Apply ``fn`` to path batches for ids 0..N-1 and concatenate its dict outputs in id order."""
    grid = weights.grid

    def work(ids):
        omega = fbm_from_increments(weights, sample_increment_batch(seed, tag, ids, grid))
        return fn(omega)

    parts = chunks(N)
    nw = workers()
    if nw == 1 or len(parts) == 1:
        results = [work(ids) for ids in parts]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(work, parts))
    return {k: np.concatenate([np.atleast_1d(r[k]) for r in results], axis=0) for k in results[0]}


def paths(weights, seed, tag, N):
    return fbm_from_increments(weights, sample_increment_batch(seed, tag, np.arange(N), weights.grid))


def coarse_pair(hurst, n, seed, tag, N):
    """Paths on grids n and 2n driven by the same Brownian increments."""
    fine_w = kernel_cell_weights(hurst, TimeGrid(2 * n))
    coarse_w = kernel_cell_weights(hurst, TimeGrid(n))
    fine = paths(fine_w, seed, tag, N)
    dW = fine.dW.reshape(N, n, 2).sum(axis=-1)
    coarse = fbm_from_increments(coarse_w, Increments(dW, fine.increments.stream_id))
    return coarse, fine


def _suite(cfg, default):
    return (cfg.sigma,) if cfg.sigma is not None else default


def _stats_row(label, stats, **extra):
    row = dict(extra)
    row.update({"quantity": label, "mean": stats.mean, "se": stats.se, "target": stats.target,
                "z": stats.z, "n_samples": stats.n})
    return row


# ---------------------------------------------------------------------------
# experiments


def gram_check(cfg):
    rep = Report(cfg)
    grid = cfg.grid
    w = kernel_cell_weights(cfg.hurst, grid)
    G = w.gram()
    t = grid.nodes
    C = covariance(cfg.hurst, t[:, None], t[None, :])
    keep = np.nonzero(t >= cfg.tolerances["gram_tmin"])[0]
    sub = np.abs(G - C)[np.ix_(keep, keep)] / C[np.ix_(keep, keep)]
    for a, i in enumerate(keep):
        for b in range(a, len(keep)):
            k = keep[b]
            rep.rows.append({"i": int(i), "k": int(k), "t_i": t[i], "t_k": t[k],
                             "gram": G[i, k], "covariance": C[i, k], "rel_err": sub[a, b]})
    limit = cfg.tolerances["gram_rel_half"] if cfg.hurst == 0.5 else cfg.tolerances["gram_rel"]
    rep.check("gram_max_rel", sub.max() if sub.size else 0.0, limit,
              detail=f"node pairs with t >= {cfg.tolerances['gram_tmin']}")
    upper = np.triu(w.matrix)  # entries with j >= i, rows indexed by node i
    rep.check("triangular", float(np.max(np.abs(upper), initial=0.0)), 0.0)
    rep.diagnostics["node_variance_max_abs"] = float(np.max(np.abs(np.diag(G) - t ** (2 * cfg.hurst))))
    rep.diagnostics["scheme"] = w.scheme
    return rep


def generator_agreement(cfg):
    rep = Report(cfg)
    grid = cfg.grid
    w = kernel_cell_weights(cfg.hurst, grid)
    rep.streams = {"paths": "kernel generator", "cholesky": "Cholesky oracle"}
    kern = mc_map(lambda om: {"x": om.values[:, 1:]}, w, cfg.seed, "paths", cfg.samples)["x"]
    chol = np.concatenate([fbm_cholesky_oracle(cfg.hurst, grid, (cfg.seed, "cholesky", ids), w,
                                               with_increments=False).values[:, 1:]
                           for ids in chunks(cfg.samples)])
    worst = {}
    for label, x in (("kernel", kern), ("cholesky", chol)):
        zm, zv = [], []
        for i in range(grid.n):
            t = grid.nodes[i + 1]
            m = mc_summarize(x[:, i], 0.0)
            v = mc_summarize(x[:, i] ** 2, t ** (2 * cfg.hurst))
            zm.append(abs(m.z))
            zv.append(abs(v.z))
            rep.rows.append(_stats_row("mean", m, generator=label, node=i + 1, t=t))
            rep.rows.append(_stats_row("variance", v, generator=label, node=i + 1, t=t))
        worst[label] = (max(zm), max(zv))
        rep.check(f"{label}_mean_max_abs_z", max(zm), cfg.tolerances["z"])
        rep.check(f"{label}_variance_max_abs_z", max(zv), cfg.tolerances["z"])
    two = [abs(mc_summarize(kern[:, i] ** 2, 0).mean - mc_summarize(chol[:, i] ** 2, 0).mean)
           / math.hypot(mc_summarize(kern[:, i] ** 2).se, mc_summarize(chol[:, i] ** 2).se)
           for i in range(grid.n)]
    rep.diagnostics["two_sample_second_moment_max_abs_z"] = max(two)
    return rep


def duality_check(cfg):
    rep = Report(cfg)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    pairs = ((cfg.functional or "cos@1.0", cfg.sigma),) if cfg.sigma else registry.DUALITY_SUITE
    rep.streams = {"paths": "base paths"}
    for Gk, uk in pairs:
        G = registry.functional(Gk)
        u = registry.step_process(uk)

        def fn(om):
            d = skorokhod_integral(u, om, cfg.tau)
            m = om.grid.index_of(cfg.tau)
            pair = derivative_field(G, om).pair(np.where(np.arange(om.grid.n) < m, u.on_path(om), 0.0))
            return {"lhs": eval_functional(G, om) * d, "rhs": pair, "d": d,
                    "norm": sobolev_samples(u, om)}

        r = mc_map(fn, w, cfg.seed, "paths", cfg.samples)
        dual = paired_summary(r["lhs"], r["rhs"])
        d2 = mc_summarize(r["d"] ** 2)
        nrm = mc_summarize(r["norm"])
        mean_d = mc_summarize(r["d"], 0.0)
        se = math.hypot(d2.se, nrm.se)
        rep.rows.append(_stats_row("G*delta - (DG,u)", dual, G=Gk, u=uk))
        rep.rows.append(_stats_row("delta^2", d2, G=Gk, u=uk))
        rep.rows.append(_stats_row("||u||_12^2", nrm, G=Gk, u=uk))
        rep.rows.append(_stats_row("delta", mean_d, G=Gk, u=uk))
        rep.z_check(f"duality[{Gk} | {uk}]", dual)
        rep.check(f"divergence_bound[{uk}]", d2.mean - nrm.mean, cfg.tolerances["z"] * se,
                  detail="E[delta^2] - ||u||_12^2 <= 3 combined SE")
        rep.diagnostics[f"mean_delta_z[{uk}]"] = mean_d.z
    return rep


def picard_rate(cfg):
    rep = Report(cfg)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    om = paths(w, cfg.seed, "paths", cfg.samples)
    tol, max_iter = cfg.tolerances["picard_tol"], int(cfg.tolerances["max_iter"])
    rep.streams = {"paths": "base paths"}
    for key in _suite(cfg, registry.SIGMA_SUITE):
        s = registry.step_process(key)
        C = s.c_sigma
        fam = forward_transform(s, om, tol=tol, max_iter=max_iter, trace="exact")
        sl = inverse_transform(s, om, 1.0, tol=tol, max_iter=max_iter, trace="exact")
        ok = True
        for direction, trace in (("forward", fam.trace), ("inverse", sl.trace)):
            for k, inc in enumerate(trace, start=1):
                env = C ** k / math.sqrt(math.factorial(k))
                ok &= direction == "inverse" or inc <= env
                rep.rows.append({"sigma": key, "direction": direction, "iteration": k,
                                 "increment": inc, "envelope": env})
        ratio = max(inc / (C ** k / math.sqrt(math.factorial(k))) for k, inc in
                    enumerate(fam.trace, start=1)) if C > 0 else 0.0
        rep.check(f"envelope[{key}]", ratio, 1.0, passed=ok,
                  detail="max increment / C^n / sqrt(n!) over iterations")
        rep.check(f"iterations[{key}]", fam.iterations, max_iter)
        inv_ratio = max((inc / (C ** k / math.sqrt(math.factorial(k))) for k, inc in
                         enumerate(sl.trace, start=1)), default=0.0) if C > 0 else 0.0
        rep.diagnostics[f"inverse_envelope_ratio[{key}]"] = inv_ratio
        rep.diagnostics[f"inverse_iterations[{key}]"] = sl.iterations
    return rep


def roundtrip(cfg):
    rep = Report(cfg)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    om = paths(w, cfg.seed, "paths", cfg.samples)
    tol = cfg.tolerances["picard_tol"]
    limit = cfg.tolerances["roundtrip_factor"] * tol
    rep.streams = {"paths": "base paths"}
    for key in _suite(cfg, registry.SIGMA_SUITE):
        s = registry.step_process(key)
        famT = forward_transform(s, om, tol=tol, trace="bound")
        for t in (0.25, 0.5, 1.0):
            m = cfg.grid.index_of(t)
            sl = inverse_transform(s, om, t, tol=tol)
            famA = forward_transform(s, sl.path(0.0), tol=tol, trace="bound")
            TA = famA.table()[..., :m + 1, :]
            rt = float(np.max(np.abs(TA[..., m, :] - om.values)))
            r1 = float(np.max(np.abs(TA - sl.table())))
            slT = inverse_transform(s, famT.path(t), t, tol=tol)
            r2 = float(np.max(np.abs(slT.table() - famT.table()[..., :m + 1, :])))
            rep.rows.append({"sigma": key, "t": t, "roundtrip": rt, "T_v_of_A_t": r1,
                             "A_vt_of_T_t": r2})
            rep.check(f"roundtrip[{key}, t={t}]", rt, limit)
            rep.check(f"T_v(A_t)=A_vt[{key}, t={t}]", r1, limit)
            rep.check(f"A_vt(T_t)=T_v[{key}, t={t}]", r2, limit)
    return rep


def _cf_gaps(s, om):
    out = {}
    fam = forward_transform(s, om)
    K = shift_derivative(s, fam)
    cl = cf_determinant_closed(K)
    sl = inverse_transform(s, om, 1.0)
    Ki = shift_derivative(s, sl)
    cli = cf_determinant_closed(Ki)
    for direction, kern, closed in (("forward", K, cl), ("inverse", Ki, cli)):
        ops = kern.operator()
        gaps = [abs(closed[p] - cf_determinant_spectral(ops[p]).value)
                / cf_determinant_spectral(ops[p]).value for p in range(ops.shape[0])]
        out[direction] = float(max(gaps))
    return out


def cf_det_crosscheck(cfg):
    rep = Report(cfg)
    coarse, fine = coarse_pair(cfg.hurst, cfg.n, cfg.seed, "paths", cfg.samples)
    rep.streams = {"paths": f"Brownian increments on the {2 * cfg.n}-cell grid, pair-summed for n"}
    floor = 1e-14
    for key in _suite(cfg, registry.SIGMA_SUITE):
        s = registry.step_process(key)
        g1 = _cf_gaps(s, coarse)
        g2 = _cf_gaps(s, fine)
        for direction in ("forward", "inverse"):
            a, b = g1[direction], g2[direction]
            rep.rows.append({"sigma": key, "direction": direction, "n": cfg.n, "rel_gap": a})
            rep.rows.append({"sigma": key, "direction": direction, "n": 2 * cfg.n, "rel_gap": b})
            rep.check(f"closed_vs_spectral[{direction}, {key}]", a, cfg.tolerances["cf_rel"])
            rep.check(f"gap_shrinks[{direction}, {key}]", b, a,
                      passed=b < a or max(a, b) <= floor,
                      detail=f"gap at 2n below gap at n (or both <= {floor})")
    return rep


def girsanov_identity(cfg):
    rep = Report(cfg)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    pairs = ((cfg.functional or "cos@1.0", cfg.sigma),) if cfg.sigma else registry.GIRSANOV_SUITE
    rep.streams = {"paths": "base paths"}
    t = cfg.tau
    for Gk, sk in pairs:
        G = registry.functional(Gk)
        s = registry.step_process(sk)

        def fn(om):
            fam = forward_transform(s, om, tol=cfg.tolerances["picard_tol"], trace="bound")
            dens = inverse_density(s, om, fam, t=t).value[..., 0]
            return {"lhs": transformed_functional(G, fam, t) * dens,
                    "rhs": eval_functional(G, om), "L": dens}

        r = mc_map(fn, w, cfg.seed, "paths", cfg.samples)
        diff = paired_summary(r["lhs"], r["rhs"])
        mass = mc_summarize(r["L"], 1.0)
        rep.rows.append(_stats_row("G(T_t) Lc_t - G", diff, G=Gk, sigma=sk))
        rep.rows.append(_stats_row("Lc_t", mass, G=Gk, sigma=sk))
        rep.diagnostics[f"E[G(T_t) Lc_t][{Gk} | {sk}]"] = float(np.mean(r["lhs"]))
        rep.diagnostics[f"E[G][{Gk} | {sk}]"] = float(np.mean(r["rhs"]))
        rep.z_check(f"identity[{Gk} | {sk}]", diff)
        rep.z_check(f"mass[{sk}]", mass)
    return rep


def density_mass(cfg):
    rep = Report(cfg)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    rep.streams = {"paths": "base paths"}
    t = cfg.tau
    for key in _suite(cfg, registry.SIGMA_SUITE):
        s = registry.step_process(key)

        def fn(om):
            Lc = inverse_density(s, om, t=t).value[..., 0]
            L = forward_density(s, om, t=t).value[..., 0]
            return {"Lc": Lc, "L": L}

        r = mc_map(fn, w, cfg.seed, "paths", cfg.samples)
        for label in ("Lc", "L"):
            st = mc_summarize(r[label], 1.0)
            rep.rows.append(_stats_row(label, st, sigma=key))
            rep.z_check(f"mass_{label}[{key}]", st)
            rep.check(f"positive_{label}[{key}]", float(np.min(r[label])), 0.0,
                      passed=bool(np.all(r[label] > 0)), detail="minimum density value")
        x = r["L"]
        rep.diagnostics[f"E[L log L][{key}]"] = float(np.mean(x * np.abs(np.log(x))))
    return rep


def gbm_reduction(cfg):
    rep = Report(cfg)
    s = registry.step_process(cfg.sigma)
    if not s.deterministic:
        raise ConfigError("gbm-reduction needs a deterministic sigma")
    drift = validate_drift(cfg.drift)
    if drift.name != "zero":
        raise ConfigError("gbm-reduction needs drift = zero")
    X0 = InitialCondition.parse(cfg.x0)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    rep.streams = {"paths": "base paths"}

    def fn(om):
        sol = solve_skorokhod_sde(s, drift, X0, om, tol=cfg.tolerances["picard_tol"])
        h = s.on_path(om)
        dt = om.grid.dt
        expo = np.concatenate([np.zeros((om.values.shape[0], 1)),
                               np.cumsum(h * om.dW - 0.5 * dt * h * h, axis=-1)], axis=-1)
        exact = X0.on_path(om)[:, None] * np.exp(expo)
        return {"rel": np.abs(sol.X - exact) / np.abs(exact), "X": sol.X}

    r = mc_map(fn, w, cfg.seed, "paths", cfg.samples)
    per_node = np.max(r["rel"], axis=0)
    for j, e in enumerate(per_node):
        rep.rows.append({"node": j, "t": j / cfg.n, "max_rel_err": e,
                         "mean_X": float(np.mean(r["X"][:, j]))})
    rep.check("max_rel_err", float(per_node.max()), cfg.tolerances["gbm_rel"])
    return rep


def _drift_coords(drift, om, shape):
    if not drift.anchors:
        return np.zeros(shape + (0,))
    idx = [om.grid.index_of(a) for a in drift.anchors]
    y = om.values[..., idx]
    return np.broadcast_to(y[..., None, :], shape + (len(idx),))


def mean_conservation(cfg):
    rep = Report(cfg)
    s = registry.step_process(cfg.sigma)
    X0 = InitialCondition.parse(cfg.x0)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    rep.streams = {"paths": "base paths (both parts)"}
    n, dt = cfg.n, 1.0 / cfg.n
    zero = validate_drift("zero")

    def fn0(om):
        return {"X": solve_skorokhod_sde(s, zero, X0, om, tol=cfg.tolerances["picard_tol"]).X}

    X = mc_map(fn0, w, cfg.seed, "paths", cfg.samples)["X"]
    zs = []
    for j in range(1, n + 1):
        st = paired_summary(X[:, j], X[:, 0])
        zs.append(abs(st.z))
        rep.rows.append(_stats_row("X_t - X_0 (b = 0)", st, node=j, t=j * dt))
    rep.check("conservation_max_abs_z", max(zs), cfg.tolerances["z"])

    drift = validate_drift(cfg.drift)

    def fn1(om):
        sol = solve_skorokhod_sde(s, drift, X0, om, tol=cfg.tolerances["picard_tol"])
        tt = np.arange(n + 1) * dt
        b = drift(tt, sol.X, _drift_coords(drift, om, sol.X.shape))
        fd = (sol.X[:, 2:] - sol.X[:, :-2]) / (2 * dt)
        return {"d": fd - b[:, 1:-1]}

    d = mc_map(fn1, w, cfg.seed, "paths", cfg.samples)["d"]
    slack = cfg.tolerances["evolution_dt_factor"] * dt
    excess = []
    for j in range(1, n):
        st = mc_summarize(d[:, j - 1], 0.0)
        excess.append(abs(st.mean) - cfg.tolerances["z"] * st.se)
        rep.rows.append(_stats_row("dE[X]/dt - E[b(t, X)]", st, node=j, t=j * dt))
    rep.check("evolution_excess_over_3se", max(excess), slack,
              detail="max over interior nodes of |mean| - 3 SE, allowed O(dt) slack")
    return rep


def sde_residual(cfg):
    rep = Report(cfg)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    if cfg.sigma:
        cases = ((cfg.sigma, cfg.drift or "sin", cfg.x0 or "1.0", cfg.functional or "cos@1.0"),)
    else:
        cases = SDE_CASES
    rep.streams = {"paths": "base paths"}
    for sk, bk, xk, Gk in cases:
        s = registry.step_process(sk)
        drift = validate_drift(bk)
        X0 = InitialCondition.parse(xk)
        G = registry.functional(Gk)

        def fn(om):
            resid, terms = duality_terms(s, drift, X0, G, om, cfg.tau)
            return {"r": resid, **terms}

        r = mc_map(fn, w, cfg.seed, "paths", cfg.samples)
        st = mc_summarize(r["r"], 0.0)
        label = f"{sk} | {bk} | X0={xk} | G={Gk}"
        rep.rows.append(_stats_row("duality residual", st, case=label))
        for k in ("G_X_tau", "G_X_0", "G_int_b", "int_DG_sigma_X"):
            rep.rows.append(_stats_row(k, mc_summarize(r[k]), case=label))
        rep.z_check(f"residual[{label}]", st)
        probe = paths(w, cfg.seed, "probe", min(cfg.samples, 100))
        obs, bound = perturbation_probe(s, drift, X0, probe, t=cfg.tau)
        rep.diagnostics[f"perturbation[{label}]"] = {"observed": obs, "bound": bound}
    return rep


def _fd_along(G, fam, t, kernel, om, family_fn, h, eps):
    """Analytic and finite-difference derivative of omega -> G(family(omega)) along K h."""
    an = np.sum(chain_rule_derivative(G, fam, kernel, t) * h, axis=-1) * om.grid.dt
    bumped = fbm_from_increments(om.weights, Increments(om.dW + eps * h * om.grid.dt,
                                                        om.increments.stream_id))
    fd = (transformed_functional(G, family_fn(bumped), t) - transformed_functional(G, fam, t)) / eps
    return an, fd


def _rel(an, fd):
    scale = float(np.max(np.abs(an)))
    return float(np.max(np.abs(an - fd))) / scale if scale > 0 else float(np.max(np.abs(fd)))


def derivative_check(cfg):
    rep = Report(cfg)
    w = kernel_cell_weights(cfg.hurst, cfg.grid)
    om = paths(w, cfg.seed, "paths", cfg.samples)
    eps = cfg.tolerances["fd_eps"]
    h = np.ones(cfg.n)
    rep.streams = {"paths": "base paths", "temporal": "increments on the 2n grid"}
    sig_keys = _suite(cfg, registry.SIGMA_SUITE)
    for key, Gk in zip(sig_keys, registry.FUNCTIONAL_SUITE):
        s = registry.step_process(key)
        G = registry.functional(cfg.functional or Gk)
        fam = forward_transform(s, om)
        K = shift_derivative(s, fam)
        sl = inverse_transform(s, om, 1.0)
        Ki = shift_derivative(s, sl)
        an, fd = _fd_along(G, fam, 1.0, K, om, lambda b: forward_transform(s, b), h, eps)
        rf = _rel(an, fd)
        an, fd = _fd_along(G, sl, 0.0, Ki, om, lambda b: inverse_transform(s, b, 1.0), h, eps)
        ri = _rel(an, fd)
        bumped = fbm_from_increments(w, Increments(om.dW + eps * h * om.grid.dt, None))
        phi_fd = (forward_transform(s, bumped).shifts - fam.shifts) / eps
        phi_an = np.einsum("...sr,s->...r", K.matrix, h) * om.grid.dt
        rphi = _rel(phi_an, phi_fd) if s.k else float(np.max(np.abs(phi_fd)))
        for name, val in (("chain_forward", rf), ("chain_inverse", ri), ("shift_derivative", rphi)):
            rep.rows.append({"check": name, "sigma": key, "G": G.name, "rel_err": val})
            rep.check(f"{name}[{key} | {G.name}]", val, cfg.tolerances["fd_rel"])
    coarse, fine = coarse_pair(cfg.hurst, cfg.n, cfg.seed, "temporal", cfg.samples)
    for key, Fk, Gk in zip(sig_keys, TEMPORAL_PROCESSES, registry.FUNCTIONAL_SUITE):
        s = registry.step_process(key)
        F = registry.step_process(Fk)
        G = registry.functional(Gk)
        for name, fn, arg in (("temporal_forward", temporal_forward_check, F),
                              ("temporal_inverse", temporal_inverse_check, G)):
            errs = []
            for om_ in (coarse, fine):
                fd, an = fn(arg, s, om_)
                errs.append(float(np.max(np.abs(fd - an))))
            dt = 1.0 / cfg.n
            rep.rows.append({"check": name, "sigma": key, "F": arg.name, "n": cfg.n, "max_err": errs[0]})
            rep.rows.append({"check": name, "sigma": key, "F": arg.name, "n": 2 * cfg.n, "max_err": errs[1]})
            rep.check(f"{name}[{key} | {arg.name}]", errs[0],
                      cfg.tolerances["temporal_dt_factor"] * dt, detail="max |FD - analytic| <= c dt")
            rep.check(f"{name}_refines[{key} | {arg.name}]", errs[1], errs[0],
                      passed=errs[1] < errs[0] or errs[0] == 0.0, detail="error at 2n below error at n")
    return rep


RUNNERS = {
    "gram-check": gram_check,
    "generator-agreement": generator_agreement,
    "duality-check": duality_check,
    "picard-rate": picard_rate,
    "roundtrip": roundtrip,
    "cf-det-crosscheck": cf_det_crosscheck,
    "girsanov-identity": girsanov_identity,
    "density-mass": density_mass,
    "gbm-reduction": gbm_reduction,
    "mean-conservation": mean_conservation,
    "sde-residual": sde_residual,
    "derivative-check": derivative_check,
}


def run_experiment(config, write=True):
    """Resolve ``config``, run the experiment, optionally write its reports."""
    cfg = config.resolved()
    rep = RUNNERS[cfg.experiment](cfg)
    if write:
        rep.write()
    return rep


def config_with(cfg, **changes):
    return replace(cfg, **changes)
