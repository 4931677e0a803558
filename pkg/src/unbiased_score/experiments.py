"""Experiment harness: model registry, datasets, and report drivers.

Every driver consumes an ExperimentConfig (a versioned JSON document on
disk), runs a batch of estimator or optimizer replicates, and emits a CSV
with documented columns, a metadata sidecar, and a figure. Rows carry the
master seed and a hash of the config so result files are self-describing
and reruns are byte-identical (timestamps live only in the sidecar).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import reports
from .drivers import (
    PriorSpec,
    constant_schedule,
    polyak_ruppert,
    power_schedule,
    sga_run,
    sgld_run,
)
from .estimators import (
    EstimatorConfig,
    build_level_pmf,
    burnin_from_pilot,
    level_increments,
    pilot_stopping_times,
    replicate_scores,
    resolve_preset,
)
from .functional import base_step, segment_rate_sums
from .grid import build_irregular_grid, build_unit_grid
from .kernels import SweepOptions, init_trajectories
from .models import (
    ObservationSet,
    from_constrained,
    gridcell_model,
    logistic_model,
    ou_model,
)
from .oracles import ou_euler_ssm, ou_exact_ssm, kalman_score
from .rng import SeedSpec, derive_stream

__all__ = [
    "ExperimentConfig",
    "config_hash",
    "make_model",
    "default_theta",
    "grid_builder_for",
    "simulate_dataset",
    "write_dataset",
    "ingest",
    "load_observations",
    "build_estimator_config",
    "run_experiment",
    "EXPERIMENT_KINDS",
]

CONFIG_SCHEMA_VERSION = 1

_MODEL_BUILDERS = {
    "ou": ou_model,
    "logistic": logistic_model,
    "gridcell": gridcell_model,
}

_DEFAULT_THETA = {
    "ou": (2.0, 7.0, 1.0),
    "logistic": (2.397, 4.429e-3, 0.840, 17.631),
    "gridcell": (1.0,) * 12,
}

# lowest resolution level per model; for irregular grids this is nominal
# bookkeeping relative to the smallest observation gap
_DEFAULT_L_MIN = {"ou": 3, "logistic": 0, "gridcell": 6}
_DEFAULT_N = {"ou": 64, "logistic": 128, "gridcell": 128}

_SPIKE_DURATION = 20.0
_SPIKE_BINS = 64


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings for one experiment run, loadable from a JSON document."""

    kind: str = "estimate-score"
    model: str = "ou"
    theta: tuple = None            # constrained; None = model default
    preset: str = "simple"
    N: int = None
    b: int = None                  # explicit (b, I) override the preset
    I: int = None
    l_min: int = None
    pmf_kind: str = "sqrt"
    truncation: int = 12
    R: int = 100
    seed: int = 0
    out: str = "."
    kernel: str = "cpf"            # "cpf" or "caspf" (ancestor sampling)
    adaptive: bool = False
    coupling: str = "maximal"
    compare_coupling: str = None   # e.g. "common-uniform" comparator
    single_term: bool = False
    iteration_cap: int = 100_000
    pilot_size: int = 50
    chunk_rows: int = 0
    levels: tuple = None           # shifted levels for per-level experiments
    r_values: tuple = (8, 32, 128, 512)
    threads: int = 1               # accepted for CLI compatibility; unused
    # data source: user file or synthetic fixture
    data_path: str = None
    data_schema: str = None
    horizon: int = 25              # synthetic observation horizon (ou)
    n_obs: int = 41                # synthetic observation count (logistic)
    sim_level: int = 10            # latent-path resolution of fixtures
    # optimizer block
    iterations: int = None
    schedule: dict = None
    theta0: tuple = None           # constrained start
    prior_mean: tuple = None       # working space
    prior_var: tuple = None
    burn_fraction: float = 0.5

    def __post_init__(self):
        if self.model not in _MODEL_BUILDERS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.preset not in ("naive", "simple", "time-averaged"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.kernel not in ("cpf", "caspf"):
            raise ValueError(f"unknown kernel variant {self.kernel!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {version}")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("theta", "levels", "r_values", "theta0", "prior_mean", "prior_var"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d


def config_hash(cfg):
    """Short stable digest of a config, stamped on every emitted row.

    Fields that do not affect the computed numbers (output path, thread
    count) are excluded, so semantically identical runs share a hash.
    """
    d = cfg.to_dict()
    d.pop("out", None)
    d.pop("threads", None)
    blob = json.dumps(d, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def make_model(name):
    try:
        return _MODEL_BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}") from None


def default_theta(name):
    return np.asarray(_DEFAULT_THETA[name], dtype=float)


def _resolved_theta(cfg):
    theta = default_theta(cfg.model) if cfg.theta is None else np.asarray(cfg.theta, float)
    make_model(cfg.model).check_theta(theta)
    return theta


def grid_builder_for(model_name, obs):
    """Map shifted levels to grids for a model's observation layout.

    The regularly observed model uses dyadic unit-time grids; the other
    models subdivide the observation gaps, with the first observation time
    doubling as the grid start when it carries an observation.
    """
    if model_name == "ou":
        horizon = int(round(obs.times[-1]))
        expected = np.arange(1, horizon + 1, dtype=float)
        if not np.array_equal(obs.times, expected):
            raise ValueError("this model expects observations at times 1..T")
        l_min = _DEFAULT_L_MIN["ou"]
        return lambda j: build_unit_grid(l_min + j, horizon)
    if model_name == "logistic":
        times = obs.times
        return lambda j: build_irregular_grid(times, j)
    times = np.concatenate([[0.0], obs.times])
    return lambda j: build_irregular_grid(times, j)


# ---------------------------------------------------------------------------
# Datasets


def simulate_dataset(model_name, theta=None, seed=0, horizon=25, n_obs=41,
                     sim_level=10):
    """Synthetic fixture: a latent path at high resolution plus observations.

    Returns (obs, grid_times, path) where path is the (K+1, d) latent
    trajectory used to draw the observations.
    """
    model = make_model(model_name)
    theta = default_theta(model_name) if theta is None else np.asarray(theta, float)
    model.check_theta(theta)
    spec = SeedSpec(int(seed)).child("simulate").child(model_name)
    path_stream = derive_stream(spec.child("path"))
    obs_stream = derive_stream(spec.child("obs"))

    if model_name == "ou":
        grid = build_unit_grid(sim_level, horizon)
        path = init_trajectories(model, theta, grid, 1, path_stream)[0]
        x = path[grid.obs_index, 0]
        y = x + np.sqrt(theta[2]) * obs_stream.standard_normal(len(x))
        obs = ObservationSet(times=np.arange(1, horizon + 1, dtype=float),
                             values=y[:, None])
    elif model_name == "logistic":
        # irregular observation times on a quarter-unit lattice, first
        # observation at the start of the record
        gaps = obs_stream.integers(1, 5, size=n_obs - 1) * 0.25
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        grid = build_irregular_grid(times, min(sim_level, 8))
        path = init_trajectories(model, theta, grid, 1, path_stream)[0]
        idx = np.concatenate([[0], grid.obs_index])
        mu = np.exp(theta[2] * path[idx, 0])
        lam = obs_stream.gamma(theta[3], scale=(mu / theta[3])[:, None],
                               size=(n_obs, 2))
        y = obs_stream.poisson(lam)
        obs = ObservationSet(times=times, values=y.astype(float))
    elif model_name == "gridcell":
        times = np.arange(1, _SPIKE_BINS + 1) * (_SPIKE_DURATION / _SPIKE_BINS)
        grid = build_irregular_grid(np.concatenate([[0.0], times]),
                                    min(sim_level, 6))
        path = init_trajectories(model, theta, grid, 1, path_stream)[0]
        rate_sums = segment_rate_sums(model, theta, grid, path)
        lam = base_step(grid) * rate_sums
        y = obs_stream.poisson(lam)
        obs = ObservationSet(times=times, values=y.astype(float))
    else:
        raise ValueError(f"unknown model {model_name!r}")
    return obs, grid.times, path


_SCHEMA_HEADERS = {
    "ou": ["time", "y"],
    "counts": ["time", "y1", "y2"],
    "spikes": ["cell", "timestamp"],
}


def write_dataset(path, model_name, obs):
    """Write an observation set in its model's CSV schema."""
    if model_name == "ou":
        rows = [[t, v[0]] for t, v in zip(obs.times, obs.values)]
        header = _SCHEMA_HEADERS["ou"]
    else:
        rows = [[t, v[0], v[1]] for t, v in zip(obs.times, obs.values)]
        header = _SCHEMA_HEADERS["counts"]
    return reports.write_rows(path, header, rows)


def ingest(path, schema):
    """Parse and validate a dataset file into an ObservationSet.

    Schemas: "ou" (time, y); "counts" (time, y1, y2) for double-transect
    count records; "spikes" (cell, timestamp) with timestamps binned into
    64 equal intervals over a 20-second recording.
    """
    if schema == "kangaroo":
        schema = "counts"
    if schema not in _SCHEMA_HEADERS:
        raise ValueError(f"unknown schema {schema!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _SCHEMA_HEADERS[schema]:
            raise ValueError(
                f"expected header {_SCHEMA_HEADERS[schema]} in {path}, got {header}"
            )
        raw = []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(_SCHEMA_HEADERS[schema]):
                raise ValueError(f"malformed row {i + 2} in {path}: {row}")
            try:
                raw.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"non-numeric row {i + 2} in {path}: {row}") from None
    raw = np.asarray(raw, dtype=float)
    if len(raw) == 0:
        raise ValueError(f"no data rows in {path}")

    if schema == "ou":
        return ObservationSet(times=raw[:, 0], values=raw[:, 1:2])
    if schema == "counts":
        counts = raw[:, 1:3]
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("counts must be non-negative integers")
        return ObservationSet(times=raw[:, 0], values=counts)
    # spikes
    cells = raw[:, 0]
    stamps = raw[:, 1]
    if np.any((cells != 1) & (cells != 2)):
        raise ValueError("spike cell ids must be 1 or 2")
    if np.any(stamps < 0) or np.any(stamps > _SPIKE_DURATION):
        raise ValueError(f"spike timestamps must lie in [0, {_SPIKE_DURATION}]")
    dt = _SPIKE_DURATION / _SPIKE_BINS
    bins = np.minimum((stamps / dt).astype(int), _SPIKE_BINS - 1)
    counts = np.zeros((_SPIKE_BINS, 2))
    np.add.at(counts, (bins, cells.astype(int) - 1), 1.0)
    times = np.arange(1, _SPIKE_BINS + 1) * dt
    return ObservationSet(times=times, values=counts)


def load_observations(cfg):
    """The experiment's observation set: a user file or a synthetic fixture."""
    if cfg.data_path is not None:
        schema = cfg.data_schema
        if schema is None:
            schema = "ou" if cfg.model == "ou" else "counts"
        return ingest(cfg.data_path, schema)
    obs, _, _ = simulate_dataset(
        cfg.model, theta=cfg.theta, seed=cfg.seed, horizon=cfg.horizon,
        n_obs=cfg.n_obs, sim_level=cfg.sim_level,
    )
    return obs


# ---------------------------------------------------------------------------
# Estimator assembly


def build_estimator_config(cfg, model, theta, obs, seed_spec):
    """Resolve preset, pilot burn-in, grids and PMF into an EstimatorConfig."""
    builder = grid_builder_for(cfg.model, obs)
    l_min = _DEFAULT_L_MIN[cfg.model] if cfg.l_min is None else cfg.l_min
    N = _DEFAULT_N[cfg.model] if cfg.N is None else cfg.N
    pmf = build_level_pmf(cfg.pmf_kind, l_min, cfg.truncation)
    opts = SweepOptions(
        adaptive_resampling=cfg.adaptive,
        ancestor_sampling=(cfg.kernel == "caspf"),
        coupling=cfg.coupling,
    )
    base = EstimatorConfig(
        grid_builder=builder, N=N, b=0, I=0, l_min=l_min, pmf=pmf, opts=opts,
        iteration_cap=cfg.iteration_cap, chunk_rows=cfg.chunk_rows,
        single_term=cfg.single_term,
    )
    if cfg.b is not None or cfg.I is not None:
        b = 0 if cfg.b is None else cfg.b
        return replace(base, b=b, I=b if cfg.I is None else cfg.I)
    if cfg.preset == "naive":
        return base
    taus = pilot_stopping_times(
        model, theta, obs, base, seed_spec.child("pilot"), n_pilot=cfg.pilot_size
    )
    b, I = resolve_preset(cfg.preset, burnin_from_pilot(taus))
    return replace(base, b=b, I=I)


def _out_paths(cfg, out_dir):
    stem = cfg.kind.replace("-", "_")
    out = Path(out_dir if out_dir is not None else cfg.out)
    return out / f"{stem}.csv", out / f"{stem}.json", out / f"{stem}.png"


def _emit(cfg, csv_path, json_path, header, rows, t0, extra=None):
    reports.write_rows(csv_path, header, rows)
    meta = {"wall_time_s": time.perf_counter() - t0}
    if extra:
        meta.update(extra)
    reports.write_sidecar(json_path, cfg.to_dict(), cfg.seed, extra=meta)


# ---------------------------------------------------------------------------
# Experiment drivers


def run_simulate_data(cfg, out_dir=None):
    t0 = time.perf_counter()
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    obs, grid_times, path = simulate_dataset(
        cfg.model, theta=cfg.theta, seed=cfg.seed, horizon=cfg.horizon,
        n_obs=cfg.n_obs, sim_level=cfg.sim_level,
    )
    write_dataset(csv_path, cfg.model, obs)
    latent_path = csv_path.with_name(csv_path.stem + "_latent.csv")
    d = path.shape[1]
    reports.write_rows(
        latent_path,
        ["time"] + [f"x{i + 1}" for i in range(d)],
        [[t] + list(x) for t, x in zip(grid_times, path)],
    )
    reports.save_line_figure(
        fig_path, obs.times, [obs.values[:, i] for i in range(obs.values.shape[1])],
        [f"y{i + 1}" for i in range(obs.values.shape[1])],
        "time", "observation", f"synthetic {cfg.model} data",
    )
    meta = {"wall_time_s": time.perf_counter() - t0, "theta": _resolved_theta(cfg)}
    reports.write_sidecar(json_path, cfg.to_dict(), cfg.seed, extra=meta)
    return {"data": csv_path, "latent": latent_path, "figure": fig_path,
            "sidecar": json_path}


def run_estimate_score(cfg, out_dir=None):
    """R replicates of the randomized-level score estimator."""
    t0 = time.perf_counter()
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    model = make_model(cfg.model)
    theta = _resolved_theta(cfg)
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    est_cfg = build_estimator_config(cfg, model, theta, obs, spec)
    res = replicate_scores(model, theta, obs, est_cfg, spec.child("estimate"), cfg.R)
    h = config_hash(cfg)
    d = model.d_theta
    header = ["seed", "config", "replicate", "level"]
    header += [f"s{i + 1}" for i in range(d)]
    header += ["cost", "euler_steps", "tau_bar_l0", "failed"]
    rows = []
    for r in range(cfg.R):
        rows.append(
            [cfg.seed, h, r, int(res["levels"][r])]
            + list(res["values"][r])
            + [res["cost"][r], int(res["euler_steps"][r]),
               int(res["tau_bar_l0"][r]), bool(res["failed"][r])]
        )
    ok = ~res["failed"]
    mean = np.nanmean(res["values"][ok], axis=0) if ok.any() else np.full(d, np.nan)
    reports.save_hist_figure(
        fig_path, res["values"][ok, 0] if ok.any() else [],
        "first score component", f"score replicates ({cfg.model})",
        vline=mean[0] if ok.any() else None,
    )
    _emit(cfg, csv_path, json_path, header, rows, t0, extra={
        "mean": mean, "n_failed": int((~ok).sum()),
        "b": est_cfg.b, "I": est_cfg.I,
    })
    return {"csv": csv_path, "figure": fig_path, "sidecar": json_path}


def run_stopping_times(cfg, out_dir=None):
    """Meeting-time samples per level (box-plot panels)."""
    t0 = time.perf_counter()
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    model = make_model(cfg.model)
    theta = _resolved_theta(cfg)
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    est_cfg = build_estimator_config(cfg, model, theta, obs, spec)
    levels = list(cfg.levels) if cfg.levels is not None else list(range(6))
    h = config_hash(cfg)
    header = ["seed", "config", "level", "replicate",
              "tau_coarse", "tau_fine", "tau_bar", "failed"]
    rows, groups = [], []
    for j in levels:
        res = level_increments(
            model, theta, obs, est_cfg, spec.child("stopping", j), cfg.R, j
        )
        tau = res["tau"]
        tau_bar = tau.max(axis=1)
        for r in range(cfg.R):
            tc = int(tau[r, 0])
            tf = int(tau[r, -1])
            rows.append([cfg.seed, h, est_cfg.l_min + j, r, tc, tf,
                         int(tau_bar[r]), bool(res["failed"][r])])
        groups.append(tau_bar[~res["failed"]])
    reports.save_box_figure(
        fig_path, groups, [est_cfg.l_min + j for j in levels],
        "level", "stopping time", f"meeting times ({cfg.model})",
    )
    _emit(cfg, csv_path, json_path, header, rows, t0,
          extra={"b": est_cfg.b, "I": est_cfg.I})
    return {"csv": csv_path, "figure": fig_path, "sidecar": json_path}


def run_increment_variance(cfg, out_dir=None):
    """Per-level variance of the increment estimator, with an optional
    comparator resampling coupling."""
    t0 = time.perf_counter()
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    model = make_model(cfg.model)
    theta = _resolved_theta(cfg)
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    est_cfg = build_estimator_config(cfg, model, theta, obs, spec)
    levels = list(cfg.levels) if cfg.levels is not None else list(range(1, 6))
    couplings = [cfg.coupling]
    if cfg.compare_coupling is not None:
        couplings.append(cfg.compare_coupling)
    h = config_hash(cfg)
    header = ["seed", "config", "coupling", "level", "component",
              "mean", "variance", "n_ok"]
    rows = []
    curves = {c: [] for c in couplings}
    for coupling in couplings:
        ecfg = replace(est_cfg, opts=replace(est_cfg.opts, coupling=coupling))
        for j in levels:
            res = level_increments(
                model, theta, obs, ecfg,
                spec.child("incvar-" + coupling, j), cfg.R, j,
            )
            ok = ~res["failed"]
            inc = res["increments"][ok]
            n_ok = int(ok.sum())
            var_sum = 0.0
            for c in range(model.d_theta):
                m = float(inc[:, c].mean()) if n_ok else np.nan
                v = float(inc[:, c].var(ddof=1)) if n_ok > 1 else np.nan
                var_sum += v if n_ok > 1 else np.nan
                rows.append([cfg.seed, h, coupling, ecfg.l_min + j, c + 1, m, v, n_ok])
            rows.append([cfg.seed, h, coupling, ecfg.l_min + j, "total",
                         np.nan, var_sum, n_ok])
            curves[coupling].append(var_sum)
    reports.save_line_figure(
        fig_path, [est_cfg.l_min + j for j in levels],
        [curves[c] for c in couplings], couplings,
        "level", "summed increment variance",
        f"increment variance ({cfg.model})", logy=True,
    )
    _emit(cfg, csv_path, json_path, header, rows, t0,
          extra={"b": est_cfg.b, "I": est_cfg.I})
    return {"csv": csv_path, "figure": fig_path, "sidecar": json_path}


def _truncated_reference(cfg, est_cfg, theta, obs):
    """The estimand of the truncated randomized-level estimator.

    Exactly computable for the linear-Gaussian model; other models fall
    back to the replicate pool mean (property tests only use the former).
    """
    if cfg.model != "ou":
        return None
    level = est_cfg.l_min + len(est_cfg.pmf.probs) - 1
    return kalman_score(
        lambda th: ou_euler_ssm(th, 1.0, level), theta, obs.values[:, 0]
    )


def run_mse_vs_r(cfg, out_dir=None):
    """MSE and cost of R-replicate averages against the exact target."""
    t0 = time.perf_counter()
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    model = make_model(cfg.model)
    theta = _resolved_theta(cfg)
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    est_cfg = build_estimator_config(cfg, model, theta, obs, spec)
    r_values = [r for r in cfg.r_values]
    pool_size = cfg.R
    if pool_size < max(r_values):
        raise ValueError("replicate pool R must cover the largest group size")
    res = replicate_scores(model, theta, obs, est_cfg, spec.child("pool"), pool_size)
    ok = ~res["failed"]
    vals = res["values"][ok]
    costs = res["cost"][ok]
    ref = _truncated_reference(cfg, est_cfg, theta, obs)
    if ref is None:
        ref = vals.mean(axis=0)
    h = config_hash(cfg)
    header = ["seed", "config", "R", "n_groups", "mse", "mean_cost"]
    rows, mses = [], []
    for r in r_values:
        n_groups = len(vals) // r
        err2 = np.empty(n_groups)
        gcost = np.empty(n_groups)
        for g in range(n_groups):
            block = vals[g * r : (g + 1) * r]
            err2[g] = float(((block.mean(axis=0) - ref) ** 2).sum())
            gcost[g] = float(costs[g * r : (g + 1) * r].sum())
        mse = float(err2.mean())
        rows.append([cfg.seed, h, r, n_groups, mse, float(gcost.mean())])
        mses.append(mse)
    slope = float(np.polyfit(np.log(r_values), np.log(mses), 1)[0])
    reports.save_line_figure(
        fig_path, r_values, [mses], [f"slope {slope:.2f}"],
        "replicates R", "MSE", f"MSE vs replicates ({cfg.model})",
        logx=True, logy=True,
    )
    _emit(cfg, csv_path, json_path, header, rows, t0, extra={
        "slope": slope, "reference": ref, "n_failed": int((~ok).sum()),
        "b": est_cfg.b, "I": est_cfg.I,
    })
    return {"csv": csv_path, "figure": fig_path, "sidecar": json_path}


def run_error_vs_cost(cfg, out_dir=None):
    """Per-replicate squared error against cost (exact-target model only)."""
    if cfg.model != "ou":
        raise ValueError("error-vs-cost needs the model with an exact score")
    t0 = time.perf_counter()
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    model = make_model(cfg.model)
    theta = _resolved_theta(cfg)
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    est_cfg = build_estimator_config(cfg, model, theta, obs, spec)
    res = replicate_scores(model, theta, obs, est_cfg, spec.child("pool"), cfg.R)
    ref = _truncated_reference(cfg, est_cfg, theta, obs)
    h = config_hash(cfg)
    header = ["seed", "config", "replicate", "level", "cost", "sq_error", "failed"]
    rows = []
    for r in range(cfg.R):
        if res["failed"][r]:
            err = np.nan
        else:
            err = float(((res["values"][r] - ref) ** 2).sum())
        rows.append([cfg.seed, h, r, int(res["levels"][r]),
                     res["cost"][r], err, bool(res["failed"][r])])
    ok = ~res["failed"]
    reports.save_scatter_figure(
        fig_path, res["cost"][ok],
        ((res["values"][ok] - ref) ** 2).sum(axis=1),
        "cost", "squared error", f"error vs cost ({cfg.model})", loglog=True,
    )
    _emit(cfg, csv_path, json_path, header, rows, t0,
          extra={"reference": ref, "b": est_cfg.b, "I": est_cfg.I})
    return {"csv": csv_path, "figure": fig_path, "sidecar": json_path}


def run_kalman_score(cfg, out_dir=None):
    """Exact scores from the linear-Gaussian oracle, per level and limiting."""
    if cfg.model != "ou":
        raise ValueError("kalman-score applies to the linear-Gaussian model only")
    t0 = time.perf_counter()
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    theta = _resolved_theta(cfg)
    obs = load_observations(cfg)
    grid_builder_for("ou", obs)  # validates the observation layout
    ys = obs.values[:, 0]
    l_min = _DEFAULT_L_MIN["ou"] if cfg.l_min is None else cfg.l_min
    levels = list(cfg.levels) if cfg.levels is not None else list(range(7))
    h = config_hash(cfg)
    header = ["seed", "config", "kind", "level", "unstable", "s1", "s2", "s3"]
    rows = []
    exact = kalman_score(lambda th: ou_exact_ssm(th), theta, ys)
    rows.append([cfg.seed, h, "exact", -1, False] + list(exact))
    per_level = []
    abs_levels = [l_min + j for j in levels]
    for lvl in abs_levels:
        ssm = ou_euler_ssm(theta, 1.0, lvl)
        s = kalman_score(lambda th: ou_euler_ssm(th, 1.0, lvl), theta, ys)
        rows.append([cfg.seed, h, "euler", lvl, bool(ssm.unstable)] + list(s))
        per_level.append(s)
    per_level = np.asarray(per_level)
    reports.save_line_figure(
        fig_path, abs_levels, [per_level[:, i] for i in range(3)],
        [f"s{i + 1}" for i in range(3)],
        "level", "score component", "discretized vs exact score",
    )
    _emit(cfg, csv_path, json_path, header, rows, t0, extra={"exact": exact})
    return {"csv": csv_path, "figure": fig_path, "sidecar": json_path}


def _build_schedule(cfg, default_scale):
    sched = cfg.schedule
    if sched is None:
        return power_schedule(100.0, 0.6, np.asarray(default_scale, dtype=float))
    sched = dict(sched)
    kind = sched.pop("kind")
    if kind == "constant":
        return constant_schedule(sched["value"])
    if kind == "power":
        return power_schedule(
            sched.get("c0", 100.0), sched.get("gamma", 0.6),
            np.asarray(sched.get("scale", 1.0), dtype=float),
        )
    raise ValueError(f"unknown schedule kind {kind!r}")


_SGLD_PRIOR = {
    # working-space Gaussian prior defaults for the count-data model
    "logistic": (np.array([0.0, -1.0, -1.0, -1.0]),
                 np.array([25.0, 4.0, 4.0, 4.0])),
}

_SGLD_SCALE = {
    "logistic": np.array([1e-2, 1e-2, 1e-4, 1e-2]),
}


def _optimizer_setup(cfg, langevin):
    model = make_model(cfg.model)
    obs = load_observations(cfg)
    spec = SeedSpec(cfg.seed)
    theta_gen = _resolved_theta(cfg)
    est_cfg = build_estimator_config(cfg, model, theta_gen, obs, spec)
    prior = None
    if langevin:
        if cfg.prior_mean is not None or cfg.prior_var is not None:
            if cfg.prior_mean is None or cfg.prior_var is None:
                raise ValueError("prior_mean and prior_var must be given together")
            prior = PriorSpec(np.asarray(cfg.prior_mean, float),
                              np.asarray(cfg.prior_var, float))
        elif cfg.model in _SGLD_PRIOR:
            prior = PriorSpec(*_SGLD_PRIOR[cfg.model])
        else:
            prior = PriorSpec(np.zeros(model.d_theta),
                              np.full(model.d_theta, 10.0))
    if cfg.theta0 is not None:
        theta0_w = from_constrained(np.asarray(cfg.theta0, float),
                                    model.transform_spec)
    elif langevin:
        theta0_w = prior.mean.copy()
    else:
        theta0_w = from_constrained(theta_gen, model.transform_spec)
    scale = _SGLD_SCALE.get(cfg.model, 1e-3) if langevin else 1e-3
    schedule = _build_schedule(cfg, scale)
    return model, obs, spec, est_cfg, prior, theta0_w, schedule


def _emit_trace(cfg, model, trace, t0, out_dir, extra):
    csv_path, json_path, fig_path = _out_paths(cfg, out_dir)
    h = config_hash(cfg)
    d = model.d_theta
    header = ["seed", "config", "iteration"]
    header += [f"w{i + 1}" for i in range(d)]
    header += [f"theta{i + 1}" for i in range(d)]
    header += ["score_norm", "cost"]
    n = trace["iterations"]
    rows = []
    for m in range(n + 1):
        rows.append([cfg.seed, h, m] + list(trace["working"][m])
                    + list(trace["constrained"][m])
                    + [trace["score_norm"][m], trace["cost"][m]])
    good = trace["constrained"][: n + 1]
    pr = polyak_ruppert(good, cfg.burn_fraction)
    pr_path = csv_path.with_name(csv_path.stem + "_polyak.csv")
    reports.write_rows(
        pr_path,
        ["seed", "config", "iteration"] + [f"theta{i + 1}" for i in range(d)],
        [[cfg.seed, h, m] + list(pr[m]) for m in range(len(pr))],
    )
    reports.save_line_figure(
        fig_path, np.arange(n + 1), [good[:, i] for i in range(d)],
        [f"theta{i + 1}" for i in range(d)],
        "iteration", "parameter", f"{cfg.kind} trace ({cfg.model})",
    )
    extra = dict(extra)
    extra.update({"diverged": bool(trace["diverged"]), "capped": trace["capped"],
                  "iterations": n, "polyak_final": pr[-1]})
    _emit(cfg, csv_path, json_path, header, rows, t0, extra=extra)
    return {"csv": csv_path, "polyak": pr_path, "figure": fig_path,
            "sidecar": json_path}


def run_sga(cfg, out_dir=None):
    """Stochastic gradient ascent trace with running parameter averages."""
    t0 = time.perf_counter()
    model, obs, spec, est_cfg, _, theta0_w, schedule = _optimizer_setup(cfg, False)
    M = cfg.iterations if cfg.iterations is not None else 100
    trace = sga_run(model, obs, est_cfg, theta0_w, schedule, M, spec.child("sga"))
    return _emit_trace(cfg, model, trace, t0, out_dir,
                       {"b": est_cfg.b, "I": est_cfg.I})


def run_sgld(cfg, out_dir=None):
    """Stochastic gradient Langevin trace with running parameter averages."""
    t0 = time.perf_counter()
    model, obs, spec, est_cfg, prior, theta0_w, schedule = _optimizer_setup(cfg, True)
    M = cfg.iterations if cfg.iterations is not None else 300
    trace = sgld_run(model, obs, est_cfg, prior, theta0_w, schedule, M,
                     spec.child("sgld"))
    return _emit_trace(cfg, model, trace, t0, out_dir, {
        "b": est_cfg.b, "I": est_cfg.I,
        "prior_mean": prior.mean, "prior_var": prior.var,
    })


EXPERIMENT_KINDS = {
    "simulate-data": run_simulate_data,
    "estimate-score": run_estimate_score,
    "stopping-times": run_stopping_times,
    "increment-variance": run_increment_variance,
    "mse-vs-r": run_mse_vs_r,
    "error-vs-cost": run_error_vs_cost,
    "sga": run_sga,
    "sgld": run_sgld,
    "kalman-score": run_kalman_score,
}


def run_experiment(cfg, out_dir=None):
    """Dispatch a config to its experiment driver."""
    try:
        runner = EXPERIMENT_KINDS[cfg.kind]
    except KeyError:
        raise ValueError(f"unknown experiment kind {cfg.kind!r}") from None
    return runner(cfg, out_dir=out_dir)
