"""Synthetic crowds and the experiments that measure interval quality.

Every experiment is driven by a frozen SimConfig; replication r of a run
with seed s uses the deterministic substream seeded by (s, r), so identical
configs give bit-identical results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .binary import aggregate_system, build_worker_system
from .dataset import GoldLabels, ResponseDataset
from .errors import EstimationFailure, InsufficientOverlapError
from .kary import build_counts, kary_deviations
from .numerics import normal_quantile

CONFIDENCE_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
DENSITY_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_BINARY_RATES = (0.1, 0.2, 0.3)


def _fixture_matrix(rows) -> np.ndarray:
    mat = np.array(rows, dtype=float)
    if not np.allclose(mat.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError(f"fixture rows must sum to 1: {rows}")
    mat.flags.writeable = False
    return mat


# Response-probability matrices the k-ary experiments draw worker models
# from, keyed by arity. Each matrix row t gives the response distribution
# on tasks whose true label is t.
WORKER_MATRIX_FIXTURES: Mapping[str, tuple[np.ndarray, ...]] = {
    "arity2": (
        _fixture_matrix([[0.9, 0.1], [0.2, 0.8]]),
        _fixture_matrix([[0.8, 0.2], [0.1, 0.9]]),
        _fixture_matrix([[0.9, 0.1], [0.1, 0.9]]),
    ),
    "arity3": (
        _fixture_matrix([[0.6, 0.3, 0.1], [0.1, 0.6, 0.3], [0.3, 0.1, 0.6]]),
        _fixture_matrix([[0.8, 0.1, 0.1], [0.2, 0.8, 0.0], [0.0, 0.2, 0.8]]),
        _fixture_matrix([[0.9, 0.0, 0.1], [0.1, 0.9, 0.0], [0.0, 0.2, 0.8]]),
    ),
    "arity4": (
        _fixture_matrix([[0.7, 0.1, 0.1, 0.1], [0.1, 0.6, 0.2, 0.1],
                         [0.0, 0.1, 0.8, 0.1], [0.1, 0.1, 0.1, 0.7]]),
        _fixture_matrix([[0.8, 0.1, 0.0, 0.1], [0.1, 0.8, 0.0, 0.1],
                         [0.1, 0.1, 0.7, 0.1], [0.0, 0.1, 0.2, 0.7]]),
        _fixture_matrix([[0.6, 0.1, 0.2, 0.1], [0.0, 0.7, 0.1, 0.2],
                         [0.1, 0.0, 0.9, 0.0], [0.2, 0.0, 0.0, 0.8]]),
    ),
}


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one simulated experiment.

    `density` is a scalar attempt probability, the string "ramp" (worker i
    of m attempts with probability (0.5 i + (m - i)) / m), or one value per
    worker. Binary worker error rates are drawn uniformly from `rates`;
    k-ary worker models are drawn uniformly from the `fixture` matrix set.
    """

    n: int
    m: int = 3
    arity: int = 2
    confidence_grid: tuple[float, ...] = CONFIDENCE_GRID
    density: float | str | tuple[float, ...] = 0.8
    replications: int = 500
    seed: int = 0
    weighting: str = "optimal"
    rates: tuple[float, ...] = DEFAULT_BINARY_RATES
    fixture: str | None = None
    min_overlap: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if self.m < 3:
            raise ValueError(f"m must be at least 3, got {self.m}")
        if self.replications < 1:
            raise ValueError(f"replications must be positive, got {self.replications}")
        if not self.confidence_grid:
            raise ValueError("confidence grid must be non-empty")
        for c in self.confidence_grid:
            if not 0.0 < c < 1.0:
                raise ValueError(f"confidence levels must lie in (0, 1), got {c}")
        if self.weighting not in ("uniform", "optimal"):
            raise ValueError(f"weighting must be 'uniform' or 'optimal', got {self.weighting!r}")
        for r in self.rates:
            if not 0.0 < r < 1.0:
                raise ValueError(f"error rates must lie in (0, 1), got {r}")
        if self.fixture is not None and self.fixture not in WORKER_MATRIX_FIXTURES:
            raise ValueError(
                f"unknown fixture {self.fixture!r}; "
                f"choose from {sorted(WORKER_MATRIX_FIXTURES)}")
        _density_vector(self)  # validates


def ramp_densities(m: int) -> np.ndarray:
    """Per-worker densities falling linearly from (0.5 + m - 1) / m to 0.5."""
    i = np.arange(1, m + 1, dtype=float)
    return (0.5 * i + (m - i)) / m


def _density_vector(cfg: SimConfig) -> np.ndarray:
    workers = 3 if cfg.fixture is not None else cfg.m
    if isinstance(cfg.density, str):
        if cfg.density != "ramp":
            raise ValueError(f"density must be a number, 'ramp', or a tuple, "
                             f"got {cfg.density!r}")
        return ramp_densities(workers)
    if isinstance(cfg.density, (tuple, list)):
        dens = np.asarray(cfg.density, dtype=float)
        if dens.shape != (workers,):
            raise ValueError(f"need one density per worker ({workers}), "
                             f"got {dens.shape}")
    else:
        dens = np.full(workers, float(cfg.density))
    if (dens <= 0).any() or (dens > 1).any():
        raise ValueError("densities must lie in (0, 1]")
    return dens


def substream(seed: int, rep: int) -> np.random.Generator:
    """Independent deterministic generator for one replication."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, rep))))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def gen_binary_workers(m: int, rng=0,
                       rates: Sequence[float] = DEFAULT_BINARY_RATES) -> np.ndarray:
    """Draw m error rates uniformly from the rate set."""
    rng = _as_generator(rng)
    pool = np.asarray(rates, dtype=float)
    return pool[rng.integers(0, pool.size, size=m)]


def gen_binary_responses(rates: Sequence[float], n: int, density, rng=0
                         ) -> tuple[ResponseDataset, GoldLabels]:
    """Simulate binary tasks: uniform truths, symmetric per-worker flips.

    `density` is a scalar or per-worker attempt probability. Returns the
    dataset (all n tasks, attempted or not) and the hidden truths.
    """
    rng = _as_generator(rng)
    rates = np.asarray(rates, dtype=float)
    m = rates.size
    dens = np.full(m, float(density)) if np.isscalar(density) else np.asarray(density, float)
    if dens.shape != (m,):
        raise ValueError(f"need one density per worker ({m}), got {dens.shape}")
    truth = rng.integers(1, 3, size=n)
    attempts = rng.random((m, n)) < dens[:, None]
    flips = rng.random((m, n)) < rates[:, None]
    responses = np.where(flips, 3 - truth[None, :], truth[None, :])
    matrix = np.where(attempts, responses, 0)
    ds = ResponseDataset.from_matrix(matrix, arity=2)
    gold = GoldLabels({ds.tasks[j]: int(truth[j]) for j in range(n)})
    return ds, gold


@dataclass(frozen=True, eq=False)
class KaryWorld:
    """A simulated k-ary triple: data, truths, and the true worker models."""

    dataset: ResponseDataset
    gold: GoldLabels
    matrices: tuple[np.ndarray, np.ndarray, np.ndarray]
    selectivity: np.ndarray


def gen_kary_responses(fixture: str, n: int, density=1.0,
                       selectivity: Sequence[float] | None = None,
                       rng=0) -> KaryWorld:
    """Simulate a three-worker k-ary crowd from a fixture matrix set.

    Each worker's response-probability matrix is drawn uniformly from the
    fixture; truths follow `selectivity` (uniform when omitted).
    """
    try:
        pool = WORKER_MATRIX_FIXTURES[fixture]
    except KeyError:
        raise ValueError(f"unknown fixture {fixture!r}; "
                         f"choose from {sorted(WORKER_MATRIX_FIXTURES)}") from None
    rng = _as_generator(rng)
    picks = rng.integers(0, len(pool), size=3)
    matrices = tuple(pool[int(p)] for p in picks)
    return _gen_kary_with_matrices(matrices, n, density, selectivity, rng)


def _gen_kary_with_matrices(matrices, n: int, density, selectivity, rng
                            ) -> KaryWorld:
    rng = _as_generator(rng)
    matrices = tuple(np.asarray(m, dtype=float) for m in matrices)
    k = matrices[0].shape[0]
    for m in matrices:
        if m.shape != (k, k):
            raise ValueError("worker matrices must share one square shape")
    if selectivity is None:
        sel = np.full(k, 1.0 / k)
    else:
        sel = np.asarray(selectivity, dtype=float)
        if sel.shape != (k,) or (sel < 0).any() or sel.sum() <= 0:
            raise ValueError("selectivity must be a nonnegative length-k vector")
        sel = sel / sel.sum()
    dens = np.full(3, float(density)) if np.isscalar(density) else np.asarray(density, float)
    if dens.shape != (3,):
        raise ValueError(f"need one density per worker (3), got {dens.shape}")
    truth = 1 + np.searchsorted(np.cumsum(sel), rng.random(n), side="right")
    truth = np.minimum(truth, k)
    attempts = rng.random((3, n)) < dens[:, None]
    rows = []
    for w in range(3):
        cdf = np.cumsum(matrices[w], axis=1)[truth - 1]
        draw = rng.random(n)
        labels = 1 + (cdf < draw[:, None]).sum(axis=1)
        rows.append(np.minimum(labels, k))
    matrix = np.where(attempts, np.stack(rows), 0)
    ds = ResponseDataset.from_matrix(matrix, arity=k)
    gold = GoldLabels({ds.tasks[j]: int(truth[j]) for j in range(n)})
    return KaryWorld(ds, gold, matrices, sel)


@dataclass(frozen=True)
class ExperimentResult:
    """A rectangular result table plus the configuration that produced it."""

    experiment: str
    columns: tuple[str, ...]
    rows: tuple[tuple[float, ...], ...]
    metadata: tuple[tuple[str, str], ...]

    def column(self, name: str) -> list[float]:
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]


def _metadata(cfg: SimConfig, **extra: object) -> tuple[tuple[str, str], ...]:
    items = {
        "n": cfg.n, "m": cfg.m, "arity": cfg.arity, "density": cfg.density,
        "replications": cfg.replications, "seed": cfg.seed,
        "weighting": cfg.weighting, "fixture": cfg.fixture,
        "rates": cfg.rates, **extra,
    }
    return tuple((key, repr(value)) for key, value in items.items())


# -- per-replication estimation --------------------------------------------


def _binary_rep(cfg: SimConfig, rep: int):
    """One binary world: (true rates, estimates, deviations, ok mask)."""
    rng = substream(cfg.seed, rep)
    rates = gen_binary_workers(cfg.m, rng, cfg.rates)
    ds, _ = gen_binary_responses(rates, cfg.n, _density_vector(cfg), rng)
    est = np.full(cfg.m, np.nan)
    dev = np.full(cfg.m, np.nan)
    ok = np.zeros(cfg.m, dtype=bool)
    for w, worker in enumerate(ds.workers):
        system = build_worker_system(ds, worker, cfg.min_overlap)
        if system.failed:
            continue
        try:
            estimate, deviation, _, _, _ = aggregate_system(system, cfg.weighting)
        except EstimationFailure:
            continue
        est[w], dev[w], ok[w] = estimate, deviation, True
    return rates, est, dev, ok


def _kary_rep(cfg: SimConfig, rep: int):
    """One k-ary world: (true P stack, midpoints, deviations) or None."""
    rng = substream(cfg.seed, rep)
    world = gen_kary_responses(cfg.fixture, cfg.n, _density_vector(cfg), None, rng)
    counts = build_counts(world.dataset, world.dataset.workers)
    try:
        devs = kary_deviations(counts)
    except (EstimationFailure, InsufficientOverlapError):
        return None
    return np.stack(world.matrices), devs.midpoints, devs.deviations


def _grid_rows(cfg: SimConfig, grid: Sequence[float]):
    """Coverage/size aggregates per confidence level over all replications.

    Interval size is the half-width: the distance from the point estimate
    to either interval end. Binary error-rate intervals report z * deviation
    directly. Response-probability intervals are first intersected with
    [0, 1] (every estimand is a probability, so truncation never loses the
    target); that keeps the average finite when a noisy replication yields
    a near-singular linearization with an enormous deviation. Each
    replication's estimates and deviations are computed once and reused
    across the whole grid (only the quantile multiplier changes). Returns
    rows of (confidence, accuracy, mean_size, failures, evaluations).
    """
    z = np.array([abs(normal_quantile((1.0 - c) / 2.0)) for c in grid])
    covered = np.zeros(len(grid))
    size_sum = np.zeros(len(grid))
    total = 0
    failures = 0
    kary = cfg.fixture is not None
    for rep in range(cfg.replications):
        if kary:
            outcome = _kary_rep(cfg, rep)
            if outcome is None:
                failures += 1
                continue
            truth, mid, dev = outcome
            err = np.abs(mid - truth).reshape(-1)
            mid_flat = mid.reshape(-1)
            half = z[:, None] * dev.reshape(-1)[None, :]
            covered += (err[None, :] <= half).sum(axis=1)
            lo = np.clip(mid_flat[None, :] - half, 0.0, 1.0)
            hi = np.clip(mid_flat[None, :] + half, 0.0, 1.0)
            size_sum += 0.5 * (hi - lo).sum(axis=1)
            total += err.size
        else:
            rates, est, dev, ok = _binary_rep(cfg, rep)
            failures += int((~ok).sum())
            if not ok.any():
                continue
            err = np.abs(est[ok] - rates[ok])
            dev_ok = dev[ok]
            covered += (err[None, :] <= z[:, None] * dev_ok[None, :]).sum(axis=1)
            total += int(ok.sum())
            size_sum += z * float(dev_ok.sum())
    rows = []
    for idx, c in enumerate(grid):
        accuracy = covered[idx] / total if total else float("nan")
        mean_size = size_sum[idx] / total if total else float("nan")
        rows.append((float(c), float(accuracy), float(mean_size),
                     float(failures), float(total)))
    return rows


def run_coverage_experiment(cfg: SimConfig) -> ExperimentResult:
    """Interval accuracy and mean size across the confidence grid.

    Binary configs cover per-worker error rates; configs with a `fixture`
    cover every response-probability entry of the three workers. Failed
    estimates are counted and excluded from the coverage denominator.
    """
    rows = _grid_rows(cfg, cfg.confidence_grid)
    name = "kary-coverage" if cfg.fixture is not None else "coverage"
    return ExperimentResult(name, ("confidence", "accuracy", "mean_size",
                                   "failures", "evaluations"),
                            tuple(rows), _metadata(cfg))


def run_size_experiment(cfg: SimConfig,
                        densities: Sequence[float] | None = None,
                        confidences: Sequence[float] | None = None,
                        arities: Sequence[int] | None = None) -> ExperimentResult:
    """Mean interval size along one sweep axis.

    Exactly one mode: `densities` sweeps attempt density at the single
    confidence level in cfg.confidence_grid; `confidences` sweeps the level
    itself; `arities` (k-ary) crosses fixture arities with `densities`
    (default DENSITY_GRID).
    """
    if confidences is not None:
        if densities is not None or arities is not None:
            raise ValueError("choose one sweep axis")
        rows = _grid_rows(cfg, tuple(confidences))
        return ExperimentResult("size-vs-confidence",
                                ("confidence", "accuracy", "mean_size",
                                 "failures", "evaluations"),
                                tuple(rows), _metadata(cfg))
    if arities is not None:
        sweep_densities = tuple(densities) if densities is not None else DENSITY_GRID
        if len(cfg.confidence_grid) != 1:
            raise ValueError("arity sweep expects a single confidence level")
        level = cfg.confidence_grid[0]
        rows = []
        for k in arities:
            fixture = f"arity{k}"
            if fixture not in WORKER_MATRIX_FIXTURES:
                raise ValueError(f"no fixture for arity {k}")
            for d in sweep_densities:
                sub = replace(cfg, arity=int(k), fixture=fixture, density=float(d))
                (_, accuracy, mean_size, failures, evaluations), = _grid_rows(sub, (level,))[:1]
                rows.append((float(k), float(d), float(level), accuracy,
                             mean_size, failures, evaluations))
        return ExperimentResult("kary-size",
                                ("arity", "density", "confidence", "accuracy",
                                 "mean_size", "failures", "evaluations"),
                                tuple(rows),
                                _metadata(cfg, arities=tuple(int(k) for k in arities),
                                          densities=sweep_densities))
    if densities is None:
        raise ValueError("choose a sweep axis: densities, confidences, or arities")
    if len(cfg.confidence_grid) != 1:
        raise ValueError("density sweep expects a single confidence level")
    level = cfg.confidence_grid[0]
    rows = []
    for d in densities:
        sub = replace(cfg, density=float(d))
        (_, accuracy, mean_size, failures, evaluations), = _grid_rows(sub, (level,))[:1]
        rows.append((float(d), float(level), accuracy, mean_size,
                     failures, evaluations))
    return ExperimentResult("size-vs-density",
                            ("density", "confidence", "accuracy", "mean_size",
                             "failures", "evaluations"),
                            tuple(rows), _metadata(cfg, densities=tuple(densities)))


def compare_weighting(cfg: SimConfig) -> ExperimentResult:
    """Uniform vs minimum-variance aggregation on identical worlds.

    Requires m >= 5 (at least two triples per worker); each replication is
    generated once and both weightings aggregate the same triple estimates.
    """
    if cfg.m < 5:
        raise ValueError(f"weighting comparison needs m >= 5, got {cfg.m}")
    grid = cfg.confidence_grid
    z = np.array([abs(normal_quantile((1.0 - c) / 2.0)) for c in grid])
    covered = {"uniform": np.zeros(len(grid)), "optimal": np.zeros(len(grid))}
    dev_sum = {"uniform": 0.0, "optimal": 0.0}
    total = 0
    failures = 0
    for rep in range(cfg.replications):
        rng = substream(cfg.seed, rep)
        rates = gen_binary_workers(cfg.m, rng, cfg.rates)
        ds, _ = gen_binary_responses(rates, cfg.n, _density_vector(cfg), rng)
        for w, worker in enumerate(ds.workers):
            system = build_worker_system(ds, worker, cfg.min_overlap)
            if system.failed:
                failures += 1
                continue
            try:
                est_u, dev_u, _, _, _ = aggregate_system(system, "uniform")
                est_o, dev_o, _, _, _ = aggregate_system(system, "optimal")
            except EstimationFailure:
                failures += 1
                continue
            total += 1
            covered["uniform"] += np.abs(est_u - rates[w]) <= z * dev_u
            covered["optimal"] += np.abs(est_o - rates[w]) <= z * dev_o
            dev_sum["uniform"] += dev_u
            dev_sum["optimal"] += dev_o
    rows = []
    for idx, c in enumerate(grid):
        if total:
            rows.append((float(c),
                         float(covered["uniform"][idx] / total),
                         float(covered["optimal"][idx] / total),
                         float(z[idx] * dev_sum["uniform"] / total),
                         float(z[idx] * dev_sum["optimal"] / total),
                         float(failures), float(total)))
        else:
            rows.append((float(c), float("nan"), float("nan"), float("nan"),
                         float("nan"), float(failures), 0.0))
    return ExperimentResult("weight-comparison",
                            ("confidence", "accuracy_uniform", "accuracy_optimal",
                             "mean_size_uniform", "mean_size_optimal",
                             "failures", "evaluations"),
                            tuple(rows), _metadata(cfg))


# -- serialization ----------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def result_to_csv(result: ExperimentResult) -> str:
    """Render a result as CSV with `# key=value` metadata comment lines."""
    lines = [f"# experiment={result.experiment}"]
    lines += [f"# {key}={value}" for key, value in result.metadata]
    lines.append(",".join(result.columns))
    lines += [",".join(_fmt(x) for x in row) for row in result.rows]
    return "\n".join(lines) + "\n"


def result_to_json(result: ExperimentResult) -> str:
    """Render a result as JSON (floats at 9 significant digits, NaN as null)."""
    def cell(x: float):
        if x != x:
            return None
        return float(_fmt(x))

    payload = {
        "experiment": result.experiment,
        "metadata": dict(result.metadata),
        "columns": list(result.columns),
        "rows": [[cell(x) for x in row] for row in result.rows],
    }
    return json.dumps(payload, indent=2) + "\n"
