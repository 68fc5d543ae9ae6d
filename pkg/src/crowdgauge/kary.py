"""Response-probability matrices for k-ary tasks from three workers.

With truths drawn from a selectivity distribution S and worker w responding
by row P_w(truth, .), the pairwise response-frequency matrices factor
through S^(1/2) P_w. The product R_12 R_32^-1 R_31 is the Gram matrix of
V_1 = S_D^(1/2) P_1, whose square root combined with per-response
conditional slices recovers each V_w up to a common row permutation.
Entrywise confidence intervals follow from a numerical Jacobian against the
multinomial covariance of the response counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .dataset import ResponseDataset
from .errors import (
    EstimationFailure,
    InsufficientOverlapError,
    REASON_DEGENERATE_SELECTIVITY,
    REASON_JACOBIAN_FAILURE,
    REASON_NEGATIVE_SPECTRUM,
    REASON_NO_USABLE_SLICES,
    REASON_NONINVERTIBLE_FREQUENCY,
    REASON_SINGULAR_ESTIMATE,
    SingularMatrixError,
)
from .numerics import ConfidenceInterval, eigendecompose, invert_matrix, normal_quantile

# Eigenvalues of the Gram matrix in [-tol, 0) clamp to 0; below that the
# spectrum counts as negative and the estimate fails. tol scales with the
# largest matrix entry.
NEGATIVE_EIG_TOL_SCALE = 1e-8
# A conditional slice is dropped when its eigensystem's largest imaginary
# magnitude exceeds this fraction of the slice matrix's largest entry.
IMAG_TOL_SCALE = 1e-6
# A slice whose eigenvalues nearly coincide pins down no eigenbasis for the
# repeated block, so it is dropped too. The tolerance is far below any gap
# sampling noise can produce, so only exactly-degenerate inputs trip it.
EIGENGAP_TOL_SCALE = 1e-7
# Central-difference step applied to each jointly-attempted count cell.
JACOBIAN_EPS_DEFAULT = 0.01

SLICE_EMPTY = "empty slice"
SLICE_COMPLEX = "complex eigensystem"
SLICE_SINGULAR = "singular eigenvector matrix"
SLICE_DEGENERATE = "repeated eigenvalues"


@dataclass(frozen=True, eq=False)
class CountsTensor:
    """Joint response counts for an ordered worker triple.

    counts[a, b, c] is the number of tasks answered a by worker 1, b by
    worker 2, and c by worker 3, with 0 meaning "did not attempt". Tasks
    attempted by nobody are never ingested, so counts[0, 0, 0] == 0.
    """

    arity: int
    counts: np.ndarray

    def __post_init__(self):
        if self.arity < 2:
            raise ValueError(f"arity must be at least 2, got {self.arity}")
        size = self.arity + 1
        tensor = np.array(self.counts, dtype=float, copy=True)
        if tensor.shape != (size, size, size):
            raise ValueError(
                f"counts must have shape {(size, size, size)}, got {tensor.shape}")
        if not np.isfinite(tensor).all() or (tensor < 0).any():
            raise ValueError("counts must be finite and nonnegative")
        if tensor[0, 0, 0] != 0:
            raise ValueError("counts[0, 0, 0] must be 0")
        tensor.flags.writeable = False
        object.__setattr__(self, "counts", tensor)

    @cached_property
    def n_all_three(self) -> float:
        """Tasks answered by all three workers."""
        return float(self.counts[1:, 1:, 1:].sum())

    @cached_property
    def n_pair_12(self) -> float:
        """Tasks answered by workers 1 and 2 only."""
        return float(self.counts[1:, 1:, 0].sum())

    @cached_property
    def n_pair_23(self) -> float:
        """Tasks answered by workers 2 and 3 only."""
        return float(self.counts[0, 1:, 1:].sum())

    @cached_property
    def n_pair_31(self) -> float:
        """Tasks answered by workers 3 and 1 only."""
        return float(self.counts[1:, 0, 1:].sum())

    def n_third_response(self, j3: int) -> float:
        """Tasks answered by all three where worker 3 responded j3."""
        if not 1 <= j3 <= self.arity:
            raise ValueError(f"label must lie in 1..{self.arity}, got {j3}")
        return float(self.counts[1:, 1:, j3].sum())

    def pattern_total(self, pattern: Sequence[int]) -> float:
        """Tasks attempted by exactly the workers flagged in `pattern`.

        `pattern` has three 0/1 entries, one per worker position.
        """
        if len(pattern) != 3 or not all(p in (0, 1) for p in pattern):
            raise ValueError(f"pattern must be three 0/1 flags, got {pattern!r}")
        index = tuple(slice(1, None) if p else 0 for p in pattern)
        return float(np.sum(self.counts[index]))


def build_counts(ds: ResponseDataset, triple: Sequence[str]) -> CountsTensor:
    """Tally the joint response counts of an ordered worker triple."""
    if len(set(triple)) != 3:
        raise ValueError(f"triple {tuple(triple)} repeats a worker")
    idx = [ds.worker_index(w) for w in triple]
    rows = ds.matrix[idx]
    rows = rows[:, (rows > 0).any(axis=0)]
    size = ds.arity + 1
    flat = (rows[0].astype(np.int64) * size + rows[1]) * size + rows[2]
    tensor = np.bincount(flat, minlength=size ** 3).reshape(size, size, size)
    return CountsTensor(ds.arity, tensor.astype(float))


@dataclass(frozen=True, eq=False)
class FrequencyMatrices:
    """Pairwise response-frequency matrices over jointly answered tasks.

    r12[a, b] is the fraction of tasks both answered, out of those answered
    by workers 1 and 2, where worker 1 said a and worker 2 said b; r23 and
    r31 analogously. Each matrix is entrywise nonnegative and sums to 1.
    """

    r12: np.ndarray
    r23: np.ndarray
    r31: np.ndarray

    @property
    def r21(self) -> np.ndarray:
        return self.r12.T

    @property
    def r32(self) -> np.ndarray:
        return self.r23.T

    @property
    def r13(self) -> np.ndarray:
        return self.r31.T


def _frequency_arrays(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    den12 = counts[1:, 1:, :].sum()
    den23 = counts[:, 1:, 1:].sum()
    den31 = counts[1:, :, 1:].sum()
    if min(den12, den23, den31) <= 0:
        raise InsufficientOverlapError(
            "each pair of the triple must share at least one task")
    r12 = counts[1:, 1:, :].sum(axis=2) / den12
    r23 = counts[:, 1:, 1:].sum(axis=0) / den23
    r31 = counts[1:, :, 1:].sum(axis=1).T / den31
    return r12, r23, r31


def response_frequency_matrices(counts: CountsTensor) -> FrequencyMatrices:
    """Compute the three pairwise response-frequency matrices."""
    r12, r23, r31 = _frequency_arrays(counts.counts)
    return FrequencyMatrices(r12, r23, r31)


def _order_rows_by_diagonal(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Send each row to the column position of its largest entry.

    Collisions fall back to the best still-free column, scanning rows in
    order. Returns the reordered matrix and whether anything moved.
    """
    k = v.shape[0]
    taken: set[int] = set()
    dest = [-1] * k
    for row in range(k):
        for col in np.argsort(-v[row], kind="stable"):
            col = int(col)
            if col not in taken:
                dest[row] = col
                taken.add(col)
                break
    out = np.empty_like(v)
    for row in range(k):
        out[dest[row]] = v[row]
    return out, any(dest[row] != row for row in range(k))


def _prob_estimate_arrays(counts: np.ndarray, k: int) -> tuple[
        np.ndarray, np.ndarray, np.ndarray, dict]:
    """Core spectral recovery on a raw counts array.

    Returns (v1, v2, v3, diagnostics). Soft failures raise
    EstimationFailure; an empty pair raises InsufficientOverlapError.
    """
    r12, r23, r31 = _frequency_arrays(counts)
    r13 = r31.T
    try:
        inv_r32 = invert_matrix(r23.T)
    except SingularMatrixError as exc:
        raise EstimationFailure(REASON_NONINVERTIBLE_FREQUENCY, str(exc)) from exc
    gram = r12 @ inv_r32 @ r31
    gram = 0.5 * (gram + gram.T)
    evecs, evals, _ = eigendecompose(gram)
    scale = max(float(np.abs(gram).max()), 1e-300)
    if float(evals.min()) < -NEGATIVE_EIG_TOL_SCALE * scale:
        raise EstimationFailure(
            REASON_NEGATIVE_SPECTRUM, f"min eigenvalue {evals.min():.3e}")
    evals = np.clip(evals, 0.0, None)
    try:
        u1 = evecs @ np.diag(np.sqrt(evals)) @ invert_matrix(evecs)
        u1t_inv = invert_matrix(u1.T)
        u2_inv = invert_matrix(u1t_inv @ r12)
    except SingularMatrixError as exc:
        raise EstimationFailure(REASON_SINGULAR_ESTIMATE, str(exc)) from exc
    v1_sum = np.zeros((k, k))
    used = 0
    slice_failures: list[tuple[int, str]] = []
    max_imag = 0.0
    permuted = False
    sign_fixed = False
    for j3 in range(1, k + 1):
        n_j3 = counts[1:, 1:, j3].sum()
        if n_j3 <= 0:
            slice_failures.append((j3, SLICE_EMPTY))
            continue
        conditional = counts[1:, 1:, j3] / n_j3
        x = u1t_inv @ conditional @ u2_inv
        x_vecs, x_vals, x_imag = eigendecompose(x)
        if x_imag > IMAG_TOL_SCALE * max(float(np.abs(x).max()), 1e-300):
            slice_failures.append((j3, SLICE_COMPLEX))
            continue
        max_imag = max(max_imag, x_imag)
        gaps = np.diff(np.sort(x_vals))
        if gaps.min() < EIGENGAP_TOL_SCALE * max(float(np.abs(x_vals).max()), 1e-300):
            slice_failures.append((j3, SLICE_DEGENERATE))
            continue
        try:
            u_est = invert_matrix(x_vecs)
        except SingularMatrixError:
            slice_failures.append((j3, SLICE_SINGULAR))
            continue
        v1_slice = u_est @ u1
        row_sums = v1_slice.sum(axis=1)
        if (row_sums < 0).any():
            sign_fixed = True
            v1_slice = v1_slice * np.where(row_sums < 0, -1.0, 1.0)[:, None]
        v1_slice, moved = _order_rows_by_diagonal(v1_slice)
        permuted = permuted or moved
        v1_sum += v1_slice
        used += 1
    if used == 0:
        raise EstimationFailure(REASON_NO_USABLE_SLICES,
                                f"all {k} conditional slices failed")
    v1 = v1_sum / used
    try:
        v1t_inv = invert_matrix(v1.T)
    except SingularMatrixError as exc:
        raise EstimationFailure(REASON_SINGULAR_ESTIMATE, str(exc)) from exc
    diagnostics = {
        "slice_failures": tuple(slice_failures),
        "max_imag": max_imag,
        "rows_permuted": permuted,
        "rows_sign_fixed": sign_fixed,
    }
    return v1, v1t_inv @ r12, v1t_inv @ r13, diagnostics


@dataclass(frozen=True, eq=False)
class ResponseProbEstimate:
    """Recovered response-probability matrices for a worker triple.

    v1..v3 are the scaled matrices S_D^(1/2) P_w (common row order, shared
    across workers); p1..p3 are the row-stochastic normalizations with
    negative noise clamped; selectivity is the recovered truth distribution.
    """

    arity: int
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    selectivity: np.ndarray
    slice_failures: tuple[tuple[int, str], ...]
    max_imag: float
    rows_permuted: bool
    rows_sign_fixed: bool
    clamped: bool

    @property
    def v_matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.v1, self.v2, self.v3

    @property
    def p_matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.p1, self.p2, self.p3


def _rows_to_stochastic(v: np.ndarray) -> tuple[np.ndarray, bool]:
    sums = v.sum(axis=1, keepdims=True)
    if (np.abs(sums) < 1e-12).any():
        raise EstimationFailure(REASON_DEGENERATE_SELECTIVITY, "zero row sum")
    p = v / sums
    clamped = bool((p < 0.0).any() or (p > 1.0).any())
    if clamped:
        p = np.clip(p, 0.0, 1.0)
        p = p / p.sum(axis=1, keepdims=True)
    return p, clamped


def recover_selectivity(v1: np.ndarray) -> np.ndarray:
    """Truth distribution from the scaled matrix V1 = S_D^(1/2) P1.

    Row r of V1 sums to sqrt(S(r)), so the squared row sums, renormalized,
    recover S. A zero row sum raises EstimationFailure (degenerate
    selectivity).
    """
    v1 = np.asarray(v1, dtype=float)
    sums = v1.sum(axis=1)
    if (np.abs(sums) < 1e-12).any():
        raise EstimationFailure(REASON_DEGENERATE_SELECTIVITY, "zero row sum in V1")
    s = sums ** 2
    return s / s.sum()


def prob_estimate(counts: CountsTensor) -> ResponseProbEstimate:
    """Recover all three workers' response-probability matrices.

    Soft failures (singular frequency matrix, negative spectrum, no usable
    slices, degenerate selectivity) raise EstimationFailure with a reason
    code; pairs sharing no tasks raise InsufficientOverlapError.
    """
    v1, v2, v3, diagnostics = _prob_estimate_arrays(counts.counts, counts.arity)
    p1, c1 = _rows_to_stochastic(v1)
    p2, c2 = _rows_to_stochastic(v2)
    p3, c3 = _rows_to_stochastic(v3)
    return ResponseProbEstimate(
        arity=counts.arity, v1=v1, v2=v2, v3=v3, p1=p1, p2=p2, p3=p3,
        selectivity=recover_selectivity(v1),
        clamped=c1 or c2 or c3, **diagnostics)


class CountsCovariances:
    """Covariances between response-count cells.

    Cells with different attempt patterns (which worker positions are
    nonzero) are uncorrelated. Within one pattern the cells split that
    pattern's task total n multinomially:

        Var(N_a)        = N_a (n - N_a) / n
        Cov(N_a, N_b)   = -N_a N_b / n      (a != b)

    Patterns whose total is zero yield zero covariance and are recorded in
    `degenerate_patterns`.
    """

    def __init__(self, counts: CountsTensor):
        self._counts = counts
        self.degenerate_patterns: set[tuple[int, int, int]] = set()

    def covariance(self, cell_a: Sequence[int], cell_b: Sequence[int]) -> float:
        a = self._check_cell(cell_a)
        b = self._check_cell(cell_b)
        pattern_a = tuple(int(x > 0) for x in a)
        pattern_b = tuple(int(x > 0) for x in b)
        if pattern_a != pattern_b:
            return 0.0
        total = self._counts.pattern_total(pattern_a)
        if total <= 0:
            self.degenerate_patterns.add(pattern_a)
            return 0.0
        count_a = float(self._counts.counts[a])
        if a == b:
            return count_a * (total - count_a) / total
        return -count_a * float(self._counts.counts[b]) / total

    def _check_cell(self, cell: Sequence[int]) -> tuple[int, int, int]:
        cell = tuple(int(x) for x in cell)
        if len(cell) != 3 or not all(0 <= x <= self._counts.arity for x in cell):
            raise ValueError(f"cell must be three labels in 0..{self._counts.arity}")
        if cell == (0, 0, 0):
            raise ValueError("cell (0, 0, 0) is never populated")
        return cell

    def attempted_block(self) -> np.ndarray:
        """k^3 x k^3 covariance of the all-three-answered cells, row-major."""
        k = self._counts.arity
        cells = self._counts.counts[1:, 1:, 1:].reshape(-1)
        total = self._counts.n_all_three
        if total <= 0:
            self.degenerate_patterns.add((1, 1, 1))
            return np.zeros((k ** 3, k ** 3))
        block = -np.outer(cells, cells) / total
        block[np.diag_indices_from(block)] = cells * (total - cells) / total
        return block


def counts_covariances(counts: CountsTensor) -> CountsCovariances:
    """Covariance accessor for a counts tensor."""
    return CountsCovariances(counts)


@dataclass(frozen=True, eq=False)
class KaryJacobian:
    """Central-difference derivatives of the scaled matrices V1..V3.

    derivs[w, i1, i2, a, b, c] is the derivative of V_{w+1}(i1, i2) with
    respect to counts[a+1, b+1, c+1]. usable[a, b, c] is False where a
    perturbed recovery failed; such derivatives are NaN.
    """

    arity: int
    eps: float
    derivs: np.ndarray
    usable: np.ndarray

    def gradient(self, worker: int, row: int, col: int) -> np.ndarray:
        """Flattened (row-major cell order) gradient of one V entry."""
        return self.derivs[worker, row, col].reshape(-1)


def numerical_jacobian(counts: CountsTensor,
                       eps: float = JACOBIAN_EPS_DEFAULT) -> KaryJacobian:
    """Differentiate the spectral recovery against each jointly-answered cell.

    Each cell of the all-three block is shifted by +-eps with a full
    recovery re-run on either side. The base recovery is assumed to
    succeed; cells whose perturbed recovery fails are flagged unusable.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    k = counts.arity
    work = np.array(counts.counts, dtype=float, copy=True)
    derivs = np.full((3, k, k, k, k, k), np.nan)
    usable = np.zeros((k, k, k), dtype=bool)
    for a in range(1, k + 1):
        for b in range(1, k + 1):
            for c in range(1, k + 1):
                original = work[a, b, c]
                try:
                    work[a, b, c] = original + eps
                    plus = _prob_estimate_arrays(work, k)[:3]
                    work[a, b, c] = original - eps
                    minus = _prob_estimate_arrays(work, k)[:3]
                except (EstimationFailure, InsufficientOverlapError):
                    continue
                finally:
                    work[a, b, c] = original
                for w in range(3):
                    derivs[w, :, :, a - 1, b - 1, c - 1] = (
                        (plus[w] - minus[w]) / (2.0 * eps))
                usable[a - 1, b - 1, c - 1] = True
    return KaryJacobian(arity=k, eps=float(eps), derivs=derivs, usable=usable)


@dataclass(frozen=True, eq=False)
class KaryDeviations:
    """Row-normalized midpoints and linearized deviations, pre-interval.

    midpoints[w] are the rows of V_{w+1} divided by their own sums (so each
    row sums to 1); deviations are on the same normalized scale. Confidence
    intervals at any level follow as midpoint +- z * deviation.
    """

    arity: int
    midpoints: np.ndarray
    deviations: np.ndarray
    selectivity: np.ndarray
    estimate: ResponseProbEstimate


def kary_deviations(counts: CountsTensor,
                    eps: float = JACOBIAN_EPS_DEFAULT) -> KaryDeviations:
    """Spectral recovery plus linearized entrywise deviations.

    Raises EstimationFailure when the recovery fails, when any Jacobian
    column is unusable, or when a V row sum vanishes.
    """
    estimate = prob_estimate(counts)
    jac = numerical_jacobian(counts, eps)
    if not jac.usable.all():
        bad = int((~jac.usable).sum())
        raise EstimationFailure(
            REASON_JACOBIAN_FAILURE,
            f"{bad} of {jac.usable.size} perturbed recoveries failed")
    k = counts.arity
    block = counts_covariances(counts).attempted_block()
    grads = jac.derivs.reshape(3 * k * k, k ** 3)
    variances = np.einsum("ij,jk,ik->i", grads, block, grads)
    dev_v = np.sqrt(np.clip(variances, 0.0, None)).reshape(3, k, k)
    v_all = np.stack([estimate.v1, estimate.v2, estimate.v3])
    row_sums = v_all.sum(axis=2, keepdims=True)
    if (np.abs(row_sums) < 1e-12).any():
        raise EstimationFailure(REASON_DEGENERATE_SELECTIVITY, "zero row sum")
    return KaryDeviations(
        arity=k,
        midpoints=v_all / row_sums,
        deviations=dev_v / np.abs(row_sums),
        selectivity=estimate.selectivity,
        estimate=estimate)


@dataclass(frozen=True, eq=False)
class KaryDiagnostics:
    slice_failures: tuple[tuple[int, str], ...] = ()
    max_imag: float = 0.0
    rows_permuted: bool = False
    rows_sign_fixed: bool = False
    clamped: bool = False


@dataclass(frozen=True, eq=False)
class KaryReport:
    """Entrywise confidence intervals for a worker triple's matrices.

    intervals[w][row][col] covers P_{w+1}(row, col); each row of midpoints
    sums to 1 up to float error. On failure the grids and selectivity are
    None and `reason` carries the cause.
    """

    arity: int
    confidence: float
    failed: bool
    reason: str | None
    intervals: tuple[tuple[tuple[ConfidenceInterval, ...], ...], ...] | None
    selectivity: tuple[float, ...] | None
    diagnostics: KaryDiagnostics


def kary_confidence_intervals(counts: CountsTensor, confidence: float,
                              eps: float = JACOBIAN_EPS_DEFAULT) -> KaryReport:
    """Full interval report for a triple's response-probability matrices.

    Estimation failures produce a failed report; a pair sharing no tasks
    still raises InsufficientOverlapError since the input violates the
    estimator's precondition.
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    try:
        devs = kary_deviations(counts, eps)
    except EstimationFailure as exc:
        return KaryReport(arity=counts.arity, confidence=confidence, failed=True,
                          reason=exc.reason, intervals=None, selectivity=None,
                          diagnostics=KaryDiagnostics())
    z = abs(normal_quantile((1.0 - confidence) / 2.0))
    grids = tuple(
        tuple(
            tuple(
                ConfidenceInterval(
                    confidence=confidence,
                    estimate=float(devs.midpoints[w, r, c]),
                    half_width=z * float(devs.deviations[w, r, c]))
                for c in range(counts.arity))
            for r in range(counts.arity))
        for w in range(3))
    est = devs.estimate
    return KaryReport(
        arity=counts.arity, confidence=confidence, failed=False, reason=None,
        intervals=grids,
        selectivity=tuple(float(s) for s in devs.selectivity),
        diagnostics=KaryDiagnostics(
            slice_failures=est.slice_failures, max_imag=est.max_imag,
            rows_permuted=est.rows_permuted, rows_sign_fixed=est.rows_sign_fixed,
            clamped=est.clamped))
