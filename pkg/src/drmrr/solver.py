"""Linear multi-output regression under a Wasserstein-ball robust loss.

The robust problem over the Wasserstein ball is solved through its
regularized equivalent::

    min_B  (1/N) sum_d ||theta_d - B' x_d||_r  +  eps * ||[-B; I_K]||_s

with ``1/r + 1/s = 1`` and ``||.||_s`` the induced matrix norm. ``r = 2`` is
the main path; ``r`` in {1, inf} is supported with lowest-index tie rules.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import RankingDataset
from .gtd import GtdParams, build_gtd_matrix

INF = math.inf
WEIGHTS_FORMAT = "drmrr-weights"
WEIGHTS_VERSION = 1


class PowerIterationError(RuntimeError):
    def __init__(self, message: str, last_iterate: np.ndarray, estimate: float):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.estimate = estimate


class SolverError(RuntimeError):
    pass


def _norm_order(r) -> float:
    r = float(r)
    if r not in (1.0, 2.0, INF):
        raise ValueError(f"norm order must be 1, 2 or inf, got {r}")
    return r


def conjugate(r) -> float:
    """Hölder conjugate of r in {1, 2, inf}."""
    r = _norm_order(r)
    return {1.0: INF, 2.0: 2.0, INF: 1.0}[r]


def augmented(B: np.ndarray) -> np.ndarray:
    """The stacked matrix [-B; I_K], i.e. the transpose of (-B', I_K)."""
    return np.vstack([-B, np.eye(B.shape[1])])


def _top_eigenpair(G: np.ndarray, v: np.ndarray, power_iters: int, tol: float):
    """Power iteration for the largest eigenvalue of a PSD matrix G.

    The Rayleigh quotient converges geometrically, so the remaining error is
    estimated from the ratio q of successive changes as change * q / (1 - q);
    iteration stops once that estimate falls below ``tol`` relative on two
    consecutive steps.
    """
    v = v / np.linalg.norm(v)
    lam = float(v @ G @ v)
    prev_change = math.nan
    hits = 0
    for _ in range(power_iters):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        v = w / nw
        new = float(v @ G @ v)
        change = abs(new - lam)
        scale = max(abs(new), np.finfo(float).tiny)
        lam = new
        if change <= 4 * np.finfo(float).eps * scale:
            return max(new, 0.0), v
        q = change / prev_change
        hits = hits + 1 if q < 1.0 and change * q / (1.0 - q) <= tol * scale else 0
        if hits >= 2:
            return max(new, 0.0), v
        prev_change = change
    raise PowerIterationError(
        f"power iteration did not converge in {power_iters} iterations", v, math.sqrt(max(lam, 0.0))
    )


def _start_vector(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def induced_norm(M, s, power_iters: int = 10_000, seed: int = 0, tol: float = 1e-10) -> float:
    """Induced matrix norm sup ||Mx||_s / ||x||_s for s in {1, 2, inf}.

    s=2 runs power iteration on M'M until the estimated relative error of
    the top eigenvalue drops below ``tol``.
    """
    M = np.asarray(M, dtype=float)
    s = _norm_order(s)
    if s == 1.0:
        return float(np.abs(M).sum(axis=0).max())
    if s == INF:
        return float(np.abs(M).sum(axis=1).max())
    lam, _ = _top_eigenpair(M.T @ M, _start_vector(M.shape[1], seed), power_iters, tol)
    return math.sqrt(lam)


@dataclass
class TrainingSet:
    X: np.ndarray
    Theta: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Theta = np.asarray(self.Theta, dtype=float)
        if self.Theta.ndim == 1:
            self.Theta = self.Theta[:, None]
        if self.X.shape[0] != self.Theta.shape[0]:
            raise ValueError("X and Theta need the same number of rows")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Theta.shape[1]

    @classmethod
    def from_dataset(
        cls,
        dataset: RankingDataset,
        params: GtdParams,
        include_degenerate: bool = False,
        intercept: bool = False,
    ) -> "TrainingSet":
        """Stack features and GTD targets; all-zero-label queries are skipped by default."""
        Xs, Ts = [], []
        for q in dataset:
            G = build_gtd_matrix(q.labels, params)
            if G.degenerate and not include_degenerate:
                continue
            Xs.append(_with_intercept(q.features) if intercept else q.features)
            Ts.append(G.values)
        if not Xs:
            raise ValueError("no usable training queries")
        return cls(np.vstack(Xs), np.vstack(Ts))


def _with_intercept(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


@dataclass
class ModelWeights:
    B: np.ndarray
    r: float = 2.0
    epsilon: float = 0.0
    intercept: bool = False

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.r = _norm_order(self.r)
        if not np.all(np.isfinite(self.B)):
            raise ValueError("weights must be finite")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @property
    def s(self) -> float:
        return conjugate(self.r)

    @property
    def p(self) -> int:
        return self.B.shape[0] - (1 if self.intercept else 0)

    @property
    def K(self) -> int:
        return self.B.shape[1]

    def to_dict(self) -> dict:
        return {
            "format": WEIGHTS_FORMAT,
            "version": WEIGHTS_VERSION,
            "p": self.p,
            "K": self.K,
            "r": "inf" if self.r == INF else self.r,
            "epsilon": self.epsilon,
            "intercept": self.intercept,
            "B": self.B.ravel(order="C").tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelWeights":
        if data.get("format") != WEIGHTS_FORMAT or data.get("version") != WEIGHTS_VERSION:
            raise ValueError("not a supported weights file")
        intercept = bool(data.get("intercept", False))
        rows = data["p"] + (1 if intercept else 0)
        B = np.array(data["B"], dtype=float).reshape(rows, data["K"])
        r = INF if data["r"] == "inf" else float(data["r"])
        return cls(B, r, float(data["epsilon"]), intercept)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelWeights":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SolverConfig:
    """Subgradient descent settings.

    Iterations run in epochs of ``restart_every`` steps. Within an epoch the
    step at local iteration t is ``step0 / sqrt(t)`` along the subgradient
    (scaled to unit Frobenius norm when ``normalized``); each new epoch
    restarts from the best iterate with ``step0`` multiplied by
    ``restart_factor``. ``step0=None`` uses the Frobenius norm of the
    least-squares fit, a rough distance from B=0 to the optimum.

    Stops after ``max_iters`` steps or after ``patience`` consecutive
    epochs that each improved the best objective by less than ``tol``
    (relative).
    """

    max_iters: int = 5000
    step0: float | None = None
    normalized: bool = True
    restart_every: int = 500
    restart_factor: float = 0.5
    tol: float = 1e-7
    patience: int = 5


def _row_norms(R: np.ndarray, r: float) -> np.ndarray:
    if r == 2.0:
        return np.sqrt(np.einsum("ij,ij->i", R, R))
    if r == 1.0:
        return np.abs(R).sum(axis=1)
    return np.abs(R).max(axis=1)


def _residuals(B, data: TrainingSet) -> np.ndarray:
    return data.Theta - data.X @ B


def empirical_loss(B, data: TrainingSet, r=2.0) -> float:
    B = np.asarray(B, dtype=float)
    return float(np.mean(_row_norms(_residuals(B, data), _norm_order(r))))


def regularizer(B, r=2.0) -> float:
    """||[-B; I_K]||_s for the conjugate s of r.

    The spectral case uses LAPACK's SVD through the identity
    ||[-B; I]||_2 = sqrt(1 + sigma_max(B)^2); ``induced_norm`` is the
    power-iteration route to the same number.
    """
    B = np.asarray(B, dtype=float)
    s = conjugate(r)
    if s == 2.0:
        sigma = np.linalg.svd(B, compute_uv=False)[0] if B.size else 0.0
        return math.sqrt(1.0 + sigma * sigma)
    return induced_norm(augmented(B), s)


def objective(B, data: TrainingSet, epsilon: float, r=2.0) -> float:
    loss = empirical_loss(B, data, r)
    if epsilon == 0:
        return loss
    return loss + epsilon * regularizer(B, r)


def _loss_subgradient(B, data: TrainingSet, r: float) -> np.ndarray:
    R = _residuals(B, data)
    if r == 2.0:
        norms = _row_norms(R, 2.0)
        U = np.divide(R, norms[:, None], out=np.zeros_like(R), where=norms[:, None] > 0)
    elif r == 1.0:
        U = np.sign(R)
    else:
        U = np.zeros_like(R)
        rows = np.arange(R.shape[0])
        j = np.argmax(np.abs(R), axis=1)  # first maximal entry
        U[rows, j] = np.sign(R[rows, j])
    return -(data.X.T @ U) / data.N


def _regularizer_subgradient(B: np.ndarray, r: float) -> np.ndarray:
    G = np.zeros_like(B)
    if r == 2.0:
        # ||[-B; I]||_2 = sqrt(1 + sigma_max(B)^2)
        U, S, Vt = np.linalg.svd(B, full_matrices=False)
        sigma = S[0] if S.size else 0.0
        if sigma == 0.0:
            return G
        return (sigma / math.sqrt(1.0 + sigma * sigma)) * np.outer(U[:, 0], Vt[0])
    A = np.abs(B)
    if r == 1.0:
        # s = inf: max row sum of [-B; I] = max(max_i sum_j |B_ij|, 1)
        sums = A.sum(axis=1)
        i = int(np.argmax(sums))
        if sums[i] > 1.0:
            G[i] = np.sign(B[i])
        return G
    # s = 1: max column sum of [-B; I] = 1 + max_j sum_i |B_ij|
    j = int(np.argmax(A.sum(axis=0)))
    G[:, j] = np.sign(B[:, j])
    return G


def subgradient(B, data: TrainingSet, epsilon: float, r=2.0) -> np.ndarray:
    """A subgradient of ``objective`` with respect to B (p x K)."""
    B = np.asarray(B, dtype=float)
    r = _norm_order(r)
    G = _loss_subgradient(B, data, r)
    if epsilon:
        G = G + epsilon * _regularizer_subgradient(B, r)
    return G


@dataclass
class FitResult:
    weights: ModelWeights
    objective: float
    iterations: int
    history: list[float] = field(default_factory=list)


def _default_step(data: TrainingSet) -> float:
    B_ls, *_ = np.linalg.lstsq(data.X, data.Theta, rcond=None)
    scale = float(np.linalg.norm(B_ls))
    return scale if scale > 0 else 1.0


def fit_path(data: TrainingSet, epsilon: float = 0.0, r=2.0, config: SolverConfig | None = None) -> FitResult:
    """Subgradient descent from B=0 keeping the best iterate seen."""
    config = config or SolverConfig()
    r = _norm_order(r)
    if data.N < 1:
        raise ValueError("empty training set")
    if config.tol <= 0:
        raise ValueError("tol must be positive")
    if config.restart_every < 1:
        raise ValueError("restart_every must be >= 1")
    step0 = config.step0 if config.step0 is not None else _default_step(data)
    if step0 <= 0:
        raise ValueError("step0 must be positive")

    def f(B):
        val = objective(B, data, epsilon, r)
        if not math.isfinite(val):
            raise SolverError("objective is not finite; check feature scaling")
        return val

    B = np.zeros((data.p, data.K))
    best_B, best = B.copy(), f(B)
    history = [best]
    epoch_start = best
    stale = 0
    local = 0
    t = 0
    for t in range(1, config.max_iters + 1):
        local += 1
        if local > config.restart_every:
            if epoch_start - best <= config.tol * abs(epoch_start):
                stale += 1
                if stale >= config.patience:
                    t -= 1
                    break
            else:
                stale = 0
            epoch_start = best
            B, local = best_B.copy(), 1
            step0 *= config.restart_factor
        g = subgradient(B, data, epsilon, r)
        gnorm = float(np.linalg.norm(g))
        if not math.isfinite(gnorm):
            raise SolverError("subgradient is not finite; check feature scaling")
        if gnorm == 0.0:
            break
        step = step0 / math.sqrt(local)
        B = B - (step / gnorm if config.normalized else step) * g
        val = f(B)
        if val < best:
            best, best_B = val, B.copy()
        history.append(best)
    return FitResult(ModelWeights(best_B, r, epsilon), best, t, history)


def fit(data: TrainingSet, epsilon: float = 0.0, r=2.0, config: SolverConfig | None = None) -> ModelWeights:
    return fit_path(data, epsilon, r, config).weights


def predict_gtd(weights: ModelWeights, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != weights.p:
        raise ValueError(f"expected {weights.p} features, got {X.shape[1]}")
    if weights.intercept:
        X = _with_intercept(X)
    return X @ weights.B


@dataclass
class BoundReport:
    objective: float
    empirical_loss: float
    max_sampled_loss: float
    n_samples: int
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _random_directions(rng, n: int, dim: int, r: float) -> np.ndarray:
    D = rng.standard_normal((n, dim))
    norms = _row_norms(D, r)
    return D / np.where(norms > 0, norms, 1.0)[:, None]


def worst_case_bound_check(
    weights: ModelWeights,
    data: TrainingSet,
    epsilon: float,
    r=None,
    n_samples: int = 1000,
    seed: int = 0,
    tol: float = 1e-9,
) -> BoundReport:
    """Sample distributions in the Wasserstein ball and compare their loss to the objective.

    Each sample moves every training point z_d = (x_d, theta_d) by a shift
    whose r-norms average to at most ``epsilon``, which keeps the moved
    empirical distribution inside the ball. Half the samples use random
    directions and random budget splits; the rest spend the budget on a
    single point along the direction of steepest loss increase, scanned
    over budget fractions.
    """
    r = _norm_order(weights.r if r is None else r)
    B = weights.B
    p, K = B.shape
    N = data.N
    Bt = np.hstack([-B.T, np.eye(K)])  # maps a shift (dx, dtheta) to its residual change
    obj = objective(B, data, epsilon, r)
    emp = empirical_loss(B, data, r)
    R = _residuals(B, data)
    rng = np.random.default_rng(seed)

    def loss_after(shift: np.ndarray) -> float:
        return float(np.mean(_row_norms(R + shift @ Bt.T, r)))

    worst = -INF
    violations = 0

    def record(val: float):
        nonlocal worst, violations
        worst = max(worst, val)
        if val > obj + tol:
            violations += 1

    n_random = n_samples - n_samples // 2
    for _ in range(n_random):
        budget = N * epsilon * rng.dirichlet(np.ones(N)) * rng.uniform()
        dirs = _random_directions(rng, N, p + K, r)
        record(loss_after(dirs * budget[:, None]))

    # steepest single-point shifts: for r=2 the top right singular vector of Bt
    _, _, Vt = np.linalg.svd(Bt)
    v = Vt[0]
    n_aligned = n_samples // 2
    for k in range(n_aligned):
        d = int(rng.integers(N))
        if r == 2.0:
            direction = v * (1.0 if R[d] @ (Bt @ v) >= 0 else -1.0)
        else:
            direction = _random_directions(rng, 1, p + K, r)[0]
            direction *= 1.0 if R[d] @ (Bt @ direction) >= 0 else -1.0
        frac = (k % 10 + 1) / 10.0
        shift = np.zeros((N, p + K))
        shift[d] = direction * (N * epsilon * frac)
        record(loss_after(shift))
    return BoundReport(obj, emp, worst, n_samples, violations)
