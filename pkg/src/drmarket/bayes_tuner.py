"""Gaussian-process tuning of the per-player contract-violation budgets.

A Matérn-5/2 ARD surrogate maps candidate violation-rate vectors to the
absolute deviation between the empirical joint violation rate and its
target; expected improvement picks the next candidate inside the admissible
box.  Everything is deterministic for a fixed seed: kernel fits restart from
seeded draws, acquisition candidates come from a seeded Sobol stream and
ties break toward the lexicographically smallest point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.stats import norm, qmc

NOISE_FLOOR = 1e-6
JITTER_MAX = 1e-6


@dataclass
class ObservationLog:
    target: float
    points: list[np.ndarray] = field(default_factory=list)
    empirical: list[float] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        """Evaluation values |empirical - target|, recomputed on demand."""
        return np.abs(np.asarray(self.empirical) - self.target)

    def append(self, point, empirical_rate):
        self.points.append(np.atleast_1d(np.asarray(point, dtype=float)).copy())
        self.empirical.append(float(empirical_rate))

    def __len__(self):
        return len(self.points)

    def best(self) -> tuple[np.ndarray, float, float]:
        """Row with the smallest deviation; ties resolve to the least
        conservative budget (lexicographically largest point)."""
        vals = self.values
        best_v = float(np.min(vals))
        tied = [j for j, v in enumerate(vals) if v <= best_v + 1e-12]
        j = max(tied, key=lambda k: tuple(self.points[k]))
        return self.points[j], self.empirical[j], float(vals[j])

    def to_frame(self) -> pd.DataFrame:
        dim = len(self.points[0]) if self.points else 0
        data = {"iteration": np.arange(len(self.points))}
        for d in range(dim):
            data[f"eps_{d}"] = [p[d] for p in self.points]
        data["empirical_rate"] = self.empirical
        data["deviation"] = self.values
        return pd.DataFrame(data)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


# ---- kernel and model -----------------------------------------------------


def _matern52(xa, xb, signal_var, length_scales):
    d = (xa[:, None, :] - xb[None, :, :]) / length_scales
    r = np.sqrt(np.maximum(np.sum(d * d, axis=2), 0.0))
    s5r = np.sqrt(5.0) * r
    return signal_var * (1.0 + s5r + 5.0 * r * r / 3.0) * np.exp(-s5r)


@dataclass
class GpModel:
    x_train: np.ndarray
    y_train: np.ndarray
    y_mean: float
    signal_var: float
    length_scales: np.ndarray
    noise_var: float
    chol: np.ndarray
    alpha: np.ndarray

    @property
    def hyperparameters(self) -> dict:
        return {"signal_var": self.signal_var,
                "length_scales": self.length_scales.copy(),
                "noise_var": self.noise_var}


def _factorize(k_matrix):
    jitter = 0.0
    for jitter in (0.0, 1e-10, 1e-8, JITTER_MAX):
        try:
            return np.linalg.cholesky(k_matrix + jitter * np.eye(len(k_matrix)))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(
        f"training covariance not factorizable even with jitter {JITTER_MAX}")


def _neg_log_marginal(log_params, x, y):
    n, dim = x.shape
    signal_var = np.exp(log_params[0])
    scales = np.exp(log_params[1: 1 + dim])
    noise = np.exp(log_params[1 + dim])
    k = _matern52(x, x, signal_var, scales) + (noise + NOISE_FLOOR) * np.eye(n)
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return 1e12
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    return float(0.5 * y @ alpha + np.sum(np.log(np.diag(chol)))
                 + 0.5 * n * np.log(2.0 * np.pi))


def gp_fit(log: ObservationLog, seed: int = 0, n_restarts: int = 8) -> GpModel:
    """Fit hyperparameters by marginal likelihood from seeded restarts."""
    if len(log) < 1:
        raise ValueError("need at least one observation")
    x = np.vstack(log.points)
    y_raw = log.values
    y_mean = float(np.mean(y_raw))
    y = y_raw - y_mean
    n, dim = x.shape

    spans = np.maximum(x.max(axis=0) - x.min(axis=0), 1e-3)
    y_scale = max(float(np.std(y)), 1e-4)

    best_params, best_val = None, np.inf
    rng = np.random.default_rng(seed)
    starts = [np.concatenate(([np.log(y_scale ** 2)], np.log(spans),
                              [np.log(1e-4)]))]
    for _ in range(max(0, n_restarts - 1)):
        starts.append(np.concatenate((
            [np.log(y_scale ** 2) + rng.normal(0, 1.0)],
            np.log(spans) + rng.normal(0, 1.0, size=dim),
            [np.log(10 ** rng.uniform(-6, -2))])))
    bounds = [(np.log(1e-8), np.log(1e2))] + \
        [(np.log(1e-4), np.log(1e2))] * dim + [(np.log(1e-9), np.log(1.0))]
    for start in starts:
        res = optimize.minimize(_neg_log_marginal, start, args=(x, y),
                                method="L-BFGS-B", bounds=bounds)
        if res.fun < best_val:
            best_val, best_params = res.fun, res.x

    signal_var = float(np.exp(best_params[0]))
    scales = np.exp(best_params[1: 1 + dim])
    noise = float(np.exp(best_params[1 + dim]))
    k = _matern52(x, x, signal_var, scales) + (noise + NOISE_FLOOR) * np.eye(n)
    chol = _factorize(k)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    return GpModel(x_train=x, y_train=y, y_mean=y_mean, signal_var=signal_var,
                   length_scales=scales, noise_var=noise, chol=chol, alpha=alpha)


def gp_posterior(model: GpModel, query) -> tuple[float, float]:
    """Posterior mean and standard deviation at one query point."""
    q = np.atleast_2d(np.asarray(query, dtype=float))
    k_star = _matern52(q, model.x_train, model.signal_var, model.length_scales)
    mean = model.y_mean + float((k_star @ model.alpha)[0])
    v = np.linalg.solve(model.chol, k_star.T)
    var = model.signal_var - float(np.sum(v * v))
    return mean, float(np.sqrt(max(var, 0.0)))


def expected_improvement(model: GpModel, query, best_value: float) -> float:
    """Closed-form E[(best - H(query))+] under the Gaussian posterior."""
    mean, std = gp_posterior(model, query)
    if std < 1e-12:
        return max(best_value - mean, 0.0)
    u = (best_value - mean) / std
    return float((best_value - mean) * norm.cdf(u) + std * norm.pdf(u))


def propose_next(model: GpModel, log: ObservationLog, box, seed: int = 0,
                 n_candidates: int = 512) -> np.ndarray:
    """Argmax of expected improvement over the box.

    Seeded Sobol candidates plus a short simplex polish of the leaders; exact
    ties resolve to the lexicographically smallest point.
    """
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
    if np.any(hi < lo):
        raise ValueError("empty search box")
    dim = len(lo)
    best_h = float(np.min(log.values))

    sobol = qmc.Sobol(d=dim, scramble=True, seed=seed)
    cands = lo + sobol.random(n_candidates) * (hi - lo)
    cands = np.vstack([cands, np.vstack(log.points), [lo, hi, 0.5 * (lo + hi)]])
    ei = np.array([expected_improvement(model, c, best_h) for c in cands])

    # primary key: largest EI; ties: lexicographically smallest candidate
    keys = [cands[:, d] for d in range(dim - 1, -1, -1)] + [-ei]
    order = np.lexsort(keys)
    leaders = cands[order[:5]]

    def neg_ei(z):
        z = np.clip(z, lo, hi)
        return -expected_improvement(model, z, best_h)

    best_point, best_ei = None, -1.0
    for z0 in leaders:
        res = optimize.minimize(neg_ei, z0, method="Nelder-Mead",
                                options={"maxiter": 80 * dim, "xatol": 1e-6,
                                         "fatol": 1e-12})
        z = np.clip(res.x, lo, hi)
        val = expected_improvement(model, z, best_h)
        better = val > best_ei + 1e-15
        tie = abs(val - best_ei) <= 1e-15 and best_point is not None and \
            tuple(z) < tuple(best_point)
        if better or tie:
            best_point, best_ei = z, val
    return np.asarray(best_point)


# ---- outer loop --------------------------------------------------------------


@dataclass
class TunerConfig:
    target: float
    box_lo: np.ndarray
    box_hi: np.ndarray
    n_iterations: int = 20
    n_init: int = 4
    stop_tol: float = 0.05
    seed: int = 0


def initial_points(config: TunerConfig) -> np.ndarray:
    lo = np.atleast_1d(np.asarray(config.box_lo, dtype=float))
    hi = np.atleast_1d(np.asarray(config.box_hi, dtype=float))
    sobol = qmc.Sobol(d=len(lo), scramble=True, seed=config.seed)
    return lo + sobol.random(config.n_init) * (hi - lo)


def run_tuning_loop(evaluator, config: TunerConfig
                   ) -> tuple[np.ndarray, ObservationLog]:
    """Surrogate-guided search for the violation budget hitting the target.

    ``evaluator`` maps a budget vector to the empirical joint violation rate.
    Stops early once the deviation falls to stop_tol; on evaluator failure the
    partial log is attached to the raised error.
    """
    log = ObservationLog(target=config.target)

    def evaluate(point):
        try:
            rate = float(evaluator(np.asarray(point, dtype=float)))
        except Exception as exc:
            exc.partial_log = log
            raise
        log.append(point, rate)
        return abs(rate - config.target)

    for point in initial_points(config):
        if evaluate(point) <= config.stop_tol:
            best_point, _, _ = log.best()
            return best_point, log

    for m in range(config.n_iterations):
        model = gp_fit(log, seed=config.seed)
        candidate = propose_next(model, log, (config.box_lo, config.box_hi),
                                 seed=config.seed + m + 1)
        if evaluate(candidate) <= config.stop_tol:
            break

    best_point, _, _ = log.best()
    return best_point, log
