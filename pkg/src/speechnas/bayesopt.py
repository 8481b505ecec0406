"""Gaussian-process surrogate over architecture codes.

Kernel: ``k(a, a') = sf2 * exp(-gamma * hamming(a, a'))`` with the
component-normalised Hamming distance.  Observations carry i.i.d. Gaussian
noise ``noise2`` around a constant mean ``mu0``.

Hyper-parameters are fitted by maximising the exact marginal likelihood.  For
fixed ``(gamma, eta = noise2 / sf2)`` the optimal ``mu0`` and ``sf2`` have
closed forms, so the search is a 2-D log-space grid followed by bounded
local refinement over ``(log gamma, log eta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm

from .archspace import ArchCode, CodeEncoder, SearchSpace, hamming_distance, mutate, parse, sample_uniform, \
    serialize, validate

GAMMA_BOUNDS = (1e-2, 1e3)
ETA_BOUNDS = (1e-6, 10.0)
SF2_FLOOR = 1e-12
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
STD_FLOOR = 1e-9


def kernel(a1: ArchCode, a2: ArchCode, gamma: float, sf2: float) -> float:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return sf2 * float(np.exp(-gamma * hamming_distance(a1, a2)))


def kernel_matrix(D: np.ndarray, gamma: float, sf2: float) -> np.ndarray:
    """Kernel values from a Hamming-distance matrix."""
    return sf2 * np.exp(-gamma * D)


def jittered_cholesky(A: np.ndarray) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter from 0 to 1e-6 (relative to the mean diagonal)."""
    scale = max(float(np.mean(np.diag(A))), 1e-300)
    for jitter in JITTERS:
        try:
            L = linalg.cholesky(A + jitter * scale * np.eye(len(A)), lower=True)
            return L, jitter
        except linalg.LinAlgError:
            continue
    raise linalg.LinAlgError(f"Cholesky failed even with jitter {JITTERS[-1]:g}")


def _profiled(D: np.ndarray, y: np.ndarray, gamma: float, eta: float):
    """Profile out mu0 and sf2; returns (log-likelihood, mu0, sf2, L)."""
    n = len(y)
    R = np.exp(-gamma * D) + eta * np.eye(n)
    L, _ = jittered_cholesky(R)
    ones = np.ones(n)
    Ri_1 = linalg.cho_solve((L, True), ones)
    Ri_y = linalg.cho_solve((L, True), y)
    mu0 = float(ones @ Ri_y / (ones @ Ri_1))
    r = y - mu0
    quad = float(r @ linalg.cho_solve((L, True), r))
    sf2 = max(quad / n, SF2_FLOOR)
    logdet = 2.0 * np.sum(np.log(np.diag(L))) + n * np.log(sf2)
    ll = -0.5 * (quad / sf2 + logdet + n * np.log(2 * np.pi))
    return float(ll), mu0, sf2


def log_marginal_likelihood(D: np.ndarray, y: np.ndarray, gamma: float, sf2: float, noise2: float,
                            mu0: float) -> float:
    """Exact GP log marginal likelihood (no profiling)."""
    K = kernel_matrix(D, gamma, sf2) + noise2 * np.eye(len(y))
    L, _ = jittered_cholesky(K)
    r = np.asarray(y) - mu0
    alpha = linalg.cho_solve((L, True), r)
    return float(-0.5 * r @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * np.log(2 * np.pi))


@dataclass
class GPModel:
    archs: List[ArchCode]
    y: np.ndarray
    gamma: float
    sf2: float
    noise2: float
    mu0: float
    encoder: CodeEncoder
    X: np.ndarray = field(repr=False)
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    grid_lml: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def with_params(cls, archs: Sequence[ArchCode], y, space: SearchSpace, gamma: float, sf2: float,
                    noise2: float, mu0: float) -> "GPModel":
        """Condition on data with fixed hyper-parameters."""
        enc = CodeEncoder(space)
        X = enc.encode(archs)
        D = enc.hamming_matrix(X, X)
        y = np.asarray(y, dtype=np.float64)
        K = kernel_matrix(D, gamma, sf2) + noise2 * np.eye(len(y))
        L, _ = jittered_cholesky(K)
        alpha = linalg.cho_solve((L, True), y - mu0)
        return cls(list(archs), y, gamma, sf2, noise2, mu0, enc, X, L, alpha)

    def log_marginal_likelihood(self) -> float:
        D = self.encoder.hamming_matrix(self.X, self.X)
        return log_marginal_likelihood(D, self.y, self.gamma, self.sf2, self.noise2, self.mu0)

    def predict(self, archs: Sequence[ArchCode]) -> Tuple[np.ndarray, np.ndarray]:
        """Predictive mean and standard deviation of a new observation."""
        Xs = self.encoder.encode(archs)
        return self.predict_encoded(Xs)

    def predict_encoded(self, Xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        Ks = kernel_matrix(self.encoder.hamming_matrix(Xs, self.X), self.gamma, self.sf2)
        mean = self.mu0 + Ks @ self.alpha
        v = linalg.solve_triangular(self.chol, Ks.T, lower=True)
        var = self.sf2 + self.noise2 - np.sum(v * v, axis=0)
        return mean, np.sqrt(np.maximum(var, 0.0))


def fit(archs: Sequence[ArchCode], y, space: SearchSpace, gamma_bounds=GAMMA_BOUNDS, eta_bounds=ETA_BOUNDS,
        grid: Tuple[int, int] = (15, 9), refine: bool = True) -> GPModel:
    """Maximum-marginal-likelihood GP over ``(archs, y)``.

    ``y`` is standardised internally; the returned model reports
    hyper-parameters on the original scale.  Deterministic.
    """
    if len(archs) < 2:
        raise ValueError("need at least two observations to fit a GP")
    y = np.asarray(y, dtype=np.float64)
    shift = float(np.mean(y))
    scale = float(np.std(y))
    scale = scale if scale > 1e-12 else 1.0
    yn = (y - shift) / scale
    enc = CodeEncoder(space)
    X = enc.encode(archs)
    D = enc.hamming_matrix(X, X)

    lg = np.linspace(np.log(gamma_bounds[0]), np.log(gamma_bounds[1]), grid[0])
    le = np.linspace(np.log(eta_bounds[0]), np.log(eta_bounds[1]), grid[1])
    table = np.full((len(lg), len(le)), -np.inf)
    for i, a in enumerate(lg):
        for j, b in enumerate(le):
            try:
                table[i, j] = _profiled(D, yn, np.exp(a), np.exp(b))[0]
            except linalg.LinAlgError:
                pass
    i, j = np.unravel_index(np.argmax(table), table.shape)
    best = np.array([lg[i], le[j]])
    best_ll = table[i, j]
    if refine:
        def negll(theta):
            try:
                return -_profiled(D, yn, np.exp(theta[0]), np.exp(theta[1]))[0]
            except linalg.LinAlgError:
                return np.inf

        bounds = [(lg[0], lg[-1]), (le[0], le[-1])]
        res = optimize.minimize(negll, best, method="L-BFGS-B", bounds=bounds)
        if np.isfinite(res.fun) and -res.fun > best_ll:
            best, best_ll = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds]), -res.fun
    gamma, eta = float(np.exp(best[0])), float(np.exp(best[1]))
    _, mu0n, sf2n = _profiled(D, yn, gamma, eta)
    sf2 = sf2n * scale ** 2
    model = GPModel.with_params(archs, y, space, gamma, sf2, eta * sf2, shift + scale * mu0n)
    # likelihood table on the original scale differs by a constant: -n log(scale)
    model.grid_lml = table - len(y) * np.log(scale)
    return model


def posterior(gp: GPModel, arch: ArchCode) -> Tuple[float, float]:
    if gp is None:
        raise ValueError("GP has not been fitted")
    m, s = gp.predict([arch])
    return float(m[0]), float(s[0])


def pof(mean, std, tau: float):
    """``Phi((tau - mean) / max(std, 1e-9))``: chance the objective falls below ``tau``."""
    return norm.cdf((tau - np.asarray(mean)) / np.maximum(np.asarray(std), STD_FLOOR))


def log_pof(mean, std, tau: float):
    return norm.logcdf((tau - np.asarray(mean)) / np.maximum(np.asarray(std), STD_FLOOR))


# ---------------------------------------------------------------- history


class SearchHistory:
    """Evaluated architectures in evaluation order; duplicates are averaged."""

    def __init__(self):
        self._order: List[str] = []
        self._values: Dict[str, List[float]] = {}

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, arch) -> bool:
        key = arch if isinstance(arch, str) else serialize(arch)
        return key in self._values

    def add(self, arch: ArchCode, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"EER {value} outside [0, 1]")
        key = serialize(arch)
        if key not in self._values:
            self._order.append(key)
            self._values[key] = []
        self._values[key].append(float(value))

    @property
    def archs(self) -> List[ArchCode]:
        return [parse(k) for k in self._order]

    @property
    def values(self) -> np.ndarray:
        return np.array([np.mean(self._values[k]) for k in self._order])

    @property
    def best(self) -> Tuple[ArchCode, float]:
        v = self.values
        i = int(np.argmin(v))
        return parse(self._order[i]), float(v[i])

    @property
    def tau(self) -> float:
        return float(self.values.min())

    def ranked(self, k: Optional[int] = None) -> List[Tuple[ArchCode, float]]:
        v = self.values
        idx = np.argsort(v, kind="stable")[:k]
        return [(parse(self._order[i]), float(v[i])) for i in idx]

    def top(self, k: int) -> List[ArchCode]:
        return [a for a, _ in self.ranked(k)]

    @staticmethod
    def format_line(arch: ArchCode, value: float) -> str:
        return f"{serialize(arch)}\t{float(value)!r}\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for key in self._order:
                for v in self._values[key]:
                    fh.write(f"{key}\t{v!r}\n")

    @classmethod
    def load(cls, path) -> "SearchHistory":
        h = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                code, value = line.split("\t")
                h.add(parse(code), float(value))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return h


# ---------------------------------------------------------------- proposal


def propose(gp: GPModel, history: SearchHistory, space: SearchSpace, n2: int, pool_size: int = 10_000,
            rng_seed=None, n_parents: int = 10, mutation_rate: float = 0.1,
            mutations_per_parent: Optional[int] = None) -> List[ArchCode]:
    """Top-``n2`` unseen architectures by probability of feasibility.

    The candidate pool is ``pool_size`` uniform samples plus mutations of the
    ``n_parents`` best evaluated codes.  Ranking uses log-PoF so that
    candidates far below the threshold still order correctly; ties are
    broken by lower posterior mean.
    """
    if n2 < 1:
        raise ValueError("n2 must be >= 1")
    rng = np.random.default_rng(rng_seed)
    if mutations_per_parent is None:
        mutations_per_parent = max(1, pool_size // (2 * n_parents))
    seen = set()
    pool: List[ArchCode] = []

    def offer(a: ArchCode):
        key = serialize(a)
        if key not in seen and a not in history:
            seen.add(key)
            pool.append(a)

    for _ in range(pool_size):
        offer(sample_uniform(space, rng))
    for parent in history.top(n_parents):
        for _ in range(mutations_per_parent):
            offer(mutate(parent, mutation_rate, rng, space))
    if len(pool) < n2:
        raise ValueError(f"candidate pool has {len(pool)} unseen codes, fewer than n2={n2}")
    mean, std = gp.predict(pool)
    score = log_pof(mean, std, history.tau)
    order = np.lexsort((mean, -score))
    return [pool[i] for i in order[:n2]]


@dataclass
class BOResult:
    history: SearchHistory
    best_trace: List[float]  # best-so-far after each evaluation


def optimize_objective(objective, space: SearchSpace, init_count: int, n1: int, n2: int, pool_size: int,
                       seed: int = 0, target: Optional[float] = None, fit_kwargs: Optional[dict] = None
                       ) -> BOResult:
    """Plain BO loop on a cheap ``objective(arch) -> float``; stops early at ``target``."""
    rng = np.random.default_rng(seed)
    history = SearchHistory()
    trace: List[float] = []

    def record(a):
        history.add(a, objective(a))
        trace.append(history.tau)

    while len(history) < init_count:
        a = sample_uniform(space, rng)
        if a not in history:
            record(a)
    for _ in range(n1):
        if target is not None and history.tau <= target:
            break
        gp = fit(history.archs, history.values, space, **(fit_kwargs or {}))
        for a in propose(gp, history, space, n2, pool_size, rng):
            record(a)
    return BOResult(history, trace)


def check_history_space(history: SearchHistory, space: SearchSpace) -> None:
    for a in history.archs:
        problems = validate(a, space)
        if problems:
            raise ValueError(f"history entry {serialize(a)} does not belong to the configured space: "
                             + "; ".join(problems))
