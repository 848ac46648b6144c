"""Softmax NTK Gram matrix, test-point kernel rows, and the two kernel
experiments: weight-perturbation stability and the concentration audit.

Block layout: row/column index ``l * n + i`` addresses output dimension
``l`` of sample ``i`` (l-major, i-minor).  ``vec(Y)`` uses the same order,
which is ``Y.reshape(-1)`` for a ``d2 x n`` label matrix.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DomainError, EigensolverError, ShapeError
from .model import Dataset, NetworkState, sample_unit_ball, softmax_batch
from .seeding import derive_rng

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class GramMatrix:
    H: np.ndarray
    n: int
    d2: int

    def block(self, l1, l2):
        n = self.n
        return self.H[l1 * n:(l1 + 1) * n, l2 * n:(l2 + 1) * n]

    def row_block(self, i):
        """Rows ``(l, i)`` for every l: the d2 x (n*d2) kernel row of sample i."""
        return self.H[i::self.n, :]


@dataclass(frozen=True)
class TestKernel:
    K: np.ndarray  # d2 x (n*d2)


def neuron_features(net: NetworkState, X) -> np.ndarray:
    """``t[l, i, r] = <v_{l,r}, S_i> * m * S_{i,r}`` where ``v_{l,r} = a_{l,r} 1 - a_l``."""
    S = softmax_batch(net.W, X).S  # (n, m)
    aS = net.a @ S.T  # (d2, n)
    v_dot = net.a[:, None, :] - aS[:, :, None]
    return v_dot * (net.m * S)[None, :, :]


def _check(net, data):
    if net.d1 != data.d1 or net.d2 != data.d2:
        raise ShapeError(
            f"network maps R^{net.d1} -> R^{net.d2}, data is R^{data.d1} -> R^{data.d2}"
        )


def gram_unsymmetrized(net: NetworkState, data: Dataset) -> np.ndarray:
    _check(net, data)
    t = neuron_features(net, data.X)
    M = t.reshape(net.d2 * data.n, net.m)
    G = data.X.T @ data.X
    return (M @ M.T) / net.m * np.tile(G, (net.d2, net.d2))


def gram(net: NetworkState, data: Dataset) -> GramMatrix:
    """Softmax NTK Gram matrix ``H(W)``, symmetrized as ``(H + H^T) / 2``."""
    H = gram_unsymmetrized(net, data)
    return GramMatrix(0.5 * (H + H.T), data.n, net.d2)


def gram_bruteforce(net: NetworkState, data: Dataset) -> GramMatrix:
    """Five nested loops straight from the kernel definition (oracle only)."""
    _check(net, data)
    n, d2, m = data.n, net.d2, net.m
    W, a, X = net.W, net.a, data.X
    S = []
    for i in range(n):
        e = [math.exp(float(W[:, r] @ X[:, i])) for r in range(m)]
        total = sum(e)
        S.append([v / total for v in e])
    H = np.zeros((n * d2, n * d2))
    for l1 in range(d2):
        for l2 in range(d2):
            for i in range(n):
                for j in range(n):
                    xx = float(X[:, i] @ X[:, j])
                    acc = 0.0
                    for r in range(m):
                        v1 = sum((a[l1, r] - a[l1, k]) * S[i][k] for k in range(m))
                        v2 = sum((a[l2, r] - a[l2, k]) * S[j][k] for k in range(m))
                        acc += v1 * m * S[i][r] * v2 * m * S[j][r]
                    H[l1 * n + i, l2 * n + j] = xx * acc / m
    return GramMatrix(0.5 * (H + H.T), n, d2)


def min_eigenpair(H) -> tuple[float, np.ndarray]:
    H = H.H if isinstance(H, GramMatrix) else np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ShapeError("eigensolver needs a square matrix")
    if np.max(np.abs(H - H.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(H))):
        raise DomainError("matrix is not symmetric")
    try:
        w, v = scipy.linalg.eigh(H, subset_by_index=[0, 0])
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise EigensolverError(str(exc)) from exc
    return float(w[0]), v[:, 0]


def min_eigenvalue(H) -> float:
    """Smallest eigenvalue of a symmetric matrix (LAPACK ``syevr``)."""
    return min_eigenpair(H)[0]


def max_eigenvalue(H) -> float:
    H = H.H if isinstance(H, GramMatrix) else np.asarray(H, dtype=np.float64)
    k = H.shape[0] - 1
    return float(scipy.linalg.eigh(H, eigvals_only=True, subset_by_index=[k, k])[0])


def test_kernel_batch(net: NetworkState, data: Dataset, X_te) -> np.ndarray:
    """Kernel rows for many test points; returns (n_te, d2, n*d2)."""
    _check(net, data)
    X_te = np.asarray(X_te, dtype=np.float64)
    t_tr = neuron_features(net, data.X).reshape(net.d2 * data.n, net.m)
    t_te = neuron_features(net, X_te)  # (d2, n_te, m)
    inner = np.einsum("lpr,qr->plq", t_te, t_tr) / net.m  # (n_te, d2, d2*n)
    G = X_te.T @ data.X  # (n_te, n)
    return inner * np.tile(G, (1, net.d2))[:, None, :]


def test_kernel(net: NetworkState, data: Dataset, x_te) -> TestKernel:
    """Feature-map rows ``K_te`` (d2 x n*d2) of a test input with ``||x_te|| <= 1``."""
    x_te = np.asarray(x_te, dtype=np.float64)
    if x_te.shape != (data.d1,):
        raise ShapeError(f"test point must have shape ({data.d1},)")
    if np.linalg.norm(x_te) > 1 + 1e-12:
        raise DomainError("test point must satisfy ||x_te||_2 <= 1")
    return TestKernel(test_kernel_batch(net, data, x_te[:, None])[0])


def _perturb_columns(rng, W, R):
    """Offsets with uniform direction and radius uniform in [0, R] per column."""
    d, m = W.shape
    direction = rng.standard_normal((d, m))
    direction /= np.linalg.norm(direction, axis=0, keepdims=True)
    radius = R * rng.uniform(size=m)
    return direction * radius


@dataclass
class PerturbationReport:
    n: int
    d: int
    m: int
    sigma: float
    R: float
    B: float
    frob_bound: float
    entry_bound: float
    frob_dev: list = field(default_factory=list)
    entry_dev: list = field(default_factory=list)

    @property
    def trials(self):
        return len(self.frob_dev)

    @property
    def frob_violations(self):
        return int(sum(v > self.frob_bound for v in self.frob_dev))

    @property
    def entry_violations(self):
        return int(sum(v > self.entry_bound for v in self.entry_dev))

    def rows(self):
        for k, (f, e) in enumerate(zip(self.frob_dev, self.entry_dev)):
            yield (k, "frobenius", f, self.frob_bound, int(f > self.frob_bound))
            yield (k, "max_entry", e, self.entry_bound, int(e > self.entry_bound))

    def summary(self):
        return {
            "n": self.n, "d": self.d, "m": self.m, "sigma": self.sigma, "R": self.R,
            "B": self.B, "trials": self.trials,
            "frob_bound": self.frob_bound, "entry_bound": self.entry_bound,
            "frob_violations": self.frob_violations,
            "entry_violations": self.entry_violations,
            "max_frob_dev": max(self.frob_dev, default=0.0),
            "max_entry_dev": max(self.entry_dev, default=0.0),
            "mean_frob_dev": float(np.mean(self.frob_dev)) if self.frob_dev else 0.0,
        }


def _perturbation_trial(n, d, m, sigma, R, seed, k):
    rng = derive_rng(seed, "perturb", k)
    data = Dataset(sample_unit_ball(rng, d, n), np.zeros((d, n)))
    W0 = sigma * rng.standard_normal((d, m))
    a = rng.choice([-1.0, 1.0], size=(d, m))
    offset = _perturb_columns(rng, W0, R)
    H0 = gram(NetworkState(W0, a), data).H
    H1 = gram(NetworkState(W0 + offset, a), data).H
    diff = H1 - H0
    return float(np.linalg.norm(diff)), float(np.max(np.abs(diff)))


def perturbation_experiment(n, d, m, sigma, R, trials, seed, B=None, delta=0.01, C=10.0,
                            workers=1) -> PerturbationReport:
    """Kernel drift under bounded weight perturbations versus its worst-case bounds.

    Each trial draws inputs in the unit ball, a Gaussian ``W~`` with std
    ``sigma``, random signs, and ``W`` within per-column radius ``R`` of
    ``W~``.  The trial stream is fixed by ``(seed, trial index)``, so a
    sweep over ``R`` reuses the same draws and only the radius changes.
    """
    from .training import compute_B

    if not 0 < R < 0.01:
        raise DomainError("perturbation radius must lie in (0, 0.01)")
    if B is None:
        B = compute_B(sigma, n, d, delta, C)
    report = PerturbationReport(
        n=n, d=d, m=m, sigma=sigma, R=R, B=B,
        frob_bound=R * n * d * math.exp(10 * B),
        entry_bound=R * math.exp(10 * B),
    )
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda k: _perturbation_trial(n, d, m, sigma, R, seed, k),
                                range(trials)))
    for f, e in results:
        report.frob_dev.append(f)
        report.entry_dev.append(e)
    return report


AUDIT_PARTS = tuple(range(1, 14))


def audit_bounds(B, R, m):
    """Right-hand sides of the thirteen concentration statements."""
    return {
        1: B,
        2: B + R,
        3: 2 * R,
        4: (math.exp(-B), math.exp(B)),
        5: (math.exp(-B - R), math.exp(B + R)),
        6: 4 * R,
        7: R * math.exp(B + R),
        8: m * R * math.exp(B + R),
        9: R / m * math.exp(3 * B + 2 * R),
        10: math.exp(2 * B) / m,
        11: math.exp(2 * B + 2 * R) / m,
        12: R / m * math.exp(4 * B + 3 * R),
        13: R * math.exp(4 * B + 3 * R),
    }


def audit_statistics(W, V, X):
    """Worst case over all indices of each Part's left-hand side.

    Two-sided Parts (4, 5) report ``(min, max)``.  Part 13 takes the
    maximizing ``z = sign(S_i - S~_i)``, so its statistic is the l1 distance.
    """
    WX = W.T @ X  # (m, n)
    VX = V.T @ X
    D = WX - VX
    pair = D[:, :, None] + D[:, None, :]  # <w_r - v_r, x_i + x_j>
    sw = softmax_batch(W, X)
    sv = softmax_batch(V, X)
    return {
        1: float(np.max(np.abs(WX))),
        2: float(np.max(np.abs(VX))),
        3: float(np.max(np.abs(pair))),
        4: (float(np.min(np.exp(WX))), float(np.max(np.exp(WX)))),
        5: (float(np.min(np.exp(VX))), float(np.max(np.exp(VX)))),
        6: float(np.max(np.abs(np.expm1(pair)))),
        7: float(np.max(np.abs(np.exp(WX) - np.exp(VX)))),
        8: float(np.max(np.abs(sw.alpha - sv.alpha))),
        9: float(np.max(np.abs(1 / sw.alpha - 1 / sv.alpha))),
        10: float(np.max(sw.S)),
        11: float(np.max(sv.S)),
        12: float(np.max(np.abs(sw.S - sv.S))),
        13: float(np.max(np.sum(np.abs(sw.S - sv.S), axis=1))),
    }


def _violates(part, stat, bound):
    if part in (4, 5):
        return stat[0] < bound[0] or stat[1] > bound[1]
    return stat > bound


@dataclass
class AuditReport:
    n: int
    d: int
    m: int
    sigma: float
    delta: float
    R: float
    B: float
    bounds: dict
    trials: int = 0
    violations: dict = field(default_factory=lambda: {k: 0 for k in AUDIT_PARTS})
    worst: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def frequency(self, part):
        return self.violations[part] / self.trials if self.trials else 0.0

    def passed(self, part):
        return self.frequency(part) <= self.delta

    @property
    def all_passed(self):
        return all(self.passed(k) for k in AUDIT_PARTS)

    def summary(self):
        parts = {}
        for k in AUDIT_PARTS:
            bound = self.bounds[k]
            parts[str(k)] = {
                "trials": self.trials,
                "violations": self.violations[k],
                "frequency": self.frequency(k),
                "worst": list(self.worst[k]) if isinstance(self.worst.get(k), tuple) else self.worst.get(k),
                "bound": list(bound) if isinstance(bound, tuple) else bound,
                "passed": self.passed(k),
            }
        return {
            "n": self.n, "d": self.d, "m": self.m, "sigma": self.sigma,
            "delta": self.delta, "R": self.R, "B": self.B, "trials": self.trials,
            "all_passed": self.all_passed, "parts": parts,
        }


def _audit_trial(n, d, m, sigma, R, seed, k):
    rng = derive_rng(seed, "audit", k)
    X = sample_unit_ball(rng, d, n)
    W = sigma * rng.standard_normal((d, m))
    V = W + _perturb_columns(rng, W, R) if R > 0 else W.copy()
    return audit_statistics(W, V, X)


def _merge_worst(part, old, new):
    if old is None:
        return new
    if part in (4, 5):
        return (min(old[0], new[0]), max(old[1], new[1]))
    return max(old, new)


def bounds_audit(n, d, m, sigma, delta, R, trials, seed, B=None, C=10.0, workers=1) -> AuditReport:
    """Empirical violation frequency of each concentration statement.

    A trial is a fresh draw of inputs, Gaussian weights and a perturbed
    copy within radius ``R``; a Part is violated in that trial if any
    index tuple breaks it.  A Part passes when its frequency is at most
    ``delta``.
    """
    from .training import compute_B

    if not 0 <= R < 0.01:
        raise DomainError("audit radius must lie in [0, 0.01)")
    if B is None:
        B = compute_B(sigma, n, d, delta, C)
    bounds = audit_bounds(B, R, m)
    report = AuditReport(n=n, d=d, m=m, sigma=sigma, delta=delta, R=R, B=B, bounds=bounds)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        stats = list(pool.map(lambda k: _audit_trial(n, d, m, sigma, R, seed, k), range(trials)))
    for k, st in enumerate(stats):
        report.trials += 1
        for part in AUDIT_PARTS:
            bad = _violates(part, st[part], bounds[part])
            report.violations[part] += int(bad)
            report.worst[part] = _merge_worst(part, report.worst.get(part), st[part])
            stat, bound = st[part], bounds[part]
            if part in (4, 5):
                # two-sided: record the worse side as a ratio against 1
                stat, bound = max(stat[1] / bound[1], bound[0] / stat[0]), 1.0
            report.records.append((k, part, stat, bound, int(bad)))
    return report
