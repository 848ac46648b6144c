"""Frozen-kernel regression ``F_ntk(x) = m K*_x gamma`` and its coupling to
the trained network.

``gamma`` lives in the same l-major order as the Gram matrix, so
``vec(Y) = Y.reshape(-1)`` for a ``d2 x n`` label matrix.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DomainError, ShapeError, SingularKernelError
from .kernel import GramMatrix, gram, max_eigenvalue, min_eigenvalue, test_kernel_batch
from .model import Dataset, predict_inputs
from .seeding import derive_seed
from .training import practical_eta, symmetric_init, train

SINGULAR_TOL = 1e-10


def vec(Y) -> np.ndarray:
    return np.asarray(Y, dtype=np.float64).reshape(-1)


def unvec(g, d2) -> np.ndarray:
    return np.asarray(g, dtype=np.float64).reshape(d2, -1)


@dataclass(frozen=True)
class GammaState:
    gamma: np.ndarray
    step: int = 0
    degenerate: bool = False  # closed form solved by least squares

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), 0)


def _H(H_star):
    return H_star.H if isinstance(H_star, GramMatrix) else np.asarray(H_star, dtype=np.float64)


def gamma_step(state: GammaState, H_star, Y, eta, m) -> GammaState:
    """``gamma <- gamma - eta (m H* gamma - vec(Y))``."""
    H = _H(H_star)
    y = vec(Y)
    if H.shape != (y.size, y.size) or state.gamma.shape != y.shape:
        raise ShapeError(f"H* {H.shape}, gamma {state.gamma.shape}, vec(Y) {y.shape} disagree")
    return GammaState(state.gamma - eta * (m * (H @ state.gamma) - y), state.step + 1)


def gamma_closed_form(H_star, Y, m) -> GammaState:
    """``gamma* = (m H*)^{-1} vec(Y)`` by Cholesky.

    Below ``lambda_min = 1e-10`` the system is solved by least squares and
    the result is flagged ``degenerate``; a kernel that is singular to
    working precision raises :class:`SingularKernelError`.
    """
    H = _H(H_star)
    y = vec(Y)
    if H.shape != (y.size, y.size):
        raise ShapeError(f"H* {H.shape} does not match vec(Y) {y.shape}")
    lam = min_eigenvalue(H)
    floor = y.size * np.finfo(float).eps * max(max_eigenvalue(H), np.finfo(float).tiny)
    if lam <= floor:
        raise SingularKernelError(f"lambda_min(H*) = {lam:.3e} is at the rounding floor")
    if lam < SINGULAR_TOL:
        return GammaState(np.linalg.lstsq(m * H, y, rcond=None)[0], -1, degenerate=True)
    try:
        gamma = scipy.linalg.cho_solve(scipy.linalg.cho_factor(m * H), y)
    except np.linalg.LinAlgError:
        return GammaState(np.linalg.lstsq(m * H, y, rcond=None)[0], -1, degenerate=True)
    return GammaState(gamma, -1)


def ntk_predict(gamma, K_te, m) -> np.ndarray:
    """``m K_te gamma``; ``K_te`` may be one (d2, nd2) block or a stack of them."""
    g = gamma.gamma if isinstance(gamma, GammaState) else np.asarray(gamma)
    K = getattr(K_te, "K", K_te)
    if K.shape[-1] != g.size:
        raise ShapeError(f"kernel rows {K.shape} do not match gamma {g.shape}")
    return m * (K @ g)


@dataclass
class CouplingTrace:
    m: int
    eta: float
    lam: float
    sup_gap: list = field(default_factory=list)
    eps_H: list = field(default_factory=list)
    eps_test: list = field(default_factory=list)  # per step: (n_te, d2) array

    @property
    def max_gap(self):
        return max(self.sup_gap)

    def rows(self):
        for t, (g, e, et) in enumerate(zip(self.sup_gap, self.eps_H, self.eps_test)):
            yield (self.m, t, g, e, float(np.max(et)))

    def summary(self):
        return {
            "m": self.m, "eta": self.eta, "lambda": self.lam,
            "steps": len(self.sup_gap) - 1,
            "max_gap": self.max_gap,
            "final_gap": self.sup_gap[-1],
            "max_eps_H": max(self.eps_H),
            "max_eps_test": float(max(np.max(e) for e in self.eps_test)),
            "eps_H_below_half_lambda": bool(max(self.eps_H) <= self.lam / 2),
        }


def couple(data: Dataset, X_te, m, steps, seed, sigma, eta_scale=1.0) -> CouplingTrace:
    """Train the network and the NTK regressor in lockstep with one shared ``eta``.

    Both predictors start at zero (symmetric init, ``gamma(0) = 0``).  The
    shared step is ``eta_scale / (m lambda_max(H*))``; at this scaling the
    linearized dynamics of both sides are identical.
    """
    X_te = np.asarray(X_te, dtype=np.float64)
    if np.max(np.linalg.norm(X_te, axis=0)) > 1 + 1e-12:
        raise DomainError("test points must satisfy ||x_te||_2 <= 1")
    net0 = symmetric_init(m, data.d1, data.d2, sigma, seed)
    H_star = gram(net0, data)
    K_star = test_kernel_batch(net0, data, X_te)
    eta = practical_eta(net0, data, eta_scale)
    out = CouplingTrace(m=m, eta=eta, lam=min_eigenvalue(H_star))
    state = GammaState.zeros(data.n * data.d2)

    def record(t, net):
        nonlocal state
        f_nn = predict_inputs(net, X_te).T  # (n_te, d2)
        f_ntk = ntk_predict(state, K_star, m)
        out.sup_gap.append(float(np.max(np.abs(f_nn - f_ntk))))
        out.eps_H.append(float(np.linalg.norm(H_star.H - gram(net, data).H)))
        K_tau = test_kernel_batch(net, data, X_te)
        out.eps_test.append(np.linalg.norm(K_star - K_tau, axis=2))
        state = gamma_step(state, H_star, data.Y, eta, m)

    train(data, m, eta, steps, seed, sigma, net=net0, callback=record)
    return out


def coupling_experiment(data: Dataset, test_points, m_list, steps, seed, sigma=1.0,
                        eta_scale=1.0, workers=1) -> list[CouplingTrace]:
    """One lockstep run per width; each width gets its own derived seed."""
    for m in m_list:
        if m % 2:
            raise DomainError(f"widths must be even, got {m}")

    def run(m):
        return couple(data, test_points, m, steps, derive_seed(seed, "couple", m), sigma, eta_scale)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(run, m_list))


def count_inversions(values) -> int:
    """Number of adjacent increases in a sequence that should be nonincreasing."""
    return sum(1 for a, b in zip(values, values[1:]) if b > a)
