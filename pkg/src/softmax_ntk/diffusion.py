"""Ornstein-Uhlenbeck score estimation with the softmax network as denoiser.

Forward process ``dx = -g(t)/2 x dt + sqrt(g(t)) dB`` has the closed form
``x(t) = mean_decay(t) x(0) + sqrt(1 - mean_decay(t)^2) z``.  The network
regresses ``x(0)`` on the scaled pair ``(t, x(t))``; its output is turned
into a score with the Gaussian-transition identity

    s(t, x) = (mean_decay(t) D(t, x) - x) / (1 - mean_decay(t)^2).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import DomainError, NonFiniteError
from .model import Dataset, NetworkState, predict_inputs
from .seeding import derive_rng


@dataclass(frozen=True)
class OUParams:
    """``g`` is a positive constant or a callable on ``[0, T]``; ``T0`` is the early-time cutoff."""

    T: float = 10.0
    T0: float | None = None
    g: float | Callable = 1.0
    steps: int = 500

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError("horizon T must be positive")
        if self.T0 is None:
            object.__setattr__(self, "T0", 0.01 * self.T)
        if not 0 < self.T0 < self.T:
            raise DomainError("need 0 < T0 < T")
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if not callable(self.g) and not self.g > 0:
            raise DomainError("g must be positive")

    def g_at(self, t):
        if callable(self.g):
            return np.asarray(self.g(t), dtype=np.float64)
        return np.full(np.shape(t), float(self.g))

    def to_dict(self):
        return {"T": self.T, "T0": self.T0, "g": self.g if not callable(self.g) else repr(self.g),
                "steps": self.steps}


def _integrated_g(t, params):
    if not callable(params.g):
        return float(params.g) * t
    t = np.asarray(t, dtype=np.float64)
    out = [integrate.quad(params.g, 0.0, float(s), epsabs=1e-12, epsrel=1e-10)[0]
           for s in np.ravel(t)]
    return np.reshape(out, np.shape(t))


def mean_decay(t, params: OUParams):
    """``exp(-1/2 int_0^t g)``; quadrature when ``g`` is a function."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > params.T):
        raise DomainError(f"t must lie in [0, {params.T}]")
    out = np.exp(-0.5 * _integrated_g(t_arr, params))
    return float(out) if np.ndim(t) == 0 else out


def noise_var(t, params: OUParams):
    """``sigma^2(t) = 1 - mean_decay(t)^2``, evaluated without cancellation."""
    t_arr = np.asarray(t, dtype=np.float64)
    out = -np.expm1(-_integrated_g(t_arr, params))
    return float(out) if np.ndim(t) == 0 else out


def forward_sample(x0, t, params: OUParams, rng: np.random.Generator):
    """Draw ``x(t)`` given ``x(0)``; ``x0`` may be (d,) or (N, d) with ``t`` scalar or (N,)."""
    x0 = np.asarray(x0, dtype=np.float64)
    mb = np.asarray(mean_decay(t, params))
    sd = np.sqrt(noise_var(t, params))
    if x0.ndim == 2 and mb.ndim == 1:
        mb, sd = mb[:, None], sd[:, None]
    return mb * x0 + sd * rng.standard_normal(x0.shape)


@dataclass(frozen=True)
class GaussianOracle:
    """``p0 = N(0, s2 I)``; every marginal stays Gaussian so the score is closed form."""

    s2: float = 1.0

    def __post_init__(self):
        if not self.s2 > 0:
            raise DomainError("s2 must be positive")

    def sampler(self, d):
        def draw(rng, count):
            return math.sqrt(self.s2) * rng.standard_normal((count, d))
        return draw

    def marginal_var(self, t, params):
        mb = mean_decay(t, params)
        return np.asarray(mb) ** 2 * self.s2 + noise_var(t, params)

    def posterior_mean(self, t, x, params):
        """``E[x(0) | x(t) = x]``."""
        t = np.asarray(t, dtype=np.float64)
        mb = np.asarray(mean_decay(t, params))
        coef = mb * self.s2 / self.marginal_var(t, params)
        return _col(coef, x) * np.asarray(x)


def _col(v, x):
    v = np.asarray(v)
    return v[:, None] if v.ndim == 1 and np.ndim(x) == 2 else v


def gaussian_oracle_score(t, x, params: OUParams, oracle: GaussianOracle):
    """``grad log p_t(x) = -x / (mean_decay^2 s2 + sigma^2)``."""
    return -np.asarray(x, dtype=np.float64) / _col(oracle.marginal_var(t, params), x)


@dataclass(frozen=True)
class Scaler:
    """Maps raw ``(t, x)`` to network inputs of norm <= 1 and back."""

    T: float
    rho: float

    def inputs(self, t, x):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.column_stack([t / self.T, x / self.rho]).T / math.sqrt(2.0)

    def labels(self, y):
        return np.atleast_2d(np.asarray(y, dtype=np.float64)).T / self.rho


@dataclass(frozen=True)
class ScoreDataset:
    t: np.ndarray  # (n,)
    xt: np.ndarray  # (n, d)
    x0: np.ndarray  # (n, d)
    scaler: Scaler

    @property
    def n(self):
        return self.t.shape[0]

    @property
    def d(self):
        return self.xt.shape[1]

    def training_data(self) -> Dataset:
        """Scaled pairs as a :class:`Dataset` (inputs (d+1) x n, labels d x n)."""
        return Dataset(self.scaler.inputs(self.t, self.xt), self.scaler.labels(self.x0))


def build_dataset(p0_sampler, n, params: OUParams, seed, d=None) -> ScoreDataset:
    """``x(0) ~ p0``, ``t ~ Unif(T0, T)``, ``x(t) ~ p_{t|0}``, then normalize.

    Space is divided by ``rho = max(1, max ||x(t)_i||, max ||x(0)_i||)``
    and time by ``T``; the concatenated input is divided by ``sqrt(2)``.
    """
    if n < 1:
        raise DomainError("need n >= 1")
    rng = derive_rng(seed, "dataset")
    x0 = np.asarray(p0_sampler(rng, n), dtype=np.float64)
    if d is not None and x0.shape != (n, d):
        raise DomainError(f"sampler returned {x0.shape}, expected ({n}, {d})")
    t = rng.uniform(params.T0, params.T, size=n)
    xt = forward_sample(x0, t, params, rng)
    rho = max(1.0, float(np.max(np.linalg.norm(xt, axis=1))), float(np.max(np.linalg.norm(x0, axis=1))))
    return ScoreDataset(t=t, xt=xt, x0=x0, scaler=Scaler(T=params.T, rho=rho))


def denoiser(net: NetworkState, scaler: Scaler, t, x):
    """Network estimate of ``E[x(0) | x(t)]`` in raw units, shape (N, d)."""
    return scaler.rho * predict_inputs(net, scaler.inputs(t, x)).T


def denoiser_to_score(D, t, x, params: OUParams):
    """Gaussian-transition conversion of a raw denoiser output to a score."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < params.T0):
        raise DomainError(f"score conversion is only defined for t >= T0 = {params.T0}")
    mb = _col(mean_decay(t_arr, params), x)
    var = _col(noise_var(t_arr, params), x)
    return (mb * np.asarray(D) - np.asarray(x)) / var


def network_score(net, scaler, params):
    """Score function ``(t, x) -> s(t, x)`` backed by a trained denoiser."""
    def score(t, x):
        return denoiser_to_score(denoiser(net, scaler, t, x), t, x, params)
    return score


def train_score_net(dataset: ScoreDataset, m, eta_scale, steps, seed, sigma, callback=None):
    """Fit the softmax network to ``x(0)`` labels with full-batch GD.

    ``eta = eta_scale / (m lambda_max(H*))``.  Returns ``(net, trace, eta)``.
    """
    from .training import practical_eta, symmetric_init, train

    data = dataset.training_data()
    net0 = symmetric_init(m, data.d1, data.d2, sigma, seed)
    eta = practical_eta(net0, data, eta_scale)
    net, trace = train(data, m, eta, steps, seed, sigma, net=net0, callback=callback)
    return net, trace, eta


@dataclass(frozen=True)
class ScoreError:
    value: float
    stderr: float
    samples: int

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr, "samples": self.samples}


def _error_stream(score_fn, reference, oracle, params, weighting, count, seed, k, d):
    rng = derive_rng(seed, "score_error", k)
    t = rng.uniform(params.T0, params.T, size=count)
    x0 = oracle.sampler(d)(rng, count)
    xt = forward_sample(x0, t, params, rng)
    diff = score_fn(t, xt) - reference(t, xt)
    return weighting(t) * np.sum(diff ** 2, axis=1)


def score_error(score_fn, oracle: GaussianOracle, params: OUParams, d, mc_samples, seed,
                weighting=None, streams=4, workers=1, reference=None) -> ScoreError:
    """Monte Carlo estimate of ``1/(T-T0) int_{T0}^T lambda(t) E||s - grad log p_t||^2 dt``.

    ``reference`` replaces the true score when given (used to compare two
    estimators along the same forward samples).  Samples are split across
    ``streams`` independent derived seeds and concatenated in stream order,
    so the result does not depend on ``workers``.
    """
    if reference is None:
        def reference(t, x):
            return gaussian_oracle_score(t, x, params, oracle)
    if mc_samples < 1:
        raise DomainError("mc_samples must be >= 1")
    if weighting is None:
        weighting = lambda t: np.ones_like(t)  # noqa: E731
    streams = max(1, min(streams, mc_samples))
    sizes = [mc_samples // streams + (k < mc_samples % streams) for k in range(streams)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(
            lambda k: _error_stream(score_fn, reference, oracle, params, weighting, sizes[k], seed, k, d),
            range(streams)))
    vals = np.concatenate(parts)
    stderr = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.inf
    return ScoreError(float(np.mean(vals)), stderr, int(vals.size))


def backward_sample(score_fn, params: OUParams, steps, rng: np.random.Generator, d,
                    n_samples=None, noise_scale=1.0, y0=None):
    """Euler-Maruyama on the reverse SDE from ``N(0, I)`` over ``[0, T - T0]``.

    Returns (d,) when ``n_samples`` is None, else (n_samples, d).
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    shape = (1 if n_samples is None else n_samples, d)
    y = rng.standard_normal(shape) if y0 is None else np.array(y0, dtype=np.float64).reshape(shape)
    h = (params.T - params.T0) / steps
    for k in range(steps):
        tau = params.T - k * h  # forward-time index T - t
        g = float(params.g_at(tau))
        tt = np.full(shape[0], tau)
        drift = 0.5 * g * y + g * score_fn(tt, y)
        y = y + h * drift
        if noise_scale:
            y = y + noise_scale * math.sqrt(g * h) * rng.standard_normal(shape)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("backward sampler diverged", step=k)
    return y[0] if n_samples is None else y


def train_score_pair(dataset: ScoreDataset, m, eta_scale, steps, seed, sigma):
    """Train the denoiser and its frozen-kernel twin in lockstep.

    Returns ``(net, trace, eta, ntk_denoiser)`` where ``ntk_denoiser(t, x)``
    evaluates ``rho * m K*(t, x) gamma(steps)`` in raw units.
    """
    from .kernel import gram, test_kernel_batch
    from .ntk_regression import GammaState, gamma_step, ntk_predict
    from .training import practical_eta, symmetric_init, train

    data = dataset.training_data()
    net0 = symmetric_init(m, data.d1, data.d2, sigma, seed)
    H_star = gram(net0, data)
    eta = practical_eta(net0, data, eta_scale)
    state = GammaState.zeros(data.n * data.d2)

    def advance(t, net):
        nonlocal state
        if t < steps:
            state = gamma_step(state, H_star, data.Y, eta, m)

    net, trace = train(data, m, eta, steps, seed, sigma, net=net0, callback=advance)
    gamma = state

    def ntk_denoiser(t, x):
        K = test_kernel_batch(net0, data, dataset.scaler.inputs(t, x))
        return dataset.scaler.rho * ntk_predict(gamma, K, m)

    return net, trace, eta, ntk_denoiser


def coupling_error(score_a, score_b, oracle: GaussianOracle, params: OUParams, d, mc_samples,
                   seed, workers=1) -> ScoreError:
    """Monte Carlo ``1/(T-T0) int E||s_a - s_b||^2 dt`` along the forward process."""
    return score_error(score_a, oracle, params, d, mc_samples, seed, workers=workers,
                       reference=score_b)


def dataset_table(dataset: ScoreDataset):
    """``(preamble, header, rows)`` for CSV export; the preamble records the scaler."""
    d = dataset.d
    header = ["t", *(f"x{k}" for k in range(d)), *(f"y{k}" for k in range(d))]
    rows = [(float(t), *map(float, xt), *map(float, x0))
            for t, xt, x0 in zip(dataset.t, dataset.xt, dataset.x0)]
    preamble = [f"scaler T={dataset.scaler.T!r} rho={dataset.scaler.rho!r}"]
    return preamble, header, rows


def dataset_from_table(preamble, header, rows) -> ScoreDataset:
    fields = dict(tok.split("=", 1) for tok in preamble[0].split()[1:])
    d = (len(header) - 1) // 2
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 1 + 2 * d)
    return ScoreDataset(t=arr[:, 0], xt=arr[:, 1:1 + d], x0=arr[:, 1 + d:],
                        scaler=Scaler(T=float(fields["T"]), rho=float(fields["rho"])))
