"""Two-layer softmax network: forward pass, loss, and exact gradients.

Conventions follow the column layout used throughout the package:
inputs ``X`` are ``d1 x n``, labels ``Y`` are ``d2 x n``, hidden weights
``W`` are ``d1 x m`` (column ``r`` is neuron ``w_r``) and output signs
``a`` are ``d2 x m`` (row ``l`` is ``a_l``).  The network is

    F(W, x)_l = m * <a_l, softmax(W^T x)>

and only ``W`` is trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

NORM_SLACK = 1e-12


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class Dataset:
    """Training pairs stored column-wise; every column has norm at most 1."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, ndmin=2)
        Y = np.array(self.Y, dtype=np.float64, ndmin=2)
        if X.ndim != 2 or Y.ndim != 2:
            raise ShapeError("X and Y must be 2-d (features x samples)")
        if X.shape[1] != Y.shape[1]:
            raise ShapeError(f"X has {X.shape[1]} samples but Y has {Y.shape[1]}")
        if X.shape[1] < 1 or X.shape[0] < 1 or Y.shape[0] < 1:
            raise ShapeError("need n >= 1, d1 >= 1, d2 >= 1")
        _check_finite("X", X)
        _check_finite("Y", Y)
        if np.max(np.linalg.norm(X, axis=0)) > 1 + NORM_SLACK:
            raise DomainError("every input column must satisfy ||x_i||_2 <= 1")
        if np.max(np.linalg.norm(Y, axis=0)) > 1 + NORM_SLACK:
            raise DomainError("every label column must satisfy ||y_i||_2 <= 1")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d1(self) -> int:
        return self.X.shape[0]

    @property
    def d2(self) -> int:
        return self.Y.shape[0]


@dataclass(frozen=True)
class NetworkState:
    """Hidden weights ``W`` (d1 x m) and fixed +-1 output signs ``a`` (d2 x m)."""

    W: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64, ndmin=2)
        a = np.array(self.a, dtype=np.float64, ndmin=2)
        if W.ndim != 2 or a.ndim != 2 or W.shape[1] != a.shape[1]:
            raise ShapeError(f"W {W.shape} and a {a.shape} must share the neuron axis")
        if not np.all(np.abs(a) == 1.0):
            raise DomainError("every entry of a must be exactly +1 or -1")
        _check_finite("W", W)
        W.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "a", a)

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def d1(self) -> int:
        return self.W.shape[0]

    @property
    def d2(self) -> int:
        return self.a.shape[0]

    def with_weights(self, W) -> "NetworkState":
        return NetworkState(W, self.a)


@dataclass(frozen=True)
class SoftmaxState:
    """Softmax of the hidden pre-activations for one or many inputs.

    For a single input the fields are ``exps`` (m,), ``alpha`` scalar and
    ``S`` (m,).  The batched form used internally stacks samples on the
    leading axis: ``exps``/``S`` are (n, m) and ``alpha`` is (n,).
    """

    exps: np.ndarray
    alpha: np.ndarray
    S: np.ndarray


def _softmax_rows(logits):
    shift = np.max(logits, axis=-1, keepdims=True)
    shifted = np.exp(logits - shift)
    total = np.sum(shifted, axis=-1, keepdims=True)
    S = shifted / total
    # alpha and exps in unshifted units; may overflow only for |logit| > ~709
    with np.errstate(over="ignore", invalid="ignore"):
        scale = np.exp(shift)
        exps = shifted * scale
        alpha = (total * scale)[..., 0]
    return exps, alpha, S


def softmax_state(W, x) -> SoftmaxState:
    """Softmax state of ``W^T x`` for one input vector ``x`` (length d1)."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[0] != x.shape[0]:
        raise ShapeError(f"W {W.shape} incompatible with x {x.shape}")
    _check_finite("W", W)
    _check_finite("x", x)
    exps, alpha, S = _softmax_rows(W.T @ x)
    return SoftmaxState(exps=exps, alpha=float(alpha), S=S)


def softmax_batch(W, X) -> SoftmaxState:
    """Softmax states for every column of ``X``; arrays are (n, m)."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or W.shape[0] != X.shape[0]:
        raise ShapeError(f"W {W.shape} incompatible with X {X.shape}")
    _check_finite("X", X)
    exps, alpha, S = _softmax_rows(X.T @ W)
    return SoftmaxState(exps=exps, alpha=alpha, S=S)


def forward(net: NetworkState, x) -> np.ndarray:
    """Network output (length d2) for a single input."""
    state = softmax_state(net.W, x)
    return net.m * (net.a @ state.S)


def predict_all(net: NetworkState, data: Dataset) -> np.ndarray:
    """Prediction matrix ``F`` (d2 x n); column i is ``forward(net, x_i)``."""
    if net.d1 != data.d1 or net.d2 != data.d2:
        raise ShapeError(
            f"network maps R^{net.d1} -> R^{net.d2}, data is R^{data.d1} -> R^{data.d2}"
        )
    return predict_inputs(net, data.X)


def predict_inputs(net: NetworkState, X) -> np.ndarray:
    S = softmax_batch(net.W, X).S
    return net.m * (net.a @ S.T)


def loss(F, Y) -> float:
    """Half the squared Frobenius distance between predictions and labels."""
    F = np.asarray(F, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if F.shape != Y.shape:
        raise ShapeError(f"F {F.shape} and Y {Y.shape} differ")
    return 0.5 * float(np.sum((F - Y) ** 2))


def analytic_gradient(net: NetworkState, data: Dataset, form: str = "claim") -> np.ndarray:
    """Exact gradient of the loss with respect to ``W`` (d1 x m).

    ``form="claim"`` evaluates the simplified per-neuron expression
    ``m sum_i sum_l r_li <a_lr 1 - a_l, S_i> S_ir x_i``.  ``form="definition"``
    evaluates the unsimplified one, ``<a_l o e_r, S_i> - <a_l, S_i><S_i, e_r o 1>``,
    which differs only by the identity ``<1, S_i> = 1``.
    """
    F = predict_all(net, data)
    S = softmax_batch(net.W, data.X).S
    return _gradient_from(net, data, F, S, form)


def _gradient_from(net, data, F, S, form="claim"):
    resid = F - data.Y  # (d2, n)
    a = net.a
    aS = a @ S.T  # <a_l, S_i>, (d2, n)
    if form == "claim":
        mass = S.sum(axis=1)  # <1_m, S_i>, equal to 1 up to rounding
        inner = a[:, None, :] * mass[None, :, None] - aS[:, :, None]  # (d2, n, m)
        coef = np.einsum("li,lir,ir->ir", resid, inner, S)
    elif form == "definition":
        eye = np.eye(net.m)
        picked = np.einsum("lk,kr,ik->lir", a, eye, S)  # <a_l o e_r, S_i>
        s_r = np.einsum("ik,kr->ir", S, eye)  # <S_i, e_r o 1_m>
        coef = np.einsum("li,lir->ir", resid, picked - aS[:, :, None] * s_r[None, :, :])
    else:
        raise DomainError(f"unknown gradient form {form!r}")
    return net.m * (data.X @ coef)


def fd_gradient(net: NetworkState, data: Dataset, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of :func:`loss`, one coordinate at a time.

    The step for coordinate ``w`` is ``h * max(1, |w|)``.
    """
    if not h > 0:
        raise DomainError("finite-difference step must be positive")
    W = np.array(net.W)
    grad = np.empty_like(W)

    def objective(Wp):
        return loss(predict_inputs(NetworkState(Wp, net.a), data.X), data.Y)

    for idx in np.ndindex(W.shape):
        step = h * max(1.0, abs(W[idx]))
        orig = W[idx]
        W[idx] = orig + step
        up = objective(W)
        W[idx] = orig - step
        down = objective(W)
        W[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def sample_unit_ball(rng: np.random.Generator, dim: int, count: int, radius: float = 1.0):
    """``count`` points uniform in the ``dim``-ball, returned as columns."""
    z = rng.standard_normal((dim, count))
    z /= np.linalg.norm(z, axis=0, keepdims=True)
    r = radius * rng.uniform(size=count) ** (1.0 / dim)
    return z * r


def random_dataset(rng: np.random.Generator, n: int, d1: int, d2: int | None = None) -> Dataset:
    """Inputs and labels drawn uniformly from the unit ball."""
    d2 = d1 if d2 is None else d2
    return Dataset(sample_unit_ball(rng, d1, n), sample_unit_ball(rng, d2, n))


def circle_inputs(rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` evenly spaced points on the unit circle with a random phase, as columns.

    Well-separated inputs keep the Gram matrix far better conditioned than
    uniform draws from the disk.
    """
    theta = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(count) / count
    return np.vstack([np.cos(theta), np.sin(theta)])


def make_dataset(rng: np.random.Generator, n: int, d: int, inputs: str = "ball") -> Dataset:
    """Inputs from the unit ball or the unit circle (``d = 2``); labels from the unit ball."""
    if inputs == "ball":
        X = sample_unit_ball(rng, d, n)
    elif inputs == "circle":
        if d != 2:
            raise DomainError("circle inputs need d = 2")
        X = circle_inputs(rng, n)
    else:
        raise DomainError(f"unknown input layout {inputs!r}")
    return Dataset(X, sample_unit_ball(rng, d, n))
