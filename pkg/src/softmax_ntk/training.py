"""Symmetric initialization, full-batch gradient descent, theorem-prescribed
hyperparameters, induction monitors, and the one-step loss decomposition."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, NonFiniteError, ShapeError, SingularKernelError
from .kernel import gram, max_eigenvalue, min_eigenvalue
from .model import Dataset, NetworkState, _gradient_from, softmax_batch
from .seeding import derive_rng


def symmetric_init(m: int, d1: int, d2: int, sigma: float, seed) -> NetworkState:
    """Paired neurons: ``w_{2r} = w_{2r-1} ~ N(0, sigma^2 I)``, ``a_{2r} = -a_{2r-1}``.

    The pair structure makes the initial output identically zero.
    """
    if m <= 0 or m % 2:
        raise DomainError(f"symmetric initialization needs an even m, got {m}")
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    rng = derive_rng(seed, "init")
    half = m // 2
    W_half = sigma * rng.standard_normal((d1, half))
    a_half = rng.choice([-1.0, 1.0], size=(d2, half))
    W = np.repeat(W_half, 2, axis=1)
    a = np.empty((d2, m))
    a[:, 0::2] = a_half
    a[:, 1::2] = -a_half
    return NetworkState(W, a)


def compute_B(sigma, n, d, delta, C=10.0) -> float:
    """``max(C * sigma * sqrt(log(n d / delta)), 1)``."""
    if min(sigma, n, d, delta, C) <= 0 or delta >= 1:
        raise DomainError("compute_B needs positive sigma, n, d, C and delta in (0, 1)")
    ratio = n * d / delta
    if ratio <= 1:
        raise DomainError("log(n d / delta) must be positive")
    return max(C * sigma * math.sqrt(math.log(ratio)), 1.0)


def clamp_sigma(n, d, delta, C=10.0) -> float:
    """Largest sigma for which ``compute_B`` still returns 1."""
    return 1.0 / (C * math.sqrt(math.log(n * d / delta)))


def compute_R(lam, B, n, d) -> float:
    """Perturbation radius ``lambda / (2 n d exp(10 B))``."""
    return lam / (2 * n * d * math.exp(10 * B))


def compute_D(m, lam, B, n, d, init_loss_frob) -> float:
    """Weight-drift bound ``4 exp(3B) sqrt(nd) ||F(0) - Y||_F / (m lambda)``."""
    if m <= 0 or lam <= 0:
        raise DomainError("compute_D needs positive m and lambda")
    return 4.0 / m / lam * math.exp(3 * B) * math.sqrt(n * d) * init_loss_frob


@dataclass(frozen=True)
class TheoryParams:
    sigma: float
    delta: float
    C: float
    B: float
    lam: float
    m: int
    eta: float
    T_hat: float
    R: float
    D: float
    eps: float
    m_required: float
    c_m: float = 1.0
    c_T: float = 1.0

    @property
    def theory_valid(self) -> bool:
        """True when ``D < R`` and the network is as wide as the theorem asks."""
        return self.D < self.R and self.m >= self.m_required

    def to_dict(self):
        return asdict(self)


def required_width(n, d, lam, B, delta, c_m=1.0, preset="main") -> float:
    """Width from the main theorem (``n^2 d^2``) or the diffusion theorem (``n^3 d^3``)."""
    power = {"main": 2, "diffusion": 3}[preset]
    return c_m * lam ** -2 * (n * d) ** power * math.exp(18 * B) * math.log(n * d / delta) ** 2


def theory_hyperparams(n, d, lam, B, eps, delta, *, m=None, sigma=None, C=10.0,
                       c_m=1.0, c_T=1.0, init_loss_frob=None, preset="main") -> TheoryParams:
    """Populate every theorem parameter for a given smallest eigenvalue ``lam``.

    ``m`` defaults to the theorem's width.  Passing a smaller, feasible
    ``m`` keeps all other formulas (notably ``eta``) evaluated at that
    width; ``m_required`` still records the theorem's value.
    """
    if not lam > 0:
        raise DomainError("lambda must be positive")
    m_req = required_width(n, d, lam, B, delta, c_m, preset)
    if m is None:
        m = int(2 * math.ceil(m_req / 2))
    eta = 0.1 * lam / (m * n ** 2 * d ** 2 * math.exp(16 * B))
    T_hat = c_T / (m * eta * lam) * math.log(n * d / eps)
    R = compute_R(lam, B, n, d)
    D = compute_D(m, lam, B, n, d, init_loss_frob) if init_loss_frob is not None else math.nan
    return TheoryParams(
        sigma=math.nan if sigma is None else sigma, delta=delta, C=C, B=B, lam=lam,
        m=m, eta=eta, T_hat=T_hat, R=R, D=D, eps=eps, m_required=m_req, c_m=c_m, c_T=c_T,
    )


def gd_step(net: NetworkState, eta, grad) -> NetworkState:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.W.shape:
        raise ShapeError(f"gradient {grad.shape} does not match W {net.W.shape}")
    return net.with_weights(net.W - eta * grad)


@dataclass(frozen=True)
class DecompositionRecord:
    C0: float
    C1: float
    C2: float
    C3: float
    v2_norm: float
    q1_inner: float
    q1_quadform: float
    delta_loss: float
    gradient_guard: bool

    @property
    def total(self):
        return self.C0 + self.C1 + self.C2 + self.C3


def _step_change(net, data, eta, grad, S0):
    """Exact ``F(t+1) - F(t)`` and its pieces without catastrophic cancellation.

    With logit increments ``delta_ir = -eta <dw_r, x_i>`` and
    ``z_i = sum_r S_ir expm1(delta_ir)`` the new softmax is
    ``S1 = S0 (1 + expm1(delta)) / (1 + z)``, so ``S1 - S0`` and
    ``1/alpha(t+1) - 1/alpha(t)`` are formed from small quantities directly.
    """
    delta = -eta * (data.X.T @ grad)  # (n, m)
    if np.max(np.abs(delta)) <= 1.0:
        em = np.expm1(delta)
        z = np.sum(S0 * em, axis=1)  # (n,)
        dS = S0 * (em - z[:, None]) / (1 + z)[:, None]
    else:
        # large steps: no cancellation to avoid, but expm1(delta) may overflow
        with np.errstate(over="ignore"):
            z = np.expm1(logsumexp(delta, b=S0, axis=1))
        dS = softmax_batch(net.W - eta * grad, data.X).S - S0
    dF = net.m * (net.a @ dS.T)
    return delta, z, dS, dF


def _decompose(net, data, eta, grad, S0, F0, delta, z, dS, dF, H_tau=None):
    m = net.m
    a = net.a
    resid = F0 - data.Y
    S1 = S0 + dS
    # v0 = m sum_r a_lr (1/alpha(t+1) - 1/alpha(t)) exp(<w_r(t+1), x_i>) = -m z_i <a_l, S1_i>
    v0 = -m * z[None, :] * (a @ S1.T)
    # v1 = m sum_r a_lr exp(<w_r(t), x_i>) / alpha(t) * delta_ir
    v1 = m * (a @ (S0 * delta).T)
    v2 = dF - v0 - v1
    C0 = 2 * float(np.sum(resid * v0))
    C1 = 2 * float(np.sum(resid * v1))
    C2 = 2 * float(np.sum(resid * v2))
    C3 = float(np.sum(dF ** 2))
    # kernel part of v1: a_lr replaced by <v_lr, S_i> = a_lr - <a_l, S_i>
    aS = a @ S0.T
    v_dot = a[:, None, :] - aS[:, :, None]
    q1_part = m * np.einsum("lir,ir,ir->li", v_dot, S0, delta)
    q1_inner = 2 * float(np.sum(resid * q1_part))
    if H_tau is None:
        H_tau = gram(net, data).H
    e = resid.reshape(-1)
    q1_quadform = -2 * m * eta * float(e @ H_tau @ e)
    delta_loss = float(np.sum(dF * (dF + 2 * resid)))
    guard = bool(eta * np.max(np.linalg.norm(grad, axis=0)) <= 0.01)
    return DecompositionRecord(C0, C1, C2, C3, float(np.linalg.norm(v2)), q1_inner,
                               q1_quadform, delta_loss, guard)


def loss_decomposition(net_tau: NetworkState, data: Dataset, eta) -> DecompositionRecord:
    """Split ``||F(t+1)-Y||^2 - ||F(t)-Y||^2`` into C0 + C1 + C2 + C3 for one GD step.

    ``v2`` is the exact residual ``dF - v0 - v1``, so the four terms sum to
    the loss change up to rounding.
    """
    S0 = softmax_batch(net_tau.W, data.X).S
    F0 = net_tau.m * (net_tau.a @ S0.T)
    grad = _gradient_from(net_tau, data, F0, S0)
    return _decompose(net_tau, data, eta, grad, S0, F0, *_step_change(net_tau, data, eta, grad, S0))


TRACE_COLUMNS = ("step", "loss", "max_drift", "max_grad", "ratio",
                 "C0", "C1", "C2", "C3", "v2_norm")


@dataclass
class TrainTrace:
    """Per-step record; ``loss`` is the squared Frobenius residual ``||F - Y||_F^2``.

    Row ``t`` holds the state at step ``t`` and, except on the last row,
    the decomposition and loss ratio of the step ``t -> t+1``.
    """

    eta: float
    loss: list = field(default_factory=list)
    max_drift: list = field(default_factory=list)
    max_grad: list = field(default_factory=list)
    rel_change: list = field(default_factory=list)  # (loss(t+1) - loss(t)) / loss(t)
    decomposition: list = field(default_factory=list)
    aborted_at: int | None = None

    @property
    def steps(self):
        return len(self.loss) - 1

    @property
    def ratio(self):
        return [1.0 + r for r in self.rel_change]

    def rows(self):
        for t in range(len(self.loss)):
            rec = self.decomposition[t] if t < len(self.decomposition) else None
            ratio = 1.0 + self.rel_change[t] if t < len(self.rel_change) else None
            yield (t, self.loss[t], self.max_drift[t], self.max_grad[t], ratio,
                   *((rec.C0, rec.C1, rec.C2, rec.C3, rec.v2_norm) if rec else (None,) * 5))

    def summary(self):
        return {
            "steps": self.steps,
            "eta": self.eta,
            "initial_loss": self.loss[0],
            "final_loss": self.loss[-1],
            "max_drift": max(self.max_drift),
            "max_grad": max(self.max_grad),
            "max_ratio": max(self.ratio) if self.rel_change else None,
            "monotone": all(r <= 0.0 for r in self.rel_change),
            "aborted_at": self.aborted_at,
        }


def train(data: Dataset, m: int, eta: float, max_steps: int, seed, sigma: float,
          record_decomposition: bool = False, net: NetworkState | None = None,
          callback=None) -> tuple[NetworkState, TrainTrace]:
    """Symmetric init followed by ``max_steps`` full-batch GD steps.

    ``net`` overrides the initialization (used by the two-pass theory
    protocol and by lockstep coupling).  ``callback(t, net)`` is invoked
    on every state, including step 0.  On a non-finite loss the partial
    trace is attached to the raised :class:`NonFiniteError` as ``.trace``.
    """
    if net is None:
        net = symmetric_init(m, data.d1, data.d2, sigma, seed)
    W0 = net.W
    trace = TrainTrace(eta=eta)
    S = softmax_batch(net.W, data.X).S
    F = net.m * (net.a @ S.T)
    for t in range(max_steps + 1):
        resid = F - data.Y
        cur_loss = float(np.sum(resid ** 2))
        if not math.isfinite(cur_loss):
            trace.aborted_at = t
            err = NonFiniteError("non-finite loss", step=t)
            err.trace = trace
            raise err
        grad = _gradient_from(net, data, F, S)
        trace.loss.append(cur_loss)
        trace.max_drift.append(float(np.max(np.linalg.norm(net.W - W0, axis=0))))
        trace.max_grad.append(float(np.max(np.linalg.norm(grad, axis=0))))
        if callback is not None:
            callback(t, net)
        if t == max_steps:
            break
        change = _step_change(net, data, eta, grad, S)
        dF = change[3]
        delta_loss = float(np.sum(dF * (dF + 2 * resid)))
        if not math.isfinite(delta_loss):
            trace.aborted_at = t + 1
            err = NonFiniteError("non-finite loss change", step=t)
            err.trace = trace
            raise err
        trace.rel_change.append(delta_loss / cur_loss if cur_loss > 0 else 0.0)
        if record_decomposition:
            trace.decomposition.append(_decompose(net, data, eta, grad, S, F, *change))
        try:
            net = gd_step(net, eta, grad)
        except NonFiniteError as err:
            trace.aborted_at = t + 1
            err.trace = trace
            raise
        S = softmax_batch(net.W, data.X).S
        F = net.m * (net.a @ S.T)
    return net, trace


def theory_setup(data: Dataset, m: int, seed, *, delta=0.1, eps=0.01, C=10.0, sigma=None,
                 c_m=1.0, c_T=1.0, preset="main"):
    """Two-pass protocol: initialize at width ``m``, measure ``lambda`` on
    ``H*``, then derive every theorem parameter at that width.

    Re-initializing with the same seed reproduces the same ``W(0)``, so the
    measured ``lambda`` is exactly the one of the trained network.
    """
    n, d = data.n, max(data.d1, data.d2)
    if sigma is None:
        sigma = clamp_sigma(n, d, delta, C)
    B = compute_B(sigma, n, d, delta, C)
    net0 = symmetric_init(m, data.d1, data.d2, sigma, seed)
    lam = min_eigenvalue(gram(net0, data))
    if not lam > 0:
        raise SingularKernelError(f"lambda_min(H*) = {lam:.3e} is not positive")
    params = theory_hyperparams(n, d, lam, B, eps, delta, m=m, sigma=sigma, C=C, c_m=c_m,
                                c_T=c_T, init_loss_frob=float(np.linalg.norm(data.Y)),
                                preset=preset)
    return params, net0


def practical_eta(net: NetworkState, data: Dataset, scale: float = 1.0) -> float:
    """``scale / (m * lambda_max(H*))``; GD on the linearized model is stable for scale < 2."""
    return scale / (net.m * max_eigenvalue(gram(net, data)))


MONITOR_CHECKS = ("drift", "loss_envelope", "step_size", "gradient_bound", "contraction")


def monitor_induction(trace: TrainTrace, params: TheoryParams, n: int, d: int) -> dict:
    """Per-step induction checks against the theorem's parameters.

    drift:          max_r ||w_r(t) - w_r(0)|| <= D
    loss_envelope:  loss(t) <= loss(0) (1 - m eta lambda / 2)^t
    step_size:      eta max_r ||dw_r(t)|| <= 0.01
    gradient_bound: max_r ||dw_r(t)|| <= exp(3B) sqrt(nd) ||F(t) - Y||_F
    contraction:    loss(t+1) / loss(t) <= 1 - m eta lambda / 4

    ``D < R`` and the theorem's width requirement are reported under
    ``preconditions``; they do not count as per-step violations.  When the
    trace carries decompositions, the worst ratios ``|C0| / (0.1 m eta lambda L)``
    and ``C2 / (2 m eta^2 n^2 d^2 exp(9B) L)`` (``L`` the current loss) are
    reported under ``lemma_ratios`` for reference only.
    """
    mel = params.m * params.eta * params.lam
    log_half = math.log1p(-mel / 2)
    bad = {k: [] for k in MONITOR_CHECKS}
    loss0 = trace.loss[0]
    for t, cur in enumerate(trace.loss):
        if trace.max_drift[t] > params.D:
            bad["drift"].append(t)
        if cur > loss0 * math.exp(t * log_half):
            bad["loss_envelope"].append(t)
        if trace.eta * trace.max_grad[t] > 0.01:
            bad["step_size"].append(t)
        if trace.max_grad[t] > math.exp(3 * params.B) * math.sqrt(n * d) * math.sqrt(cur):
            bad["gradient_bound"].append(t)
    for t, r in enumerate(trace.rel_change):
        if r > -mel / 4:
            bad["contraction"].append(t)
    c0_scale = 0.1 * mel
    c2_scale = 2 * params.m * trace.eta ** 2 * (n * d) ** 2 * math.exp(9 * params.B)
    lemma = {"C0": None, "C2": None}
    steps = [(t, r) for t, r in enumerate(trace.decomposition) if trace.loss[t] > 0]
    if steps and c0_scale > 0:
        lemma["C0"] = max(abs(r.C0) / (c0_scale * trace.loss[t]) for t, r in steps)
        lemma["C2"] = max(r.C2 / (c2_scale * trace.loss[t]) for t, r in steps)
    return {
        "m_eta_lambda": mel,
        "lemma_ratios": lemma,
        "D": params.D,
        "R": params.R,
        "preconditions": {
            "d_below_r": params.D < params.R,
            "width_sufficient": params.m >= params.m_required,
        },
        "violations": bad,
        "violation_count": sum(len(v) for v in bad.values()),
        "clean": not any(bad.values()),
    }
