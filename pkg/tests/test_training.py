import math

import numpy as np
import pytest

from softmax_ntk.errors import DomainError, NonFiniteError, SingularKernelError
from softmax_ntk.kernel import gram, min_eigenvalue
from softmax_ntk.model import Dataset, make_dataset, predict_all
from softmax_ntk.seeding import derive_rng
from softmax_ntk.training import (TRACE_COLUMNS, clamp_sigma, compute_B, compute_D, compute_R,
                                  loss_decomposition, monitor_induction, practical_eta,
                                  required_width, symmetric_init, theory_hyperparams,
                                  theory_setup, train)

# reference values evaluated with 30-digit arithmetic from the closed-form expressions
B_REF = 1.04666453970146060502742176802
SIGMA_CLAMP_REF = 0.0477707977135266902676894754608
ETA_REF = 1.75836210498842376188644190214e-16
T_HAT_REF = 38016127103193774.0164041203034
R_REF = 2.83749561015530322097446972253e-9
D_REF = 454.483819589081061902973644641
M_MAIN_REF = 80692036097690297.4849124679038
M_DIFF_REF = 645536288781522379.879299743231
B_SIGMA_ONE_REF = 23.0180741300136503784324487435  # C=10, sigma=1, n=10, d=2, delta=0.1
M_LAMBDA_ONE_REF = 80692036097.6902974849124679038  # n=4, d=2, lambda=1, B=1, delta=0.1


def test_B_and_sigma_clamp():
    assert compute_B(0.05, 4, 2, 0.1) == pytest.approx(B_REF, rel=1e-13)
    assert clamp_sigma(4, 2, 0.1) == pytest.approx(SIGMA_CLAMP_REF, rel=1e-13)
    assert compute_B(clamp_sigma(4, 2, 0.1), 4, 2, 0.1) == pytest.approx(1.0, rel=1e-13)
    assert compute_B(1e-6, 4, 2, 0.1) == 1.0


def test_B_unclamped_example():
    assert compute_B(1.0, 10, 2, 0.1) == pytest.approx(B_SIGMA_ONE_REF, rel=1e-13)


def test_width_at_unit_lambda():
    assert required_width(4, 2, 1.0, 1.0, 0.1) == pytest.approx(M_LAMBDA_ONE_REF, rel=1e-12)


@pytest.mark.parametrize("n,d,lam,B,m", [(4, 2, 1e-3, 1.0, 1000), (7, 3, 0.2, 2.5, 64)])
def test_eta_definitional_identity(n, d, lam, B, m):
    p = theory_hyperparams(n, d, lam, B, 0.01, 0.1, m=m)
    assert p.eta * m * n ** 2 * d ** 2 * math.exp(16 * B) / lam == pytest.approx(0.1, rel=1e-14)


def test_B_domain():
    with pytest.raises(DomainError):
        compute_B(0.1, 4, 2, 1.5)


def test_theory_hyperparams_reference_values():
    p = theory_hyperparams(4, 2, 1e-3, 1.0, 0.01, 0.1, m=1000, init_loss_frob=2.0)
    assert p.eta == pytest.approx(ETA_REF, rel=1e-12)
    assert p.T_hat == pytest.approx(T_HAT_REF, rel=1e-12)
    assert p.R == pytest.approx(R_REF, rel=1e-12)
    assert p.D == pytest.approx(D_REF, rel=1e-12)
    assert p.m_required == pytest.approx(M_MAIN_REF, rel=1e-12)
    assert not p.theory_valid
    assert required_width(4, 2, 1e-3, 1.0, 0.1, preset="diffusion") == pytest.approx(M_DIFF_REF,
                                                                                     rel=1e-12)
    assert compute_R(1e-3, 1.0, 4, 2) == p.R
    assert compute_D(1000, 1e-3, 1.0, 4, 2, 2.0) == p.D


def test_default_width_is_required_width_rounded_to_even():
    p = theory_hyperparams(2, 1, 0.5, 1.0, 0.01, 0.1)
    assert p.m % 2 == 0 and p.m >= p.m_required


def test_symmetric_init_structure():
    net = symmetric_init(10, 3, 2, 0.5, seed=4)
    np.testing.assert_array_equal(net.W[:, 0::2], net.W[:, 1::2])
    np.testing.assert_array_equal(net.a[:, 0::2], -net.a[:, 1::2])
    again = symmetric_init(10, 3, 2, 0.5, seed=4)
    np.testing.assert_array_equal(net.W, again.W)
    with pytest.raises(DomainError):
        symmetric_init(9, 3, 2, 0.5, seed=4)


def practical_instance(seed=3, n=6, d=2, m=64):
    data = make_dataset(derive_rng(seed, "data"), n, d)
    net0 = symmetric_init(m, d, d, 1.0, seed)
    return data, net0


def test_zero_steps_gives_zero_prediction():
    data, net0 = practical_instance()
    net, trace = train(data, net0.m, 0.1, 0, seed=3, sigma=1.0, net=net0)
    assert trace.steps == 0
    assert trace.loss[0] == pytest.approx(float(np.sum(data.Y ** 2)), rel=1e-14)
    assert np.max(np.abs(predict_all(net, data))) <= 1e-12


def test_trace_rows_and_callback():
    data, net0 = practical_instance()
    seen = []
    _, trace = train(data, net0.m, practical_eta(net0, data), 5, 3, 1.0, record_decomposition=True,
                     net=net0, callback=lambda t, net: seen.append(t))
    rows = list(trace.rows())
    assert seen == list(range(6))
    assert len(rows) == 6 and all(len(r) == len(TRACE_COLUMNS) for r in rows)
    assert rows[-1][4:] == (None,) * 6
    assert trace.summary()["monotone"]


def test_loss_decomposition_identity_over_run():
    data, net0 = practical_instance()
    eta = practical_eta(net0, data)
    _, trace = train(data, net0.m, eta, 100, 3, 1.0, record_decomposition=True, net=net0)
    for t, rec in enumerate(trace.decomposition):
        assert abs(rec.total - rec.delta_loss) <= 1e-9 * trace.loss[t]
        assert abs(rec.q1_inner - rec.q1_quadform) <= 1e-8 * abs(rec.q1_quadform)


def test_direct_loss_change_agrees_with_decomposition():
    data, net0 = practical_instance()
    eta = practical_eta(net0, data)
    rec = loss_decomposition(net0, data, eta)
    _, trace = train(data, net0.m, eta, 1, 3, 1.0, net=net0)
    direct = trace.loss[1] - trace.loss[0]
    assert rec.delta_loss == pytest.approx(direct, rel=1e-9)


def test_second_order_term_quarters_when_eta_halves():
    data, net0 = practical_instance()
    eta = practical_eta(net0, data)
    net, _ = train(data, net0.m, eta, 50, 3, 1.0, net=net0)
    v_full = loss_decomposition(net, data, eta).v2_norm
    v_half = loss_decomposition(net, data, eta / 2).v2_norm
    assert 3.5 <= v_full / v_half <= 4.5


def test_second_order_term_cancels_at_symmetric_init():
    # paired neurons receive opposite logit increments, so the quadratic
    # part of the step change vanishes and v2 is third order in eta
    data, net0 = practical_instance()
    eta = practical_eta(net0, data)
    ratio = loss_decomposition(net0, data, eta).v2_norm / loss_decomposition(net0, data, eta / 2).v2_norm
    assert 7.0 <= ratio <= 9.0


def test_nonfinite_eta_aborts_with_trace():
    data, net0 = practical_instance()
    with pytest.raises(NonFiniteError) as info:
        train(data, net0.m, math.nan, 3, 3, 1.0, net=net0)
    assert info.value.trace.aborted_at == 1
    assert "step 0" in str(info.value)


def test_theory_mode_monitors_clean():
    data = make_dataset(derive_rng(0, "data"), 4, 2)
    params, net0 = theory_setup(data, 64, seed=1)
    assert params.B == pytest.approx(1.0)
    assert params.lam == pytest.approx(min_eigenvalue(gram(net0, data)))
    _, trace = train(data, 64, params.eta, 200, 1, params.sigma, net=net0)
    report = monitor_induction(trace, params, 4, 2)
    assert report["clean"] and report["violation_count"] == 0
    assert report["lemma_ratios"] == {"C0": None, "C2": None}
    # the theorem's standing assumption is out of reach at desk-scale width
    assert report["preconditions"]["d_below_r"] is False


def test_monitor_flags_drift_beyond_bound():
    data = make_dataset(derive_rng(0, "data"), 4, 2)
    params, net0 = theory_setup(data, 64, seed=1)
    _, trace = train(data, 64, 1.0, 5, 1, params.sigma, net=net0)
    report = monitor_induction(trace, params, 4, 2)
    assert report["violations"]["step_size"] or report["violations"]["drift"]


def test_singular_kernel_rejected_in_theory_setup():
    X = np.zeros((2, 3))
    X[0, 0] = 0.5
    data = Dataset(X, np.zeros((2, 3)))
    with pytest.raises(SingularKernelError):
        theory_setup(data, 8, seed=0)


def test_practical_circle_convergence():
    data = make_dataset(derive_rng(1, "data"), 8, 2, inputs="circle")
    net0 = symmetric_init(512, 2, 2, 1.0, 1)
    _, trace = train(data, 512, practical_eta(net0, data), 1500, 1, 1.0, net=net0)
    assert trace.loss[-1] <= 1e-3 * trace.loss[0]
    assert trace.summary()["monotone"]
