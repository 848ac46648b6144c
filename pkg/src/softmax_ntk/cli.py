"""Batch experiment runner.

    softmax-ntk <train|kernel|perturb|audit|couple|diffusion>
        [--config PATH] [--seed U64] [--out DIR] [--mode theory|practical] [--workers N]

Exit codes: 0 success, 1 monitor violation in theory mode (practical mode
only sets ``warning`` and exits 0), 2 config error (nothing written),
3 numeric failure (outputs left as ``*.partial``).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np
import pydantic

from . import __version__
from .config import CONFIGS, load_config
from .diffusion import (GaussianOracle, OUParams, backward_sample, build_dataset,
                        coupling_error, dataset_table, denoiser_to_score, mean_decay,
                        network_score, noise_var, score_error, train_score_pair)
from .errors import DomainError, EigensolverError, NonFiniteError, ShapeError, SingularKernelError
from .io import RunOutput
from .kernel import (bounds_audit, gram, max_eigenvalue, min_eigenvalue,
                     perturbation_experiment)
from .model import make_dataset, sample_unit_ball
from .ntk_regression import count_inversions, coupling_experiment
from .seeding import derive_rng, derive_seed
from .training import (TRACE_COLUMNS, clamp_sigma, monitor_induction, practical_eta,
                       symmetric_init, theory_setup, train)

EXIT_OK, EXIT_MONITOR, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NUMERIC_ERRORS = (NonFiniteError, SingularKernelError, EigensolverError)


def _data(cfg):
    return make_dataset(derive_rng(cfg.seed, "data"), cfg.n, cfg.d, cfg.inputs)


def run_train(cfg, out: RunOutput) -> bool:
    data = _data(cfg)
    net_seed = derive_seed(cfg.seed, "net")
    params = None
    if cfg.mode == "theory":
        params, net0 = theory_setup(data, cfg.m, net_seed, delta=cfg.delta, eps=cfg.eps, C=cfg.C,
                                    sigma=cfg.sigma, c_m=cfg.c_m, c_T=cfg.c_T, preset=cfg.preset)
        eta, sigma = params.eta, params.sigma
    else:
        sigma = 1.0 if cfg.sigma is None else cfg.sigma
        net0 = symmetric_init(cfg.m, data.d1, data.d2, sigma, net_seed)
        eta = practical_eta(net0, data, cfg.eta_scale)
    try:
        _, trace = train(data, cfg.m, eta, cfg.steps, net_seed, sigma,
                         record_decomposition=True, net=net0)
    except NonFiniteError as err:
        if getattr(err, "trace", None) is not None:
            out.write_csv("trace.csv", TRACE_COLUMNS, list(err.trace.rows()))
        raise
    out.write_csv("trace.csv", TRACE_COLUMNS, list(trace.rows()))

    summary = trace.summary()
    resid = [abs(r.C0 + r.C1 + r.C2 + r.C3 - r.delta_loss) / max(trace.loss[t], 1e-300)
             for t, r in enumerate(trace.decomposition)]
    if params is not None:
        monitor = monitor_induction(trace, params, data.n, max(data.d1, data.d2))
        violated = not monitor["clean"]
    else:
        monitor = {"monotone": summary["monotone"]}
        violated = not summary["monotone"]
    monitor["max_decomposition_residual"] = max(resid, default=0.0)
    out.write_json("monitor.json", monitor)
    out.write_json("summary.json", {
        "config": cfg.echo(), "eta": eta, "sigma": sigma,
        "lambda": min_eigenvalue(gram(net0, data)),
        "theory": params.to_dict() if params is not None else None,
        "trace": summary, "warning": violated,
    })
    return violated


def run_kernel(cfg, out: RunOutput) -> bool:
    data = _data(cfg)
    net = symmetric_init(cfg.m, data.d1, data.d2, cfg.sigma, derive_seed(cfg.seed, "net"))
    if cfg.weights == "zero":
        net = net.with_weights(np.zeros_like(net.W))
    G = gram(net, data)
    n, d2 = data.n, data.d2
    rows = [(l1, i, l2, j, G.H[l1 * n + i, l2 * n + j])
            for l1 in range(d2) for i in range(n) for l2 in range(d2) for j in range(n)]
    out.write_csv("gram.csv", ("l1", "i", "l2", "j", "value"), rows)
    lam = min_eigenvalue(G)
    report = {"config": cfg.echo(), "lambda_min": lam, "lambda_max": max_eigenvalue(G),
              "size": n * d2}
    if cfg.weights == "zero":
        # W = 0 and mean-zero signs: H = (a a^T) kron (X^T X) / m
        closed = np.kron(net.a @ net.a.T, data.X.T @ data.X) / net.m
        ea = np.linalg.eigvalsh(net.a @ net.a.T)
        ex = np.linalg.eigvalsh(data.X.T @ data.X)
        lam_closed = float(np.min(np.outer(ea, ex)) / net.m)
        report["closed_form"] = {
            "lambda_min": lam_closed,
            "lambda_abs_diff": abs(lam - lam_closed),
            "max_entry_diff": float(np.max(np.abs(closed - G.H))),
        }
    violated = lam < -1e-8
    report["warning"] = violated
    out.write_json("kernel.json", report)
    return violated


def _sigma(cfg):
    return clamp_sigma(cfg.n, cfg.d, cfg.delta, cfg.C) if cfg.sigma is None else cfg.sigma


def run_perturb(cfg, out: RunOutput) -> bool:
    rep = perturbation_experiment(cfg.n, cfg.d, cfg.m, _sigma(cfg), cfg.R, cfg.trials, cfg.seed,
                                  B=cfg.B, delta=cfg.delta, C=cfg.C, workers=cfg.workers)
    out.write_csv("perturb.csv", ("trial", "statistic", "value", "bound", "violated"),
                  list(rep.rows()))
    violated = bool(rep.frob_violations or rep.entry_violations)
    out.write_json("perturb.json", {"config": cfg.echo(), **rep.summary(), "warning": violated})
    return violated


def run_audit(cfg, out: RunOutput) -> bool:
    rep = bounds_audit(cfg.n, cfg.d, cfg.m, _sigma(cfg), cfg.delta, cfg.R, cfg.trials, cfg.seed,
                       B=cfg.B, C=cfg.C, workers=cfg.workers)
    out.write_csv("audit.csv", ("trial", "part", "stat", "bound", "violated"), rep.records)
    violated = not rep.all_passed
    out.write_json("audit.json", {"config": cfg.echo(), **rep.summary(), "warning": violated})
    return violated


def run_couple(cfg, out: RunOutput) -> bool:
    data = _data(cfg)
    X_te = sample_unit_ball(derive_rng(cfg.seed, "test"), cfg.d, cfg.test_points)
    traces = coupling_experiment(data, X_te, cfg.m_list, cfg.steps, cfg.seed, cfg.sigma,
                                 cfg.eta_scale, workers=cfg.workers)
    for tr in traces:
        out.write_csv(f"couple_m{tr.m}.csv", ("m", "step", "sup_gap", "eps_H", "max_eps_test"),
                      list(tr.rows()))
    gaps = [tr.max_gap for tr in traces]
    inversions = count_inversions(gaps)
    initial = max(tr.sup_gap[0] for tr in traces)
    lazy = all(tr.summary()["eps_H_below_half_lambda"] for tr in traces)
    violated = inversions > 1 or initial > 1e-12 or not lazy
    out.write_json("couple.json", {
        "config": cfg.echo(), "widths": [tr.summary() for tr in traces],
        "max_gaps": gaps, "inversions": inversions, "initial_gap": initial,
        "eps_H_below_half_lambda": lazy, "warning": violated,
    })
    return violated


def run_diffusion(cfg, out: RunOutput) -> bool:
    params = OUParams(T=cfg.T, T0=cfg.T0, g=cfg.g, steps=cfg.sample_steps)
    oracle = GaussianOracle(cfg.s2)
    dataset = build_dataset(oracle.sampler(cfg.d), cfg.n, params, derive_seed(cfg.seed, "dataset"),
                            d=cfg.d)
    preamble, header, rows = dataset_table(dataset)
    out.write_csv("dataset.csv", header, rows, preamble)

    net, trace, eta, ntk_denoiser = train_score_pair(
        dataset, cfg.m, cfg.eta_scale, cfg.steps, derive_seed(cfg.seed, "net"), cfg.sigma)
    out.write_csv("trace.csv", TRACE_COLUMNS, list(trace.rows()))

    s_nn = network_score(net, dataset.scaler, params)

    def s_ntk(t, x):
        return denoiser_to_score(ntk_denoiser(t, x), t, x, params)

    def s_zero(t, x):
        return np.zeros_like(x)

    def s_zero_denoiser(t, x):
        return denoiser_to_score(np.zeros_like(x), t, x, params)

    eval_seed = derive_seed(cfg.seed, "eval")

    def err(fn):
        return score_error(fn, oracle, params, cfg.d, cfg.mc_samples, eval_seed, workers=cfg.workers)

    total, zero, zero_den, ntk = err(s_nn), err(s_zero), err(s_zero_denoiser), err(s_ntk)
    coupling = coupling_error(s_nn, s_ntk, oracle, params, cfg.d, cfg.mc_samples, eval_seed,
                              workers=cfg.workers)
    y = backward_sample(s_nn, params, cfg.sample_steps, derive_rng(cfg.seed, "sample"), cfg.d,
                        n_samples=cfg.n_samples)
    target_var = mean_decay(params.T0, params) ** 2 * cfg.s2 + noise_var(params.T0, params)
    violated = total.value > 0.5 * zero.value
    out.write_json("diffusion.json", {
        "config": cfg.echo(), "ou": params.to_dict(), "eta": eta,
        "rho": dataset.scaler.rho,
        "train": trace.summary(),
        "error": total.value, "stderr": total.stderr, "samples": total.samples,
        "baselines": {"zero_score": zero.to_dict(), "zero_denoiser": zero_den.to_dict()},
        "ratio_to_zero_score": total.value / zero.value,
        "ntk_error": ntk.to_dict(),
        "decomposition": {"total": total.value, "coupling": coupling.value,
                          "residual": total.value - coupling.value},
        "sampler": {"mean": y.mean(axis=0), "var": y.var(axis=0, ddof=1),
                    "target_var": target_var, "n_samples": cfg.n_samples},
        "warning": violated,
    })
    return violated


RUNNERS = {
    "train": run_train,
    "kernel": run_kernel,
    "perturb": run_perturb,
    "audit": run_audit,
    "couple": run_couple,
    "diffusion": run_diffusion,
}


def execute(subcommand, cfg) -> int:
    """Run one validated config; writes outputs, manifest and a timings sidecar."""
    out = RunOutput(cfg.out)
    start = time.perf_counter()
    manifest = {"subcommand": subcommand, "config": cfg.echo(), "version": __version__}
    try:
        violated = RUNNERS[subcommand](cfg, out)
    except NUMERIC_ERRORS as err:
        manifest.update(status="aborted", error=f"{type(err).__name__}: {err}",
                        outputs=out.hashes())
        out.root.mkdir(parents=True, exist_ok=True)
        (out.root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest.update(status="ok", warning=violated, outputs=out.hashes())
    out.write_json("manifest.json", manifest)
    out.commit()
    elapsed = time.perf_counter() - start
    (out.root / "timings.txt").write_text(f"wall_seconds {elapsed:.6f}\nworkers {cfg.workers}\n")
    if violated and cfg.mode == "theory":
        print("monitor violation (see outputs)", file=sys.stderr)
        return EXIT_MONITOR
    if violated:
        print("warning: monitor violation in practical mode", file=sys.stderr)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="softmax-ntk", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in CONFIGS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, help="64-bit master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=("theory", "practical"))
        p.add_argument("--workers", type=int, help="thread count for parallel sections")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "mode": args.mode, "workers": args.workers}
    try:
        cfg = load_config(args.subcommand, args.config, overrides)
    except (pydantic.ValidationError, OSError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return execute(args.subcommand, cfg)
    except (DomainError, ShapeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
