"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts.  Run only this file with ``pytest tests/test_acceptance.py``;
the meta-training criteria (5, 6, 11) take several minutes each on one core.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from _cli_runs import primary_files, run_pipeline
from test_metrics import ref_ece, ref_kld
from metasampler.diagnostics import chain_split_rhat, ess, rhat_summary
from metasampler.experiments import (basin_fractions, heldout_nll, in_mode_fractions, mixture_chain,
                                     sine_chain, sine_gap_ratio, tune_baseline)
from metasampler.metamodel import (FeatureBank, MetaParams, identity_meta_params, init_meta_params,
                                   update_emas, warm_start_meta_params)
from metasampler.metatrain import (ESConfig, antithetic_estimate, bma_from_logp, ce_from_logp,
                                   meta_train, smoothed)
from metasampler.metrics import accuracy, agreement, nll, pairwise_kld, total_variation, ece
from metasampler.model import (ArchitectureConfig, DataBatch, EnergyModel, build_layout,
                               finite_diff_check, init_params, softmax)
from metasampler.samplers import (GaussianNoise, SamplerConfig, SamplerState, init_state,
                                  kinetic_l2e_step, l2e_step, sghmc_step, sgld_step)
from metasampler.targets import GaussianMixture1D, GaussianTarget, MixtureTaskDistribution
from metasampler.tasks import DatasetSpec, TaskDistribution, gen_sine_regression


# -- 1 ----------------------------------------------------------------------

def _random_arch(rng):
    channels = int(rng.choice([4, 8, 16]))
    depth = int(rng.integers(1, 4))
    residual = bool(rng.integers(2))
    kind = rng.integers(3)
    if kind == 0:
        dim, classes = (2, 2) if rng.integers(2) else (8, 3)
        return ArchitectureConfig.mlp((dim,) + (channels,) * depth + (classes,), residual=residual)
    if kind == 1:
        return ArchitectureConfig.mlp((1,) + (channels,) * depth + (1,), residual=residual,
                                      likelihood="gaussian")
    return ArchitectureConfig.conv((1, 5, 5), channels, depth, 3, residual=residual)


def _random_batch(rng, arch, size=6):
    if arch.kind == "conv":
        x = rng.normal(size=(size,) + arch.input_shape)
        return DataBatch(x, rng.integers(arch.num_outputs, size=size), 100)
    x = rng.normal(size=(size, arch.layer_widths[0]))
    if arch.likelihood == "gaussian":
        return DataBatch(x, rng.normal(size=size), 100)
    return DataBatch(x, rng.integers(arch.layer_widths[-1], size=size), 100)


def test_criterion_01_gradient_correctness(record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        arch = _random_arch(rng)
        model = EnergyModel(arch, prior_precision=5e-4)
        theta = init_params(arch, int(rng.integers(2**31))).values
        theta = theta + 0.05 * rng.normal(size=theta.size)
        coords = rng.choice(theta.size, size=min(theta.size, 60), replace=False)
        worst = max(worst, finite_diff_check(model, theta, _random_batch(rng, arch), coords=coords))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    record(1, ok, f"max relative error {worst:.2e} (< 1e-5), {elapsed:.1f} s")
    assert ok


# -- 2 ----------------------------------------------------------------------

def _linear_regression_posterior(rng, n=40, d=5, prior_precision=0.5):
    x = rng.normal(size=(n, d))
    y = x @ rng.normal(size=d) + rng.normal(size=n)
    precision = x.T @ x + 2 * prior_precision * np.eye(d)
    mean = np.linalg.solve(precision, x.T @ y)
    return GaussianTarget(mean, precision)


def test_criterion_02_conjugate_sampling(record):
    target = _linear_regression_posterior(np.random.default_rng(7))
    cov = target.covariance
    chains, steps, burn = 16, 50_000, 5_000
    start = time.perf_counter()
    details, ok = [], True
    for kind in ("sgld", "sghmc"):
        noise = GaussianNoise(11)
        mass = 0.004
        state = init_state(np.zeros((chains, target.d)), noise,
                           momentum_scale=math.sqrt(mass) if kind == "sghmc" else 0.0)
        total = np.zeros(target.d)
        total_sq = np.zeros(target.d)
        count = 0
        for i in range(steps):
            if kind == "sgld":
                state = sgld_step(state, target, None, 1e-3)
            else:
                state = sghmc_step(state, target, None, 1e-3, friction=0.2, mass=mass)
            if i >= burn:
                total += state.theta.sum(axis=0)
                total_sq += (state.theta ** 2).sum(axis=0)
                count += chains
        mean = total / count
        var = total_sq / count - mean ** 2
        mean_err = np.abs(mean - target.mean).max()
        var_err = np.abs(var / np.diag(cov) - 1).max()
        ok &= mean_err < 0.05 and var_err < 0.10
        details.append(f"{kind}: mean err {mean_err:.3f}, var rel err {var_err:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    record(2, ok, "; ".join(details) + f" ({elapsed:.0f} s)")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_criterion_03_reduction_identities(record):
    rng = np.random.default_rng(3)
    model = EnergyModel(ArchitectureConfig.mlp((3, 8, 3)), 5e-4)
    identity = identity_meta_params()
    worst, exact = 0.0, True
    for k in range(100):
        theta, r = rng.normal(size=(2, model.d))
        batch = _random_batch(rng, model.arch)
        bank = update_emas(FeatureBank.zeros(model.d), rng.normal(size=model.d))
        a = l2e_step(SamplerState(theta, r, 0, bank, None, GaussianNoise(k)), model, batch, 0.01, 5.0, identity)
        b = sghmc_step(SamplerState(theta, r, 0, None, None, GaussianNoise(k)), model, batch, 0.01, 5.0, 1.0)
        worst = max(worst, np.abs(a.theta - b.theta).max(), np.abs(a.momentum - b.momentum).max())
        c = kinetic_l2e_step(SamplerState(theta, r, 0, bank, None, GaussianNoise(k)), model, batch, 0.01, 5.0,
                             MetaParams.zeros())
        exact &= np.array_equal(c.theta, b.theta) and np.array_equal(c.momentum, b.momentum)
    ok = worst < 1e-12 and exact
    record(3, ok, f"identity L2E vs SGHMC max diff {worst:.1e}; zero kinetic L2E bit-exact: {exact}")
    assert ok


# -- 4 ----------------------------------------------------------------------

def test_criterion_04_es_estimator(record):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    phi = rng.normal(size=8)
    sigma = 0.05
    est = np.array([antithetic_estimate(lambda p, i: float(p @ p), phi, sigma, 1, rng)[0]
                    for _ in range(10_000)])
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    z = np.abs(est.mean(axis=0) - 2 * phi) / se
    const = antithetic_estimate(lambda p, i: 1.5, phi, sigma, 100, rng)[0]
    elapsed = time.perf_counter() - start
    ok = bool(np.all(z < 3)) and bool(np.all(const == 0)) and elapsed < 60
    record(4, ok, f"max |mean - 2 phi| / SE = {z.max():.2f} (< 3); constant loss gives zeros; {elapsed:.1f} s")
    assert ok


# -- 5 ----------------------------------------------------------------------

BLOB_TASKS = TaskDistribution([DatasetSpec("blobs", 2, 300, 2, 3.0), DatasetSpec("blobs", 3, 300, 8, 3.0)],
                              channels=(4, 8, 16), depths=(1, 2, 3))


@pytest.mark.slow
def test_criterion_05_meta_training(record):
    cfg = ESConfig(inner_steps=1500, thin=50, samples=10)
    res = meta_train(BLOB_TASKS, cfg, 300, 0)
    s = smoothed([r.loss for r in res.records])
    k = len(s) // 10
    first, last = float(np.mean(s[:k])), float(np.mean(s[-k:]))

    tune_rng, test_rng = np.random.default_rng(1000), np.random.default_rng(2000)
    tune_tasks = [BLOB_TASKS.sample(tune_rng) for _ in range(5)]
    test_tasks = [BLOB_TASKS.sample(test_rng) for _ in range(5)]
    best_eps, _ = tune_baseline(tune_tasks, cfg, seeds=range(100, 105))
    learned = np.array([heldout_nll(t, cfg, 500 + i, "l2e", meta=res.meta) for i, t in enumerate(test_tasks)])
    baseline = np.array([heldout_nll(t, cfg, 500 + i, "sghmc", step_size=best_eps)
                         for i, t in enumerate(test_tasks)])
    ok_a = last < first
    ok_b = learned.mean() <= baseline.mean()
    wins = int(np.sum(learned <= baseline))
    record(5, ok_a and ok_b,
           f"(a) smoothed loss {first:.3f} -> {last:.3f}; (b) BMA NLL learned {learned.mean():.4f} vs "
           f"SGHMC(eps={best_eps:g}) {baseline.mean():.4f}, learned <= SGHMC on {wins}/5 tasks")
    assert ok_a and ok_b


# -- 6 ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_exploration(record):
    eps = 0.05
    cfg = ESConfig(inner_steps=1500, step_size=eps, sigma=0.01, lr=0.003, pairs=2)
    res = meta_train(MixtureTaskDistribution(), cfg, 300, 0, init=warm_start_meta_params(0, "none"))
    target = GaussianMixture1D((-3.0, 3.0), 0.5)
    learned_both, sghmc_single, shares = 0, 0, []
    for seed in range(5):
        draws, diverged = mixture_chain(target, "l2e", eps, 10_000, seed, meta=res.meta)
        frac = in_mode_fractions(target, draws)
        shares.append(frac.round(2).tolist())
        learned_both += int(not diverged and np.all(frac >= 0.10))
        base, _ = mixture_chain(target, "sghmc", eps, 10_000, seed)
        sghmc_single += int(np.sort(basin_fractions(target, base))[0] < 0.10)
    ok = learned_both == 5 and sghmc_single >= 4
    record(6, ok, f"learned chain holds >= 10% near each mode in {learned_both}/5 seeds {shares}; "
                  f"SGHMC in one basin in {sghmc_single}/5 seeds")
    assert ok


# -- 7 ----------------------------------------------------------------------

def test_criterion_07_metric_oracles(record):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, c = int(rng.integers(1, 40)), int(rng.integers(2, 7))
        p = softmax(rng.normal(scale=2.0, size=(n, c)))
        q = softmax(rng.normal(scale=2.0, size=(n, c)))
        y = rng.integers(c, size=n)
        members = np.stack([softmax(rng.normal(scale=2.0, size=(n, c))) for _ in range(3)])
        ref_nll = sum(-math.log(p[i, y[i]]) for i in range(n)) / n
        ref_acc = sum(int(np.argmax(p[i])) == y[i] for i in range(n)) / n
        ref_agree = sum(int(np.argmax(p[i])) == int(np.argmax(q[i])) for i in range(n)) / n
        ref_tv = sum(0.5 * sum(abs(p[i, j] - q[i, j]) for j in range(c)) for i in range(n)) / n
        worst = max(worst,
                    abs(ece(p, y) - ref_ece(p, y)),
                    abs(nll(p, y) - ref_nll),
                    abs(accuracy(p, y) - ref_acc),
                    abs(agreement(p, q) - ref_agree),
                    abs(total_variation(p, q) - ref_tv),
                    abs(pairwise_kld(members, y) - ref_kld(members, y)))
    ok = worst < 1e-12
    record(7, ok, f"max deviation from brute force over 100 sets: {worst:.1e}")
    assert ok


# -- 8 ----------------------------------------------------------------------

def _ar1(rho, n, rng):
    x = np.empty(n)
    x[0] = rng.normal() / math.sqrt(1 - rho ** 2)
    e = rng.normal(size=n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    return x


def test_criterion_08_diagnostics(record):
    rng = np.random.default_rng(8)
    iid = ess(rng.normal(size=10_000))
    ar = ess(_ar1(0.5, 30_000, rng))
    stationary = chain_split_rhat(rng.normal(size=(4000, 10)))
    trend = chain_split_rhat((np.linspace(0, 10, 1000) + rng.normal(size=1000))[:, None])[0]
    layout = build_layout(ArchitectureConfig.mlp((1, 2, 1)))
    summary = rhat_summary(np.array([1.0, 1.2, 1.05, 1.09, np.nan, 2.0, 1.0]), layout)
    exact = (summary["proportion"] == 4 / 6 and summary["degenerate"] == 1 and
             summary["per_layer"] == {"dense0.weight": 0.5, "dense0.bias": 1.0,
                                      "dense1.weight": 0.0, "dense1.bias": 1.0})
    checks = [8000 <= iid <= 12000, abs(ar / 10_000 - 1) < 0.2, bool(np.all(np.abs(stationary - 1) < 0.05)),
              trend > 1.1, exact]
    ok = all(checks)
    record(8, ok, f"iid ESS {iid:.0f}; AR(1) ESS {ar:.0f} vs 10000; stationary R-hat max "
                  f"|R-1| {np.abs(stationary - 1).max():.3f}; trend R-hat {trend:.2f}; summary exact: {exact}")
    assert ok


# -- 9 ----------------------------------------------------------------------

def test_criterion_09_bma_below_ce(record):
    rng = np.random.default_rng(9)
    violations, strict_fail, equal_fail = 0, 0, 0
    for case in range(1000):
        k, n = int(rng.integers(2, 8)), int(rng.integers(1, 20))
        logp = np.log(rng.uniform(0.01, 1.0, size=(k, n)))
        if case % 10 == 0:
            logp = np.tile(logp[:1], (k, 1))
        bma, _ = bma_from_logp(logp)
        ce, _ = ce_from_logp(logp)
        identical = bool(np.all(logp == logp[:1]))
        if bma > ce + 1e-12:
            violations += 1
        if identical and abs(bma - ce) > 1e-12:
            equal_fail += 1
        if not identical and not bma < ce:
            strict_fail += 1
    ok = violations == strict_fail == equal_fail == 0
    record(9, ok, f"1000 cases: BMA > CE {violations}x, equality failures {equal_fail}, "
                  f"non-strict on distinct members {strict_fail}")
    assert ok


# -- 10 ---------------------------------------------------------------------

def test_criterion_10_reproducibility(record, tmp_path):
    first, codes_a = run_pipeline(tmp_path / "a")
    second, codes_b = run_pipeline(tmp_path / "b")
    differing = [c for c in first if primary_files(first[c]) != primary_files(second[c])]
    count = sum(len(primary_files(first[c])) for c in first)
    ok = not differing and set(codes_a.values()) == {0} and codes_a == codes_b
    record(10, ok, f"{len(first)} command runs, {count} primary artifacts byte-identical on rerun; "
                   f"differing: {differing or 'none'}")
    assert ok


# -- 11 ---------------------------------------------------------------------

SINE_INTERVALS = ((-5.0, -1.0), (1.0, 4.0))
SINE_GAP = (-1.0, 1.0)
SINE_DENSE = ((-4.5, -1.5), (1.5, 3.5))


@pytest.mark.slow
def test_criterion_11_sine_gap(record):
    dist = TaskDistribution([DatasetSpec("sine", n=300, intervals=SINE_INTERVALS)], channels=(16, 32),
                            depths=(1, 2), residual=(False,))
    cfg = ESConfig(inner_steps=1500, step_size=0.01)
    res = meta_train(dist, cfg, 200, 0)
    arch = ArchitectureConfig.mlp((1, 32, 32, 1), likelihood="gaussian")
    sampler = SamplerConfig(0.01, momentum_decay=0.05)
    ratios = []
    for seed in range(3):
        train = gen_sine_regression(seed, n=1000, intervals=SINE_INTERVALS)
        model, samples = sine_chain(train, arch, "l2e", sampler, 3500, 1000, 50, 50, seed, meta=res.meta)
        ratios.append(sine_gap_ratio(samples, model, SINE_GAP, SINE_DENSE)[0] if not samples.diverged else 0.0)
    ok = all(r > 1.5 for r in ratios)
    record(11, ok, "gap / dense predictive std ratio per seed: " + ", ".join(f"{r:.2f}" for r in ratios)
           + " (> 1.5)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
