"""Acceptance gate: the eleven criteria at their stated tolerances.

Each test runs the named experiment(s) at the default configuration and
records one PASS/FAIL line, printed in the terminal summary (and by running
this file directly).
"""

import time

import pytest

from fracgirsanov.experiments import ExperimentConfig, run_experiment

RESULTS = {}


def _run(name, **kw):
    t0 = time.perf_counter()
    rep = run_experiment(ExperimentConfig(name, **kw), write=False)
    return rep, time.perf_counter() - t0


def _record(number, title, ok, detail):
    RESULTS[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail.rstrip()}"
    print(RESULTS[number])


def _failed(*reports):
    return [f"{c.name}={c.value:.3g}>{c.limit:.3g}" for r in reports for c in r.checks
            if not c.passed]


def _worst(rep, prefix=""):
    vals = [c.value for c in rep.checks if c.name.startswith(prefix)]
    return max(vals) if vals else float("nan")


def test_criterion_01_gram_identity():
    worst, total, fails = 0.0, 0.0, []
    for h in (0.25, 0.5, 0.75):
        rep, secs = _run("gram-check", hurst=h, n=256)
        total += secs
        err = next(c.value for c in rep.checks if c.name == "gram_max_rel")
        worst = max(worst, err)
        if err > 0.02 or not rep.passed:
            fails.append(f"H={h}: {err:.3g}")
    ok = not fails and total <= 10.0
    _record(1, "Gram/covariance identity", ok,
            f"max rel dev {worst:.3g} (limit 0.02), {total:.1f} s (limit 10 s) {fails or ''}")
    assert ok


def test_criterion_02_generator_agreement():
    rep, secs = _run("generator-agreement", n=64, samples=10000)
    ok = rep.passed and secs <= 30.0
    _record(2, "generator agreement", ok,
            f"max |z| {_worst(rep):.2f} (limit 3), {secs:.1f} s (limit 30 s) {_failed(rep) or ''}")
    assert ok


def test_criterion_03_duality_and_divergence():
    rep, _ = _run("duality-check", n=64, samples=10000)
    _record(3, "duality and divergence bound", rep.passed,
            f"max duality |z| {_worst(rep, 'duality'):.2f} over {len(rep.checks) // 2} cases "
            f"{_failed(rep) or ''}")
    assert rep.passed


def test_criterion_04_picard_factorial_bound():
    rep, _ = _run("picard-rate")
    iters = max(c.value for c in rep.checks if c.name.startswith("iterations"))
    _record(4, "Picard factorial bound", rep.passed,
            f"max increment/envelope {_worst(rep, 'envelope'):.3g}, max iterations {iters:.0f} "
            f"{_failed(rep) or ''}")
    assert rep.passed


def test_criterion_05_roundtrip_and_semigroup():
    rep, _ = _run("roundtrip", n=128, samples=100)
    _record(5, "round trip and semigroup", rep.passed,
            f"max sup-node error {_worst(rep):.3g} (limit 1e-9) {_failed(rep) or ''}")
    assert rep.passed


def test_criterion_06_determinant_crosscheck():
    rep, _ = _run("cf-det-crosscheck", n=128)
    _record(6, "determinant cross-check", rep.passed,
            f"max closed-vs-spectral rel gap {_worst(rep, 'closed_vs_spectral'):.3g} (limit 1e-3) "
            f"{_failed(rep) or ''}")
    assert rep.passed


def test_criterion_07_girsanov_identity():
    rep, _ = _run("girsanov-identity", n=64, samples=10000)
    mass, _ = _run("density-mass", n=64, samples=10000)
    ok = rep.passed and mass.passed
    _record(7, "Girsanov identity", ok,
            f"max identity |z| {_worst(rep, 'identity'):.2f}, max mass |z| "
            f"{max(_worst(rep, 'mass'), _worst(mass, 'mass')):.2f} {_failed(rep, mass) or ''}")
    assert ok


def test_criterion_08_classical_reduction():
    rep, _ = _run("gbm-reduction", hurst=0.5, n=256, sigma="const:0.5", drift="zero", x0="1.0")
    _record(8, "classical reduction", rep.passed,
            f"max node-wise rel error {_worst(rep):.3g} (limit 1e-8) {_failed(rep) or ''}")
    assert rep.passed


def test_criterion_09_mean_conservation_and_evolution():
    rep, secs = _run("mean-conservation", n=64, samples=10000, drift="sin")
    ok = rep.passed and secs <= 300.0
    _record(9, "mean conservation and evolution", ok,
            f"conservation max |z| {_worst(rep, 'conservation'):.2f}, evolution excess "
            f"{_worst(rep, 'evolution'):.3g} (limit dt), {secs:.0f} s (limit 300 s) "
            f"{_failed(rep) or ''}")
    assert ok


def test_criterion_10_sde_duality_residual():
    rep, _ = _run("sde-residual", n=64, samples=10000)
    _record(10, "SDE duality residual", rep.passed,
            f"max |z| {_worst(rep):.2f} over {len(rep.checks)} cases {_failed(rep) or ''}")
    assert rep.passed


def test_criterion_11_chain_rule_and_temporal():
    rep, _ = _run("derivative-check")
    spatial = max(c.value for c in rep.checks if c.name.startswith(("chain", "shift")))
    _record(11, "chain-rule and temporal derivatives", rep.passed,
            f"max spatial rel err {spatial:.3g} (limit 0.01) {_failed(rep) or ''}")
    assert rep.passed


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
