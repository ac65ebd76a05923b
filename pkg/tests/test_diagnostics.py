"""Diagnostics tests: the escape-demo recurrence, per-iteration identity
checks on live runs and on manufactured failures, structural assumption
reports across the zoo, and the stationarity estimate."""

import json

import numpy as np
import pytest

from madmm import zoo
from madmm.diagnostics import (AssumptionReport, assert_iteration,
                               check_assumptions, run_counterexample,
                               stationarity)
from madmm.prox import Quadratic
from madmm.solver import (Problem, SolverState, augmented_lagrangian, solve,
                          step)
from madmm.system import BlockId, Constant, MatChain, MultiaffineSystem


# ---------------------------------------------------------------------------
# Escape demo.

def test_counterexample_multiplier_walks_linearly():
    points = run_counterexample(1.0, 0.0, 1.0, 500)
    assert len(points) == 501
    for k, (x, y, w) in enumerate(points):
        assert abs(w + float(k)) <= 1e-9
    assert points[-1][2] <= -499.0


def test_counterexample_scales_with_rho():
    points = run_counterexample(1.0, 0.0, 2.0, 50)
    for k, (x, y, w) in enumerate(points):
        assert abs(w + 2.0 * k) <= 1e-9


def test_counterexample_fixed_point():
    points = run_counterexample(1.0, -2.0, 1.0, 20, y0=1.0)
    for x, y, w in points:
        assert abs(x - 1.0) <= 1e-12
        assert abs(y - 1.0) <= 1e-12
        assert abs(w + 2.0) <= 1e-12


def test_counterexample_zero_iters_returns_start_only():
    assert run_counterexample(1.0, 0.0, 1.0, 0) == [(1.0, 0.0, 0.0)]


def test_counterexample_rejects_negative_iters():
    with pytest.raises(ValueError):
        run_counterexample(1.0, 0.0, 1.0, -1)


# ---------------------------------------------------------------------------
# Per-iteration checks on live runs.

def test_strict_run_is_clean_on_certified_families():
    for build, rho in ((lambda: zoo.nmf3(*_nmf_args()), 4.0),
                       (lambda: zoo.mc1(zoo.triangle_graph()), 5000.0)):
        inst = build()
        _, traces, _ = solve(inst.problem, rho=rho, max_iter=30,
                             assert_level="strict")
        assert all(not tr.violations for tr in traces)


def _nmf_args():
    B, _, _ = zoo.gen_nmf_data(8, 8, 2, seed=1)
    return B, 2


def test_dual_identities_hold_along_a_run():
    """Oracle from the public surface: swapping new multipliers into the old
    state must change the Lagrangian by exactly (1/rho) ||dW||^2."""
    B, _, _ = zoo.gen_nmf_data(8, 8, 2, seed=1)
    inst = zoo.nmf3(B, 2)
    state, _, _ = solve(inst.problem, rho=4.0, max_iter=0)
    for _ in range(20):
        new, tr = step(inst.problem, state)
        l_new = augmented_lagrangian(inst.problem, new)
        l_mid = augmented_lagrangian(
            inst.problem, SolverState(new.assignment, state.multipliers,
                                      new.rho, new.k))
        dw = sum(float(np.sum((new.multipliers[e] - state.multipliers[e]) ** 2))
                 for e in state.multipliers)
        assert abs((l_new - l_mid) - dw / new.rho) <= 1e-9 * (1 + abs(l_new))
        assert not assert_iteration(inst.problem, state, new, tr)
        state = new


def _escape_toy():
    """min (1/2)(x^2 + z^2) s.t. x z = 1: no slack spans the constraint, and
    from (1, 0) the iterates collapse while the Lagrangian climbs."""
    x = BlockId("x", "x", (1, 1))
    z = BlockId("z", "z0", (1, 1))
    system = MultiaffineSystem()
    system.add_equation([MatChain([x, z]), Constant([[1.0]], sign=-1)])
    problem = Problem(system, {x: [Quadratic(1.0)], z: [Quadratic(1.0)]})
    return problem


def test_monotone_check_flags_the_escape_toy():
    problem = _escape_toy()
    state, _, _ = solve(problem, rho=1.0, max_iter=0,
                        init={"x": [[1.0]], "z": [[0.0]]})
    first, _ = step(problem, state)
    second, tr = step(problem, first)
    found = assert_iteration(problem, first, second, tr, level="basic",
                             rho_certified=True)
    assert any(v.check == "monotone_decrease" for v in found)
    with pytest.raises(AssertionError, match="monotone_decrease"):
        assert_iteration(problem, first, second, tr, level="strict",
                         rho_certified=True)


def test_dual_step_identity_flags_a_doctored_multiplier():
    B, _, _ = zoo.gen_nmf_data(6, 6, 2, seed=2)
    inst = zoo.nmf3(B, 2)
    state, _, _ = solve(inst.problem, rho=2.0, max_iter=0)
    new, tr = step(inst.problem, state)
    doctored = {e: w.copy() for e, w in new.multipliers.items()}
    eq = next(iter(doctored))
    doctored[eq] = doctored[eq] + 1.0
    bad = SolverState(new.assignment, doctored, new.rho, new.k)
    found = assert_iteration(inst.problem, state, bad, tr)
    assert any(v.check == "dual_step_identity" for v in found)


def test_assert_iteration_rejects_unknown_level():
    problem = _escape_toy()
    state, _, _ = solve(problem, rho=1.0, max_iter=0)
    new, tr = step(problem, state)
    with pytest.raises(ValueError):
        assert_iteration(problem, state, new, tr, level="paranoid")


# ---------------------------------------------------------------------------
# Structural assumption checks.

def test_zoo_assumption_screen():
    expected_fail = {"rpca2_raw", "sbd0"}
    for name in zoo.zoo_names():
        report = check_assumptions(zoo.default_instance(name).problem)
        if name in expected_fail:
            assert report.overall == "fail", name
        else:
            assert report.overall == "pass", (name, report.failures())


def test_raw_rpca_fails_by_final_block_structure():
    report = check_assumptions(zoo.default_instance("rpca2_raw").problem)
    names = [n for n, _ in report.failures()]
    assert "final_block_structure" in names
    detail = dict(report.failures())["final_block_structure"]
    assert "'S'" in detail


def test_bare_deconvolution_fails_by_image_containment():
    report = check_assumptions(zoo.default_instance("sbd0").problem)
    names = [n for n, _ in report.failures()]
    assert "image_containment" in names
    detail = dict(report.failures())["image_containment"]
    assert "no slack block" in detail


def test_report_shape_round_trips_through_json():
    report = check_assumptions(zoo.default_instance("nmf3").problem)
    blob = json.loads(json.dumps(report.as_dict()))
    assert blob["overall"] == "pass"
    assert {c["name"] for c in blob["checks"]} >= {
        "image_containment", "final_block_structure", "coercivity"}
    statuses = {c["status"] for c in blob["checks"]}
    assert statuses <= {"pass", "fail", "unverifiable"}
    assert any(c["status"] == "unverifiable" and c["name"] == "coercivity"
               for c in blob["checks"])


def test_overall_is_fail_only_on_failures():
    clean = AssumptionReport([("a", "pass", ""), ("b", "unverifiable", "")])
    assert clean.overall == "pass"
    assert not clean.failures()
    dirty = AssumptionReport([("a", "pass", ""), ("b", "fail", "why")])
    assert dirty.overall == "fail"
    assert dirty.failures() == [("b", "why")]


# ---------------------------------------------------------------------------
# Stationarity estimate.

def test_stationarity_vanishes_at_a_solved_point():
    B, _, _ = zoo.gen_nmf_data(8, 8, 2, seed=1)
    inst = zoo.nmf3(B, 2)
    state, _, _ = solve(inst.problem, rho=4.0, max_iter=2000)
    est = stationarity(inst.problem, state)
    assert est.aggregate <= 1e-4
    assert set(est.per_block) == {b.name for b in inst.problem.all_blocks}


def test_stationarity_sees_an_unsolved_point():
    B, _, _ = zoo.gen_nmf_data(8, 8, 2, seed=1)
    inst = zoo.nmf3(B, 2)
    zeros = {b: np.zeros(b.shape)
             for b in inst.problem.system.blocks.values()}
    mults = {e: np.zeros(inst.problem.system.eq_shape(e))
             for e in inst.problem.system.eq_ids}
    est = stationarity(inst.problem, SolverState(zeros, mults, 1.0, 0))
    assert est.aggregate >= 0.1
    assert est.per_block["Z"] >= 0.1
