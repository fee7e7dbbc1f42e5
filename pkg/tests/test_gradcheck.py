import numpy as np
import pytest
from scipy.optimize import brentq

from eventprop.gradcheck import (FAIL, INCONCLUSIVE, PASS, CoordinateCheck, GradCheckReport,
                                 chain_network, compare, coordinates, finite_diff_grad,
                                 random_network, run_suite, suite_verdict)
from eventprop.losses import LossSpec
from eventprop.network import NetworkParams, Trial
from eventprop.simulate import EXACT, run_forward_trial

SUM = LossSpec("sum")


def test_zero_weight_network_has_zero_numeric_gradient():
    p = NetworkParams(np.zeros((3, 2)), np.zeros((2, 3)), 20.0, 5.0, w_hh=np.zeros((3, 3)))
    trial = Trial([1.0, 2.0, 4.0], [0, 1, 0], 1, 10.0)
    for target in coordinates(p):
        for eps in (1e-5, 1e-3):
            fd = finite_diff_grad(p, trial, SUM, 0.1, eps, target)
            assert fd.value == 0.0 and fd.stable


def test_chain_network_fires():
    p, trial = chain_network()
    rec, _ = run_forward_trial(p, trial, SUM, 0.1, mode=EXACT)
    assert rec.spike_counts.sum() > 0 and np.all(rec.spike_counts > 0)


@pytest.mark.parametrize("kind,tol", [("sum", 1e-5), ("sum_exp", 1e-5), ("xentropy", 1e-5),
                                      ("max", 1e-3)])
def test_chain_weights(kind, tol):
    rep = run_suite([LossSpec(kind)], tol, network="chain")[LossSpec(kind)]
    assert rep.verdict == PASS, rep.summary()


def test_chain_time_constants():
    rep = run_suite([SUM], 1e-4, network="chain", include_tau=True, include_weights=False)[SUM]
    assert {r.block for r in rep.rows} == {"tau_mem", "tau_syn"}
    assert rep.verdict == PASS, rep.summary()


def test_recurrent_random_networks():
    reps = run_suite([SUM, LossSpec("max")], [1e-5, 1e-3], seeds=[1, 3])
    assert suite_verdict(reps.values()) == PASS


def threshold_weight():
    trial = Trial([1.0], [0], 0, 40.0)

    def count(w):
        p = NetworkParams([[w]], [[1.0], [-1.0]], 20.0, 5.0)
        rec, _ = run_forward_trial(p, trial, SUM, 0.1, mode=EXACT)
        return rec.spike_counts[0]

    lo, hi = 2.0, 10.0
    assert count(lo) == 0 and count(hi) == 1
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if count(mid):
            hi = mid
        else:
            lo = mid
    return hi, trial


def test_grazing_coordinate_is_flagged_unstable():
    w, trial = threshold_weight()
    p = NetworkParams([[w]], [[1.0], [-1.0]], 20.0, 5.0)
    rep = compare(p, trial, SUM, 0.1, 1e-5)
    by = {(r.block, r.index): r for r in rep.rows}
    assert not by[("w_ih", (0, 0))].stable
    assert all(r.stable for k, r in by.items() if k[0] == "w_ho")
    assert rep.n_skipped == 1
    assert rep.max_rel_error == max(r.rel_error for r in rep.rows if r.block == "w_ho")


def test_verdicts():
    row = lambda a, n, s: CoordinateCheck("w_ih", (0, 0), a, n, s)
    assert GradCheckReport("sum", 1e-5, [row(1.0, 2.0, False)]).verdict == INCONCLUSIVE
    assert GradCheckReport("sum", 1e-5, []).verdict == INCONCLUSIVE
    assert GradCheckReport("sum", 1e-5, [row(1.0, 1.0 + 1e-7, True)]).verdict == PASS
    assert GradCheckReport("sum", 1e-5, [row(1.0, 1.1, True)]).verdict == FAIL
    reps = [GradCheckReport("a", 1, [row(0, 0, True)]), GradCheckReport("b", 1, [])]
    assert suite_verdict(reps) == INCONCLUSIVE


def test_difference_quotient_converges_quadratically():
    p, trial = chain_network()
    target = ("w_ih", (0, 0))
    vals = [finite_diff_grad(p, trial, SUM, 0.1, e, target).value for e in (4e-3, 2e-3, 1e-3)]
    d1, d2 = vals[0] - vals[1], vals[1] - vals[2]
    assert 3.0 < d1 / d2 < 5.0


def test_report_csv_and_summary(tmp_path):
    p, trial = random_network(0)
    rep = compare(p, trial, SUM, 0.1, 1e-5)
    text = rep.to_csv(tmp_path / "r.csv")
    assert text.splitlines()[0].startswith("loss,block,index,analytic,numeric")
    assert len(text.splitlines()) == len(rep.rows) + 1
    assert "max relative error" in rep.summary()


def test_random_networks_respect_size_limits():
    for seed in range(20):
        p, trial = random_network(seed)
        assert max(p.n_in, p.n_hidden, p.n_out) <= 10
        assert p.recurrent == bool(seed % 2)
