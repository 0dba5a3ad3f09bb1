import numpy as np
import pytest

from dcwb.basis import BaseLearnerSpec
from dcwb.errors import DegenerateResponseError, InputError, ProtocolError, SiteAbort
from dcwb.host import CostLedger, HostSettings, HostState, audit_costs, expected_costs, expected_costs_for
from dcwb.protocol import InitGram, ScoreVector, Selection, SharedTheta, SseReport, ValidationRisk, mat
from dcwb.transport import fit_distributed, spawn_simulated_cluster

from fixtures import cost_learners, dense_learners, make_sites, settings, sparse_learners, split_by_site


def _host(n_specs=3, sites=(1, 2)):
    specs = [BaseLearnerSpec(i, "linear", ("x",)) for i in range(n_specs)]
    h = HostState(None, specs, HostSettings())
    h.sites = list(sites)
    return h


def test_select_sums_sites_and_breaks_ties_low():
    h = _host()
    reports = {1: SseReport(1, [(0, 2.0), (1, 1.0), (2, 1.0)]), 2: SseReport(1, [(0, 0.5), (1, 1.0), (2, 1.0)])}
    win, table = h.select(1, reports)
    assert table == [2.5, 2.0, 2.0] and win == 1


@pytest.mark.parametrize(
    "report",
    [SseReport(2, [(0, 1.0), (1, 1.0), (2, 1.0)]), SseReport(1, [(0, 1.0), (2, 1.0), (1, 1.0)]), SseReport(1, [(0, 1.0)])],
)
def test_select_rejects_malformed_reports(report):
    h = _host()
    good = SseReport(1, [(0, 1.0), (1, 1.0), (2, 1.0)])
    with pytest.raises(ProtocolError):
        h.select(1, {1: good, 2: report})


def test_ledger_buckets():
    led = CostLedger()
    led.record(1, True, InitGram(0, mat(np.eye(3))))
    led.record(1, True, ScoreVector(1, 0, (1.0, 2.0, 3.0)))
    led.record(1, True, SseReport(1, [(0, 1.0), (1, 2.0)]))
    led.record(1, True, ValidationRisk(1, 1.0, 5, 1.0, 5))
    led.record(1, False, SharedTheta(1, 0, (1.0, 2.0, 3.0)))
    led.record(1, False, Selection(1, 0))
    rep = led.report()
    assert rep["site"]["1"] == {"init": 9, "fitting": 5, "auxiliary": 4, "messages": 4}
    assert rep["host_per_recipient"]["1"] == {"init": 0, "fitting": 4, "auxiliary": 0, "messages": 2}


def test_expected_costs_closed_form():
    # closed form: d^2|B|, M|B|(d+2), dM|B| + M
    assert expected_costs(10, 4, 12) == {"site_init": 576, "site_fitting": 560, "host_fitting": 490}


@pytest.mark.parametrize("B,d,M", [(1, 5, 3), (3, 8, 10), (4, 12, 10)])
def test_general_costs_reduce_to_closed_form(B, d, M):
    assert expected_costs_for(cost_learners(B, d), M) == expected_costs(M, B, d)


def test_audit_of_a_mixed_learner_set():
    parts = split_by_site(make_sites("gaussian", 3, n=180, seed=2))
    model, ledger, _ = fit_distributed(parts, dense_learners(S=3), settings("gaussian", 5, patience=None))
    rep = audit_costs(ledger, 5, specs=model.specs)
    assert all(c["ledger"] == c["closed_form"] for c in rep["checks"])


def test_audit_names_the_broken_counter():
    parts = split_by_site(make_sites("gaussian", 2, n=120, p=2, seed=1, categorical=False))
    _, ledger, _ = fit_distributed(parts, cost_learners(2, 6), settings("gaussian", 4, patience=None))
    audit_costs(ledger, 4, 2, 6)
    ledger.site[2]["fitting"] += 1
    with pytest.raises(AssertionError, match="site 2 fitting"):
        audit_costs(ledger, 4, 2, 6)


def test_host_validates_settings():
    specs = sparse_learners()
    with pytest.raises(InputError):
        HostState(None, [], HostSettings())
    with pytest.raises(InputError):
        HostState(None, specs, HostSettings(learning_rate=0.0))
    with pytest.raises(InputError):
        HostState(None, specs, HostSettings(max_iters=0))


def test_site_failure_mid_session_surfaces_as_abort():
    parts = split_by_site(make_sites("binomial", 2, n=200, seed=5))
    endpoint, nodes = spawn_simulated_cluster(parts)
    host = HostState(endpoint, sparse_learners(), settings("binomial", 20))
    original = nodes[1].state.apply_selection

    def broken(msg):
        if msg.iteration == 3:
            raise ProtocolError("disk on fire")
        return original(msg)

    nodes[1].state.apply_selection = broken
    # the site handler turns the error into an Abort frame; the host re-raises it
    with pytest.raises(SiteAbort, match="disk on fire") as err:
        host.run()
    assert err.value.site_id == 2
    assert nodes[0].state.phase == "dead"


def test_constant_binomial_response_fails_cleanly():
    data = make_sites("binomial", 2, n=60, seed=3)
    data.columns["y"][:] = 1.0
    parts = split_by_site(data)
    with pytest.raises(DegenerateResponseError, match="constant"):
        fit_distributed(parts, sparse_learners(), settings("binomial", 5, stratify=False))


def test_assembled_model_metadata():
    parts = split_by_site(make_sites("gaussian", 3, n=240, seed=8))
    model, ledger, _ = fit_distributed(parts, sparse_learners(), settings("gaussian", 30))
    md = model.metadata
    assert md["fit"] == "distributed" and md["partial"] is False and md["privacy_level"] == 5
    assert sum(md["site_rows"].values()) == sum(round(0.8 * p.n_rows) for p in parts)
    assert model.sites == [1, 2, 3]
    for s in model.specs:
        assert model.contributions[s.id].shape == (model.coef_dim(s),)
