import json
import math
from collections import Counter
from importlib import resources

import pytest

from posearch.netsim import ConfigError, DelayModel, EventQueue, ScenarioConfig, run_scenario


def _cfg(**over):
    base = {
        "name": "t", "mode": "faithful", "seed": 1, "duration": 1 << 50, "maxBlocks": 12,
        "nodes": [{"id": "a", "computeRate": 1.0}, {"id": "b", "computeRate": 1.0}, {"id": "c", "computeRate": 1.0}],
        "delayModel": {"type": "constant", "d": 5000},
        "chainParams": {"N_target": 2, "T": 1_000_000, "zMin": 4, "zMax": 4},
    }
    base.update(over)
    return ScenarioConfig.from_dict(base)


def _bundled(name):
    path = resources.files("posearch") / "data" / "scenarios" / f"{name}.json"
    return ScenarioConfig.from_dict(json.loads(path.read_text()))


def _first_sends(trace):
    first = {}
    for t, node, kind, obj in trace:
        if kind.startswith("send-"):
            first.setdefault(obj, (t, node))
    return first


def test_single_statistical_miner_never_forks():
    cfg = ScenarioConfig.from_dict({
        "name": "solo", "mode": "statistical", "seed": 4, "duration": 100_000_000,
        "nodes": [{"id": "solo", "computeRate": 0.131072}],
        "delayModel": {"type": "constant", "d": 0},
        "chainParams": {"N_target": 1, "T": 1_000_000, "eFloor": 65536.0},
    })
    rep = run_scenario(cfg)
    assert rep.fork_count == 0 and rep.fork_events == 0
    assert abs(rep.height - 100) <= 3 * math.sqrt(100)


def test_two_statistical_miners_fork_at_expected_rate():
    rep = run_scenario(_bundled("pow_two_miners"))
    p = 0.1 * math.exp(-0.2)
    n = rep.fork_heights_evaluated
    assert n >= 1900
    assert abs(rep.fork_rate - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_constant_delay_delivers_at_t_plus_d():
    rep = run_scenario(_cfg())
    first = _first_sends(rep.trace)
    recvs = [(t, obj) for t, _, kind, obj in rep.trace if kind.startswith("recv-")]
    assert recvs
    assert all(t == first[obj][0] + 5000 for t, obj in recvs)


def test_duplicates_delivered_once_under_gossip():
    rep = run_scenario(_cfg(topology="gossip", gossipDegree=2,
                            nodes=[{"id": f"n{i}", "computeRate": 1.0} for i in range(5)]))
    counts = Counter((node, obj) for _, node, kind, obj in rep.trace if kind.startswith("recv-"))
    assert counts and max(counts.values()) == 1
    assert rep.counters["duplicates_dropped"] > 0


def test_per_link_zero_delay():
    matrix = [[0, 0, 7000], [7000, 0, 7000], [7000, 7000, 0]]
    rep = run_scenario(_cfg(delayModel={"type": "perLink", "matrix": matrix}))
    first = _first_sends(rep.trace)
    checked = 0
    for t, node, kind, obj in rep.trace:
        if kind.startswith("recv-") and first[obj][1] == "a":
            assert t == first[obj][0] + (0 if node == "b" else 7000)
            checked += node == "b"
    assert checked > 0


def test_unfunded_client_job_never_scheduled():
    cfg = _cfg(nodes=[{"id": "a", "computeRate": 1.0}, {"id": "poor", "role": "client", "balance": 10}],
               jobs=[{"submitTime": 0, "client": "poor", "charge": 1000, "evalStepBudget": 1 << 20,
                      "problem": {"type": "tsp", "count": 5}}])
    rep = run_scenario(cfg)
    [job] = rep.jobs
    assert job["status"] == "unregistered" and job["rejected"] == ["insufficient-balance"]
    assert rep.ledger["poor"] == 10


def test_two_jobs_from_one_client_both_settle():
    rep = run_scenario(_bundled("two_jobs"))
    assert [j["status"] for j in rep.jobs] == ["paid", "paid"]
    for j in rep.jobs:
        assert j["settledHeight"] == j["scheduledHeight"] + 4
    assert rep.ledger["client"] == 500_000 - 120_000 - 80_000


def test_same_config_same_trace():
    a, b = run_scenario(_cfg()), run_scenario(_cfg())
    assert a.trace == b.trace and a.to_json() == b.to_json()
    c = run_scenario(_cfg(seed=2))
    assert c.trace != a.trace


def test_statistical_same_config_same_trace():
    cfg = _bundled("pow_two_miners")
    assert run_scenario(cfg).trace == run_scenario(cfg).trace


def test_tsp_smoke_pays_at_registration_plus_four():
    rep = run_scenario(_bundled("tsp_smoke"))
    [job] = rep.jobs
    assert job["status"] == "paid" and job["settledHeight"] == job["registeredHeight"] + 4


def test_event_queue_orders_by_time_then_insertion():
    q = EventQueue()
    q.push(5, "x", 1)
    q.push(3, "y", 2)
    q.push(5, "z", 3)
    assert [q.pop()[1] for _ in range(3)] == ["y", "x", "z"]
    assert q.peek_time() is None


@pytest.mark.parametrize("bad", [
    {"mode": "quantum"},
    {"nodes": []},
    {"nodes": [{"id": "a", "computeRate": -1}]},
    {"delayModel": {"type": "uniform", "lo": 5, "hi": 1}},
    {"delayModel": {"type": "perLink", "matrix": [[0]]}},
    {"jobs": [{"submitTime": 0, "client": "ghost", "charge": 1, "evalStepBudget": 10,
               "problem": {"type": "tsp", "count": 5}}]},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        _cfg(**bad)


def test_delay_model_round_trip():
    dm = DelayModel.from_dict({"type": "uniform", "lo": 2, "hi": 9})
    assert DelayModel.from_dict(dm.to_dict()) == dm
    cfg = _cfg()
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
