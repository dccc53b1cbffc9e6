import math

import pytest

from posearch.consensus import EMPTY_JOB_ID, ChainParams, genesis_block
from posearch.core import WORST, Job, Nonce, Reveal, hash_object, node_id, solution_hash
from posearch.evalvm import assemble
from posearch.mining import MinerPolicy, MinerState, SlotWork, make_commit
from posearch.netsim import ScenarioConfig, run_scenario

from conftest import build_chain, tsp_job

CLIENT = node_id("client")


def _miner(name, params, genesis=None, balances=None):
    genesis = genesis or genesis_block(balances or {}, params)
    return MinerState(node_id(name), genesis, params, seed=hash(name) & 0xFFFF)


def test_z8_random_search_needs_about_256_evaluations():
    params = ChainParams(n_target=1, z_min=8, z_max=8)
    m = build_chain(params, 0)
    w = SlotWork(m.node_id, m.tip, 0, 1, MinerPolicy(), 64)
    assert w.job_id == EMPTY_JOB_ID and w.z == 8
    successes = evals = 0
    while successes < 1000:
        evals += 1
        successes += w.attempt().success
    assert abs(evals / successes - 256) < 0.1 * 256


def test_z0_first_evaluation_succeeds():
    params = ChainParams(n_target=3, z_min=0, z_max=0)
    m = build_chain(params, 0)
    for slot in range(3):
        assert SlotWork(m.node_id, m.tip, slot, slot, MinerPolicy(), 64).attempt().success


def test_different_miners_get_different_contexts_and_hashes():
    params = ChainParams(n_target=1, z_min=0, z_max=0)
    g = genesis_block({}, params)
    a, b = _miner("a", params, g), _miner("b", params, g)
    wa = SlotWork(a.node_id, a.tip, 0, 7, MinerPolicy(), 64)
    wb = SlotWork(b.node_id, b.tip, 0, 7, MinerPolicy(), 64)
    assert wa.ctx != wb.ctx
    ma, mb = wa.attempt().miniblock(), wb.attempt().miniblock()
    assert ma.nonce.candidate == mb.nonce.candidate
    assert hash_object(ma) != hash_object(mb)


def test_make_commit():
    jid = bytes([9]) * 32
    a, b = node_id("a"), node_id("b")
    c = make_commit(a, (b"\x01\x02", 40), jid)
    assert c.eval_value == 40 and c.solution_hash == solution_hash(a, b"\x01\x02")
    assert c == make_commit(a, (b"\x01\x02", 40), jid)
    assert make_commit(b, (b"\x01\x02", 40), jid).solution_hash != c.solution_hash
    assert make_commit(a, None, jid) is None
    assert make_commit(a, (b"\x01", WORST), jid) is None


def test_best_found_is_monotone():
    params = ChainParams(n_target=1, z_min=10, z_max=10)
    job, _ = tsp_job(8)
    m = build_chain(params, 1, {0: [job]}, {CLIENT: 10**6})
    assert m.tip.block.schedule[0].job_id == job.job_id
    key = (m.tip.hash, job.job_id)
    history = []
    for _ in range(500):
        a = m.attempt()
        m.complete(a, 0)
        if a.success:
            break
        history.append(m.best_found[key][1])
    assert len(history) > 10 and history[-1] < history[0]
    assert all(x >= y for x, y in zip(history, history[1:]))


def test_new_miniblock_on_own_tip_is_not_a_switch():
    params = ChainParams(n_target=2, z_min=1, z_max=1)
    g = genesis_block({}, params)
    a, b = _miner("a", params, g), _miner("b", params, g)
    w = SlotWork(b.node_id, b.tip, 0, 3, MinerPolicy(), 64)
    mb = next(x for x in iter(w.attempt, None) if x.success).miniblock()
    switched, _ = a.on_new_miniblock(mb)
    assert not switched and a.active.filled_slots() == {0}
    assert a.desired_slot() == 1


def test_miniblock_on_longer_chain_switches():
    params = ChainParams(n_target=1, z_min=1, z_max=1)
    g = genesis_block({}, params)
    a = _miner("a", params, g)
    other = build_chain(params, 2, miner="b")
    b1, b2 = other.active.blocks[1:3]
    assert a.on_new_block(b1) is not None and a.tip.height == 1
    # a miniblock on b2 arrives before b2 itself: it is parked, then b2 switches a over
    w = SlotWork(other.node_id, other.tip, 0, 1, MinerPolicy(), 64)
    mb = next(x for x in iter(w.attempt, None) if x.success).miniblock()
    switched, _ = a.on_new_miniblock(mb)
    assert not switched
    a.on_new_block(b2)
    assert a.tip.height == 2 and a.active.filled_slots() == {0}


def test_invalid_miniblock_ignored():
    params = ChainParams(n_target=2, z_min=1, z_max=1)
    g = genesis_block({}, params)
    a = _miner("a", params, g)
    w = SlotWork(node_id("b"), a.tip, 0, 3, MinerPolicy(), 64)
    mb = next(x for x in iter(w.attempt, None) if x.success).miniblock()
    from dataclasses import replace
    bad = replace(mb, nonce=Nonce(mb.nonce.candidate, mb.nonce.eval_value + 1))
    switched, _ = a.on_new_miniblock(bad)
    assert not switched and a.active.filled_slots() == set()
    assert a.counters["invalid_miniblock:evaluation-mismatch"] == 1


def test_idle_chain_schedules_empty_job():
    params = ChainParams(n_target=3, z_min=2, z_max=2)
    m = build_chain(params, 4)
    assert all(e.job_id == EMPTY_JOB_ID for e in m.tip.block.schedule)
    assert len(m.tip.block.schedule) == 3


def test_unique_best_committer_reveals_once():
    params = ChainParams(n_target=1, z_min=2, z_max=2)
    job, _ = tsp_job(5)
    m = build_chain(params, 3, {0: [job]}, {CLIENT: 10**6})
    rec = m.tip.state.jobs[job.job_id]
    assert rec.phase == "revealing" and rec.group == (m.node_id,)
    reveals = [r for r in m.pools["reveals"] if r.miner_id == m.node_id]
    assert len(reveals) == 1 and isinstance(reveals[0], Reveal)
    # a second pass over the same tip must not emit another
    assert m._tip_actions() == []


def test_crashing_searcher_falls_back_to_random_search():
    params = ChainParams(n_target=1, z_min=3, z_max=3)
    crash = assemble("ADD\nHALT")
    job = Job.create(CLIENT, 100, assemble("PUSH 1\nHALT"), crash, 100)
    m = build_chain(params, 4, {0: [job]}, {CLIENT: 1000})
    assert m.tip.state.jobs[job.job_id].phase in ("revealing", "paid")
    assert m.tip.height == 4


def test_two_miners_win_in_proportion_to_compute():
    cfg = ScenarioConfig.from_dict({
        "name": "ratio", "mode": "faithful", "seed": 3, "duration": 1 << 50, "maxBlocks": 600, "trace": False,
        "nodes": [{"id": "p", "computeRate": 1.0}, {"id": "q", "computeRate": 3.0}],
        "delayModel": {"type": "constant", "d": 0},
        "chainParams": {"N_target": 1, "T": 1_000_000, "zMin": 6, "zMax": 6},
    })
    rep = run_scenario(cfg)
    share = rep.per_node_wins["q"] / sum(rep.per_node_wins.values())
    sd = math.sqrt(0.75 * 0.25 / 600)
    assert abs(share - 0.75) < 3 * sd


def test_policy_from_dict():
    p = MinerPolicy.from_dict({"searchStepBudget": 10, "slotChoice": "random"})
    assert p.search_step_budget == 10 and p.slot_choice == "random"
    with pytest.raises(ValueError):
        MinerPolicy.from_dict({"slotChoice": "sideways"})
