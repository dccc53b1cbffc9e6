import random
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from posearch.consensus import (
    EMPTY_JOB_ID, REFERENCE_STEPS, ChainParams, Chain, DifficultyState, ValidationError, apply_block,
    compact_chain, compare_chains, compute_rewards, difficulty_from_window, schedule_jobs, validate_miniblock,
    verify_chain,
)
from posearch.core import Job, Nonce, Transaction, canonical_encode, hash_object, node_id
from posearch.evalvm.programs import constant_evaluator, random_search_program
from posearch.mining import SlotWork, MinerPolicy
from posearch.settlement import split_charge

from conftest import build_chain, tsp_job

CLIENT = node_id("client")


def _job(charge, salt=0):
    return Job.create(CLIENT, charge, constant_evaluator(1), random_search_program(4), 100, salt=salt)


# -- difficulty and rewards ---------------------------------------------------


def test_difficulty_for_reference_job():
    params = ChainParams(z_min=0, z_max=64)
    job = _job(25)
    [entry] = schedule_jobs([job], DifficultyState(E=2.0**20, C=100.0), {job.job_id: REFERENCE_STEPS}, params)
    assert entry.z == 18


def test_difficulty_drops_with_costlier_evaluations():
    params = ChainParams(z_min=0, z_max=64)
    job = _job(25)
    [entry] = schedule_jobs([job], DifficultyState(E=2.0**20, C=100.0), {job.job_id: 8 * REFERENCE_STEPS}, params)
    assert entry.z == 15


def test_difficulty_is_clamped():
    params = ChainParams(z_min=10, z_max=12)
    cheap, rich = _job(1), _job(10**9, salt=1)
    steps = {cheap.job_id: REFERENCE_STEPS, rich.job_id: REFERENCE_STEPS}
    ds = DifficultyState(E=2.0**20, C=10.0**9)
    assert [e.z for e in schedule_jobs([rich], ds, steps, params)] == [12]
    assert [e.z for e in schedule_jobs([cheap], ds, steps, params)] == [10]


def test_fifo_selection_up_to_twice_average_charge():
    params = ChainParams(z_min=0, z_max=64)
    jobs = [_job(c, salt=i) for i, c in enumerate([60, 60, 60, 10])]
    steps = {j.job_id: REFERENCE_STEPS for j in jobs}
    picked = schedule_jobs(jobs, DifficultyState(E=1024.0, C=70.0), steps, params)
    assert [e.job_id for e in picked] == [jobs[0].job_id, jobs[1].job_id]


def test_oversized_first_job_is_still_taken():
    params = ChainParams(z_min=0, z_max=64)
    big = _job(10**6)
    picked = schedule_jobs([big], DifficultyState(E=1024.0, C=1.0), {big.job_id: REFERENCE_STEPS}, params)
    assert [e.job_id for e in picked] == [big.job_id]


def test_empty_schedule_fills_n_target_slots():
    params = ChainParams(n_target=4, z_min=0, z_max=64)
    sched = schedule_jobs([], DifficultyState(E=2.0**16, C=1.0), {}, params)
    assert len(sched) == 4 and all(e.job_id == EMPTY_JOB_ID and e.z == 14 for e in sched)


def test_difficulty_window_measures_throughput():
    params = ChainParams(block_time=100)
    ds = difficulty_from_window([(1000.0, 50, 10), (3000.0, 150, 30)], params)
    assert ds.E == pytest.approx(2000.0) and ds.C == pytest.approx(20.0)
    empty = difficulty_from_window([], params)
    assert (empty.E, empty.C) == (params.e_floor, params.c_floor)


def test_rewards_examples():
    assert compute_rewards([3, 3, 4], 64) == [16, 16, 32]
    assert compute_rewards([1], 100) == [100]
    assert compute_rewards([1, 1, 1], 10) == [3, 3, 4]
    assert compute_rewards([5, 1, 5, 2], 7) == [3, 0, 4, 0]


@given(st.lists(st.integers(0, 40), min_size=1, max_size=20), st.integers(0, 10**12))
def test_rewards_conserve_total(zs, reward):
    shares = compute_rewards(zs, reward)
    assert sum(shares) == reward and all(s >= 0 for s in shares)


def test_rewards_proportional_to_work_within_one_coin():
    rng = random.Random(5)
    for _ in range(200):
        zs = [rng.randint(0, 20) for _ in range(rng.randint(1, 8))]
        R = rng.randint(1, 10**9)
        total = sum(2**z for z in zs)
        for z, s in zip(zs, compute_rewards(zs, R)):
            assert abs(s - R * 2**z / total) < len(zs) + 1


# -- chain building, validation and tampering ----------------------------------


def _params(**kw):
    base = dict(n_target=2, z_min=3, z_max=3)
    base.update(kw)
    return ChainParams(**base)


def test_honest_chain_verifies_and_job_settles():
    params = _params(n_target=1)
    job, _ = tsp_job(6)
    m = build_chain(params, 8, {0: [job]}, {CLIENT: 5000})
    rep = verify_chain(m.active, params)
    assert rep.ok
    rec = m.tip.state.jobs[job.job_id]
    assert rec.phase == "paid" and rec.settled_height == rec.scheduled_height + 4
    assert m.active.ledger[CLIENT] == 4000
    assert m.tip.state.supply == 5000 + 8 * params.reward


def _tamper_block(blocks, k, mb):
    b = blocks[k]
    mbs = list(b.miniblocks)
    mbs[mb.job_slot] = mb
    hashes = list(b.miniblock_hashes)
    hashes[mb.job_slot] = hash_object(mb)
    out = list(blocks)
    out[k] = replace(b, miniblocks=tuple(mbs), miniblock_hashes=tuple(hashes))
    return out


@pytest.fixture(scope="module")
def tsp_chain():
    params = _params(n_target=1)
    job, _ = tsp_job(6)
    m = build_chain(params, 6, {0: [job]}, {CLIENT: 5000})
    return params, m, job


def test_tampered_eval_value_rejected(tsp_chain):
    params, m, _ = tsp_chain
    blocks = m.active.blocks
    mb = blocks[3].miniblocks[0]
    bad = replace(mb, nonce=Nonce(mb.nonce.candidate, mb.nonce.eval_value + 1))
    rep = verify_chain((_tamper_block(blocks, 3, bad), []), params)
    assert not rep.ok and rep.code == "evaluation-mismatch" and rep.height == 3


def test_tampered_tsp_candidate_rejected(tsp_chain):
    params, m, job = tsp_chain
    blocks = m.active.blocks
    # block 2 carries the miniblock for the slot scheduled in block 1
    assert blocks[1].schedule[0].job_id == job.job_id
    mb = blocks[2].miniblocks[0]
    cand = bytearray(mb.nonce.candidate)
    cand[0] ^= 1
    bad = replace(mb, nonce=Nonce(bytes(cand), mb.nonce.eval_value))
    rep = verify_chain((_tamper_block(blocks, 2, bad), []), params)
    assert rep.code == "evaluation-mismatch" and rep.height == 2


def _failing_attempt(m, parent, slot=0):
    w = SlotWork(m.node_id, parent, slot, 99, MinerPolicy(), 64)
    while True:
        a = w.attempt()
        if not a.success:
            return a.miniblock()


def test_insufficient_zeros_rejected(tsp_chain):
    params, m, _ = tsp_chain
    node = m.tip.ancestors()[3]
    with pytest.raises(ValidationError) as exc:
        validate_miniblock(_failing_attempt(m, node), node)
    assert exc.value.code == "insufficient-zeros"


def test_parent_mismatch_rejected(tsp_chain):
    params, m, _ = tsp_chain
    nodes = m.tip.ancestors()
    mb = nodes[4].block.miniblocks[0]  # built on block 3
    with pytest.raises(ValidationError) as exc:
        validate_miniblock(mb, nodes[2])
    assert exc.value.code == "parent-mismatch"


def test_broken_hash_link_and_bad_mint(tsp_chain):
    params, m, _ = tsp_chain
    blocks = list(m.active.blocks)
    relinked = blocks[:4] + [replace(blocks[4], prev_block_hash=bytes(32))] + blocks[5:]
    assert verify_chain((relinked, []), params).code == "hash-link-broken"
    b = blocks[4]
    greedy = replace(b, payouts=(replace(b.payouts[0], amount=b.payouts[0].amount + 1),) + b.payouts[1:])
    assert verify_chain((blocks[:4] + [greedy], []), params).code == "mint-mismatch"


def test_expected_tip_mismatch(tsp_chain):
    params, m, _ = tsp_chain
    assert verify_chain(m.active, params, expected_tip=m.tip.hash).ok
    assert verify_chain(m.active, params, expected_tip=bytes(32)).code == "tip-mismatch"


def test_transactions_checked_for_balance_and_sequence():
    params = _params()
    m = build_chain(params, 1, balances={CLIENT: 100})
    parent = m.tip
    from posearch.consensus import assemble_block
    mbs = [_honest(m, parent, k) for k in range(2)]
    txs = [Transaction(CLIENT, node_id("bob"), 60, 0), Transaction(CLIENT, node_id("bob"), 60, 1),
           Transaction(CLIENT, node_id("bob"), 10, 5)]
    block, dropped = assemble_block(parent, mbs, params, parent.block.timestamp, transactions=txs)
    assert block.transactions == (txs[0],)
    assert dropped == {txs[1]: "insufficient-balance", txs[2]: "transaction-invalid"}
    node = apply_block(parent, block, params)
    assert node.state.balance(node_id("bob")) == 60
    forged = replace(block, transactions=tuple(txs[:2]))
    with pytest.raises(ValidationError) as exc:
        apply_block(parent, forged, params)
    assert exc.value.code == "insufficient-balance"


def _honest(m, parent, slot):
    w = SlotWork(m.node_id, parent, slot, slot, MinerPolicy(), 64)
    while True:
        a = w.attempt()
        if a.success:
            return a.miniblock()


def test_unaffordable_job_not_registered():
    params = _params()
    m = build_chain(params, 1, balances={CLIENT: 10})
    from posearch.consensus import assemble_block
    job, _ = tsp_job(5, charge=11)
    block, dropped = assemble_block(m.tip, [_honest(m, m.tip, k) for k in range(2)], params,
                                    m.tip.block.timestamp, jobs=[job])
    assert block.new_jobs == () and dropped == {job: "insufficient-balance"}


def test_fork_choice_prefers_height_then_miniblocks_then_lower_id():
    params = _params()
    a = build_chain(params, 3, miner="a")
    b = build_chain(params, 3, miner="b")
    assert compare_chains(a.active, Chain(a.tip.parent)) > 0
    parent_chain = Chain(a.tip)
    more = parent_chain.with_miniblock(_honest(a, a.tip, 0))
    assert compare_chains(more, parent_chain) > 0
    ca, cb = Chain(a.tip), Chain(b.tip)
    lower = ca if ca.tip_id < cb.tip_id else cb
    higher = cb if lower is ca else ca
    assert compare_chains(lower, higher) > 0 and compare_chains(higher, lower) < 0
    assert compare_chains(ca, Chain(a.tip)) == 0


def test_split_charge_gives_remainder_to_lowest_id():
    ids = [node_id(3), node_id(1), node_id(2)]
    assert split_charge(10, ids) == [(node_id(1), 4), (node_id(2), 3), (node_id(3), 3)]
    assert split_charge(9, ids[:1]) == [(node_id(3), 9)]


def test_compaction_shrinks_and_keeps_ledger():
    params = _params(n_target=1, verify_depth=4)
    jobs = {h: [tsp_job(6, salt=h)[0]] for h in range(0, 10)}
    m = build_chain(params, 20, jobs, {CLIENT: 10**6})
    full = m.active
    small = compact_chain(full, params)
    def size(c):
        return sum(len(canonical_encode(b)) for b in c.blocks)

    assert size(small) < size(full)
    rep = verify_chain(small, params)
    assert rep.ok and rep.chain.ledger == full.ledger and rep.chain.tip_id == full.tip_id
    assert all(b.miniblocks is None for b in small.blocks[1:20 - 4 + 1])
    # compacting deeper than the verifier expects leaves it without bodies it needs
    too_deep = verify_chain(compact_chain(full, replace(params, verify_depth=2)), params)
    assert not too_deep.ok and too_deep.code == "missing-body"


def test_retained_bodies_past_horizon_are_bound_to_header():
    params = _params(n_target=1, verify_depth=4)
    m = build_chain(params, 12, {h: [_job(10, salt=h)] for h in range(3)}, {CLIENT: 10**6})
    blocks = m.active.blocks
    k = next(i for i, b in enumerate(blocks) if b.new_jobs)
    assert k < 12 - 4
    job = blocks[k].new_jobs[0]
    # unreachable trailing instruction: execution is unchanged, the job id is not
    padded = replace(job, evaluator=type(job.evaluator)(job.evaluator.instructions + ((1, 7),)))
    bad = replace(blocks[k], new_jobs=(padded,) + blocks[k].new_jobs[1:])
    assert hash_object(bad) == hash_object(blocks[k])
    assert verify_chain((blocks[:k] + [bad] + blocks[k + 1:], []), params).code == "job-invalid"

    mb = blocks[k].miniblocks[0]
    forged = replace(mb, nonce=Nonce(mb.nonce.candidate, mb.nonce.eval_value + 1))
    bad = replace(blocks[k], miniblocks=(forged,) + blocks[k].miniblocks[1:])
    assert verify_chain((blocks[:k] + [bad] + blocks[k + 1:], []), params).code == "incomplete-miniblocks"


def test_rejects_block_with_missing_miniblocks():
    params = _params()
    m = build_chain(params, 2)
    blocks = m.active.blocks
    b = blocks[2]
    short = replace(b, miniblocks=b.miniblocks[:1], miniblock_hashes=b.miniblock_hashes[:1])
    assert verify_chain((blocks[:2] + [short], []), params).code == "incomplete-miniblocks"
