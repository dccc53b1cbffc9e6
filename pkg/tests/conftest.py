import random

import pytest

from posearch.consensus import ChainParams, genesis_block
from posearch.core import Job, node_id
from posearch.evalvm.programs import random_cities, tsp_evaluator, tsp_searcher
from posearch.mining import MinerState


def build_chain(params, blocks, items_at=None, balances=None, miner="alice", seed=0):
    """Mine ``blocks`` blocks with a single honest miner.

    ``items_at`` maps a tip height to pool items (jobs, transactions,
    commits, reveals) handed to the miner while that height is the tip.
    Returns the miner so tests can inspect its chain.
    """
    items_at = items_at or {}
    m = MinerState(node_id(miner), genesis_block(balances or {}, params), params, seed=seed)
    now = 0
    fed = set()
    while m.tip.height < blocks:
        h = m.tip.height
        if h not in fed:
            for item in items_at.get(h, ()):
                m.receive_item(item)
            fed.add(h)
        a = m.attempt()
        now += a.cost
        m.complete(a, now)
    return m


def tsp_job(n, client="client", charge=1000, salt=0, seed=0, budget=1 << 22):
    cities = random_cities(n, random.Random(seed))
    job = Job.create(node_id(client), charge, tsp_evaluator(cities), tsp_searcher(n), budget, salt=salt)
    return job, cities


@pytest.fixture
def low_z_params():
    return ChainParams(n_target=2, z_min=3, z_max=3)
