"""Miner node state machine: chain view, slot search, commits and reveals.

A ``MinerState`` is a full node.  It validates incoming blocks and
miniblocks, follows the preferred chain, keeps pools of items waiting for
inclusion, searches the lowest unfinished slot of its active tip, and
assembles the block when it finds the last miniblock.  With
``mining=False`` it is a plain (client) node.

Time is not modelled here.  ``attempt()`` performs one evaluation and
reports its cost in steps; the network simulator turns steps into time.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterator

from .consensus import (
    EMPTY_JOB_ID, Chain, ChainParams, BlockNode, JobRecord, VerifiedCache, ValidationError,
    _next_group, apply_block, assemble_block, compare_chains, validate_miniblock,
)
from .core import (
    TAG_MINIBLOCK, TAG_NONCE, WORST, Block, Commit, Job, Miniblock, Nonce, Reveal, Transaction,
    derive_seed, eval_context_bytes, hash_object, leading_zero_bits, sha256, solution_hash,
)
from .evalvm import DEFAULT_SEARCH_BUDGET, FALLBACK_FACTOR, SearchSession
from .evalvm.programs import random_search_program
from .settlement import settle_job, split_charge, verified_commits

__all__ = [
    "Attempt", "MinerPolicy", "MinerState", "SlotWork", "make_commit", "settle_job", "split_charge",
    "verified_commits",
]

FALLBACK_MIN_SPACE = 1 << 32  # distinct candidates the fallback search must be able to produce


@dataclass
class MinerPolicy:
    search_step_budget: int = DEFAULT_SEARCH_BUDGET
    fallback_factor: float = FALLBACK_FACTOR
    slot_choice: str = "lowest"  # or "random"
    pool_ttl: int = 8  # blocks an unincluded commit/reveal is kept
    # Repeated candidates hash identically and buy no new chance at a miniblock.
    # After each window of evaluations, a searcher whose share of new
    # candidates fell below min_new_fraction is replaced by the fallback.
    stall_window: int = 256
    min_new_fraction: float = 0.25

    def __post_init__(self):
        if self.slot_choice not in ("lowest", "random"):
            raise ValueError(f"unknown slot choice {self.slot_choice!r}")
        if self.search_step_budget < 1 or self.fallback_factor <= 0 or self.stall_window < 1:
            raise ValueError("policy budgets must be positive")
        if not 0 <= self.min_new_fraction <= 1:
            raise ValueError("minNewFraction must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "MinerPolicy":
        keys = {"searchStepBudget": "search_step_budget", "fallbackFactor": "fallback_factor",
                "slotChoice": "slot_choice", "poolTtl": "pool_ttl",
                "stallWindow": "stall_window", "minNewFraction": "min_new_fraction"}
        unknown = set(d) - set(keys)
        if unknown:
            raise ValueError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**{keys[k]: v for k, v in d.items()})


def _lp(b: bytes) -> bytes:
    return len(b).to_bytes(4, "big") + b


@dataclass
class Attempt:
    cost: int  # steps: searcher + evaluator + hash
    candidate: bytes
    value: int
    digest: bytes
    success: bool
    work: "SlotWork"

    def miniblock(self) -> Miniblock:
        w = self.work
        return Miniblock(w.tip_hash, w.slot, w.miner_id, Nonce(self.candidate, self.value))


class SlotWork:
    """Search state for one slot of one tip."""

    def __init__(self, miner_id: bytes, tip: BlockNode, slot: int, seed: int, policy: MinerPolicy,
                 hash_steps: int):
        entry = tip.block.schedule[slot]
        self.miner_id = miner_id
        self.tip_hash = tip.hash
        self.slot = slot
        self.z = entry.z
        self.job_id = entry.job_id
        self.per_eval_steps = entry.per_eval_steps
        self.job: Job = tip.state.job(entry.job_id)
        self.policy = policy
        self.hash_steps = hash_steps
        self.seed = seed
        self.ctx = eval_context_bytes(tip.hash, slot, miner_id)
        self.prefix = bytes([TAG_MINIBLOCK]) + _lp(tip.hash) + _lp(slot.to_bytes(2, "big")) + _lp(miner_id)
        self.session = SearchSession(self.job.searcher, self.job.evaluator, self.ctx, self.job.eval_step_budget, seed)
        # the empty job's searcher is already the built-in random search
        self.fallback = self.job.is_empty
        self.carry = 0  # steps spent since the last completed evaluation
        self._lengths: Counter = Counter()
        self._max_byte = -1
        self._distinct: set[bytes] = set()
        self._window_evals = 0
        self._window_new = 0
        self.evaluations = 0

    def digest(self, candidate: bytes, value: int) -> bytes:
        nonce = bytes([TAG_NONCE]) + _lp(candidate) + _lp(value.to_bytes(8, "big"))
        return sha256(self.prefix + _lp(nonce))

    def _switch_to_fallback(self) -> None:
        if self._lengths:
            length = self._lengths.most_common(1)[0][0]
            alphabet = max(1, self._max_byte + 1)
        else:
            length, alphabet = 8, 256
        # the fallback exists to produce fresh hashes, so make sure there are enough
        if alphabet ** length < FALLBACK_MIN_SPACE:
            alphabet = 256
            length = max(length, 4)
        self.fallback = True
        self.session = SearchSession(random_search_program(length, alphabet), self.job.evaluator, self.ctx,
                                     self.job.eval_step_budget, derive_seed(self.seed, "fallback"))

    def _too_slow(self) -> bool:
        s = self.session
        return s.searcher_steps > self.policy.fallback_factor * max(1, s.eval_count) * self.per_eval_steps

    def attempt(self) -> Attempt:
        while True:
            s = self.session
            s0, e0 = s.searcher_steps, s.eval_steps
            if self.fallback:
                limit = s0 + (1 << 30)
            else:
                chunk = max(4096, int(self.policy.fallback_factor * self.per_eval_steps))
                limit = min(s0 + chunk, self.policy.search_step_budget)
            got = s.next_eval(limit)
            spent = (s.searcher_steps - s0) + (s.eval_steps - e0)
            self.carry += spent
            if got is None:
                if not self.fallback and (s.finished or s.searcher_steps >= self.policy.search_step_budget
                                          or self._too_slow()):
                    self._switch_to_fallback()
                continue
            candidate, res = got
            stalled = False
            if not self.fallback:
                self._lengths[len(candidate)] += 1
                if candidate:
                    self._max_byte = max(self._max_byte, max(candidate))
                if candidate not in self._distinct:
                    self._distinct.add(candidate)
                    self._window_new += 1
                self._window_evals += 1
                if self._window_evals >= self.policy.stall_window:
                    stalled = self._window_new < self.policy.min_new_fraction * self._window_evals
                    self._window_evals = self._window_new = 0
            value = res.evaluation
            digest = self.digest(candidate, value)
            cost = self.carry + self.hash_steps
            self.carry = 0
            self.evaluations += 1
            if not self.fallback and (stalled or self._too_slow()):
                self._switch_to_fallback()
            return Attempt(cost, candidate, value, digest, leading_zero_bits(digest) >= self.z, self)


def make_commit(node_id: bytes, best: tuple[bytes, int] | None, job_id: bytes) -> Commit | None:
    """Commit to the best evaluation found; abstain without a usable one."""
    if best is None or best[1] == WORST:
        return None
    candidate, value = best
    return Commit(job_id, node_id, value, solution_hash(node_id, candidate))


_POOL_KINDS = {Transaction: "txs", Job: "jobs", Commit: "commits", Reveal: "reveals"}


class MinerState:
    def __init__(self, node_id: bytes, genesis: Block, params: ChainParams, policy: MinerPolicy | None = None,
                 seed: int = 0, mining: bool = True):
        self.node_id = node_id
        self.params = params
        self.policy = policy or MinerPolicy()
        self.seed = seed
        self.mining = mining
        self.cache = VerifiedCache()
        root = apply_block(None, genesis, params)
        self.genesis_hash = root.hash
        self.nodes: dict[bytes, BlockNode] = {root.hash: root}
        self.cache.blocks[root.hash] = root
        self.chains: dict[bytes, Chain] = {root.hash: Chain(root)}
        self.active = self.chains[root.hash]
        self.orphan_blocks: dict[bytes, list[Block]] = {}
        self.orphan_mbs: dict[bytes, list[Miniblock]] = {}
        self.pools: dict[str, dict] = {k: {} for k in _POOL_KINDS.values()}
        self.best_found: dict[tuple[bytes, bytes], tuple[bytes, int]] = {}
        self.committed: dict[tuple[bytes, bytes], bytes] = {}
        self.sent: set = set()
        self.work: SlotWork | None = None
        self.counters: Counter = Counter()
        self.rejected_jobs: dict[bytes, str] = {}
        self._slot_memo: tuple | None = None

    # -- chain view ---------------------------------------------------------

    @property
    def tip(self) -> BlockNode:
        return self.active.tip

    def receive_item(self, item) -> None:
        kind = _POOL_KINDS.get(type(item))
        if kind is None:
            raise TypeError(f"not a pool item: {type(item).__name__}")
        self.pools[kind].setdefault(item, self.tip.height)

    def _insert_block(self, block: Block) -> BlockNode | None:
        parent = self.nodes.get(block.prev_block_hash)
        if parent is None:
            self.orphan_blocks.setdefault(block.prev_block_hash, []).append(block)
            self.counters["orphan_blocks"] += 1
            return None
        try:
            node = apply_block(parent, block, self.params, full=True, cache=self.cache)
        except ValidationError as exc:
            self.counters[f"invalid_block:{exc.code}"] += 1
            return None
        self.nodes[node.hash] = node
        self.cache.blocks[node.hash] = node
        chain = Chain(node)
        for mb in self.orphan_mbs.pop(node.hash, []):
            chain = self._extend(chain, mb) or chain
        self.chains[node.hash] = chain
        return node

    def _extend(self, chain: Chain, mb: Miniblock) -> Chain | None:
        if mb.job_slot in chain.filled_slots():
            return None
        try:
            validate_miniblock(mb, chain.tip, self.cache)
        except ValidationError as exc:
            self.counters[f"invalid_miniblock:{exc.code}"] += 1
            return None
        return chain.with_miniblock(mb)

    def on_new_block(self, block: Block, now: int = 0) -> list:
        """Validate and store a block (and any orphans it unlocks); switch if preferred."""
        if hash_object(block) in self.nodes:
            return []
        node = self._insert_block(block)
        if node is None:
            return []
        added = [node]
        queue = [node.hash]
        while queue:
            ph = queue.pop()
            for child in self.orphan_blocks.pop(ph, []):
                n = self._insert_block(child)
                if n is not None:
                    added.append(n)
                    queue.append(n.hash)
        best = self.active
        for n in added:
            cand = self.chains[n.hash]
            if compare_chains(cand, best) > 0:
                best = cand
        return self._switch(best, now)

    def on_new_miniblock(self, mb: Miniblock, now: int = 0) -> tuple[bool, list]:
        """Returns (switched, actions).  Extending the active tip is not a switch."""
        node = self.nodes.get(mb.prev_block_hash)
        if node is None:
            self.orphan_mbs.setdefault(mb.prev_block_hash, []).append(mb)
            return False, []
        chain = self.chains.get(node.hash) or Chain(node)
        new = self._extend(chain, mb)
        if new is None:
            return False, []
        self.chains[node.hash] = new
        if node.hash == self.tip.hash:
            self.active = new
            return False, []
        if compare_chains(new, self.active) > 0:
            return True, self._switch(new, now)
        return False, []

    def _switch(self, new: Chain, now: int) -> list:
        old = self.active
        if new is old:
            return []
        self.active = new
        if new.tip is old.tip:
            return []
        self._reorg_pools(old.tip, new.tip)
        return self._tip_actions()

    def _reorg_pools(self, old: BlockNode, new: BlockNode) -> None:
        a, b = old, new
        dropped, adopted = [], []
        while a.height > b.height:
            dropped.append(a)
            a = a.parent
        while b.height > a.height:
            adopted.append(b)
            b = b.parent
        while a is not b:
            dropped.append(a)
            adopted.append(b)
            a, b = a.parent, b.parent
        h = new.height
        for n in dropped:
            for item in _block_items(n.block):
                self.pools[_POOL_KINDS[type(item)]].setdefault(item, h)
        for n in adopted:
            for item in _block_items(n.block):
                self.pools[_POOL_KINDS[type(item)]].pop(item, None)
        self._prune(new)

    def _prune(self, tip: BlockNode) -> None:
        st = tip.state
        ttl = self.policy.pool_ttl
        self.pools["txs"] = {t: h for t, h in self.pools["txs"].items() if t.seq >= st.tx_seq.get(t.sender, 0)}
        self.pools["jobs"] = {j: h for j, h in self.pools["jobs"].items() if j.job_id not in st.jobs}

        def live(item, added):
            rec = st.jobs.get(item.job_id)
            if rec is not None and rec.settled:
                return False
            return tip.height - added <= ttl

        self.pools["commits"] = {c: h for c, h in self.pools["commits"].items() if live(c, h)}
        self.pools["reveals"] = {r: h for r, h in self.pools["reveals"].items() if live(r, h)}

    # -- commit / reveal ----------------------------------------------------

    def make_commit(self, sched_hash: bytes, job_id: bytes) -> Commit | None:
        key = (sched_hash, job_id)
        best = self.best_found.get(key)
        c = make_commit(self.node_id, best, job_id)
        if c is not None:
            self.committed[key] = best[0]
        return c

    def _tip_actions(self) -> list:
        """Commits and reveals due now that the active tip changed."""
        if not self.mining:
            return []
        tip = self.tip
        H = tip.height
        out = []
        for jid in tip.state.active:
            rec: JobRecord = tip.state.jobs[jid]
            key = (rec.sched_block_hash, jid)
            if rec.phase == "scheduled" and rec.scheduled_height == H - 1:
                if ("commit",) + key not in self.sent:
                    c = self.make_commit(*key)
                    if c is not None:
                        self.sent.add(("commit",) + key)
                        out.append(c)
            elif rec.phase == "revealing" and rec.scheduled_height == H - 2:
                if self.node_id in rec.group:
                    out += self._reveal(key)
            elif rec.phase == "revealing" and rec.scheduled_height == H - 3:
                group, _ = _next_group(rec)
                if self.node_id in group and not settle_job(rec.commits, rec.reveals, rec.job, rec.execution_ctxs()):
                    out += self._reveal(key)
        for item in out:
            self.receive_item(item)
        return out

    def _reveal(self, key) -> list:
        if ("reveal",) + key in self.sent or key not in self.committed:
            return []
        self.sent.add(("reveal",) + key)
        return [Reveal(key[1], self.node_id, self.committed[key])]

    # -- mining -------------------------------------------------------------

    def desired_slot(self) -> int | None:
        memo = self._slot_memo
        if memo is not None and memo[0] is self.active:
            return memo[1]
        slot = self._pick_slot()
        self._slot_memo = (self.active, slot)
        return slot

    def _pick_slot(self) -> int | None:
        sched = self.tip.block.schedule
        filled = self.active.filled_slots()
        open_slots = [k for k in range(len(sched)) if k not in filled]
        if not open_slots:
            return None
        if self.policy.slot_choice == "random" and len(open_slots) > 1:
            r = derive_seed(self.seed, self.tip.hash, len(filled)) % len(open_slots)
            return open_slots[r]
        return open_slots[0]

    def current_work(self) -> SlotWork | None:
        if not self.mining:
            return None
        slot = self.desired_slot()
        if slot is None:
            self.work = None
            return None
        w = self.work
        if w is None or w.tip_hash != self.tip.hash or w.slot != slot:
            w = SlotWork(self.node_id, self.tip, slot, derive_seed(self.seed, self.tip.hash, slot), self.policy,
                         self.params.hash_steps)
            self.work = w
        return w

    def attempt(self) -> Attempt | None:
        """One evaluation on the current slot, with its cost.  None when idle."""
        w = self.current_work()
        if w is None:
            return None
        return w.attempt()

    def complete(self, attempt: Attempt, now: int) -> list:
        """Account a finished attempt; returns messages to broadcast."""
        w = attempt.work
        if w.job_id != EMPTY_JOB_ID:
            key = (w.tip_hash, w.job_id)
            prev = self.best_found.get(key)
            if prev is None or attempt.value < prev[1]:
                self.best_found[key] = (attempt.candidate, attempt.value)
        if attempt.success:
            return self.found(attempt, now)
        return []

    def found(self, attempt: Attempt, now: int) -> list:
        """Adopt our own successful attempt.  Returns messages to broadcast:
        the miniblock, or the assembled block when it was the last slot."""
        self.counters["miniblocks_found"] += 1
        mb = attempt.miniblock()
        node = self.nodes.get(mb.prev_block_hash)
        if node is None:
            return []
        chain = self.chains.get(node.hash) or Chain(node)
        if mb.job_slot in chain.filled_slots():
            return []
        chain = chain.with_miniblock(mb)
        self.chains[node.hash] = chain
        if not chain.is_complete():
            if node.hash == self.tip.hash:
                self.active = chain
                return [mb]
            if compare_chains(chain, self.active) > 0:
                return [mb] + self._switch(chain, now)
            return [mb]
        block = self.assemble(chain, now)
        out: list = [block]
        new_node = self._insert_block(block)
        if new_node is None:  # pragma: no cover - honest assembly always validates
            raise RuntimeError("assembled block failed validation")
        cand = self.chains[new_node.hash]
        if compare_chains(cand, self.active) > 0:
            out += self._switch(cand, now)
        return out

    def assemble(self, chain: Chain, now: int) -> Block:
        p = self.pools
        block, dropped = assemble_block(
            chain.tip, chain.pending, self.params, max(now, chain.tip.block.timestamp),
            transactions=sorted(p["txs"], key=lambda t: (t.sender, t.seq)),
            jobs=list(p["jobs"]), commits=list(p["commits"]), reveals=list(p["reveals"]),
        )
        for item, code in dropped.items():
            if isinstance(item, Job):
                self.rejected_jobs.setdefault(item.job_id, code)
        return block

    def mine_interval(self, stop=None, max_attempts: int | None = None) -> Iterator[tuple[Attempt, list]]:
        """Search the active tip's open slots, yielding every successful attempt
        with the messages it produced, until the tip changes, ``stop()`` is true,
        or ``max_attempts`` evaluations were made."""
        tip = self.tip.hash
        n = 0
        while self.tip.hash == tip and (max_attempts is None or n < max_attempts):
            if stop is not None and stop():
                return
            a = self.attempt()
            if a is None:
                return
            n += 1
            msgs = self.complete(a, 0)
            if a.success:
                yield a, msgs


def _block_items(block: Block):
    yield from block.transactions
    yield from block.new_jobs
    yield from block.commits
    yield from block.reveals
