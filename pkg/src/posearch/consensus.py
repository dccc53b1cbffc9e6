"""Chain rules: difficulty, rewards, validation, fork choice and compaction.

Job lifecycle, for a job scheduled in block ``s``:

* ``s``: registered (charge escrowed) and, if selected, scheduled;
* ``s+1``: carries the miniblocks mined for it;
* ``s+2``: miners' commits (value and hashed solution);
* ``s+3``: reveals from the best-value group;
* ``s+4``: charge paid to the verified best, or, if nobody in the group
  verified, the next-best group may reveal in this block;
* ``s+5``: retry settlement, otherwise the charge goes back to the client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .core import (
    CHARGE, GENESIS, MINT, REFUND, TAG_TIP, WORST, ZERO_HASH, Block, Commit, Job, Miniblock,
    Payout, Reveal, ScheduleEntry, Transaction, check_amount, derive_seed, eval_context_bytes,
    hash_object, leading_zero_bits, solution_hash, tagged_hash,
)
from .evalvm import (
    EvalContext, ProgramError, execute_evaluator, measure_eval_steps, validate_evaluator,
    validate_program,
)
from .evalvm.programs import constant_evaluator, random_search_program
from .settlement import settle_job

MAX_SLOTS = 1024


# ---------------------------------------------------------------------------
# parameters and errors


@dataclass(frozen=True)
class ChainParams:
    n_target: int = 1
    reward: int = 1_000_000
    block_time: int = 1_000_000
    window: int = 16
    z_min: int = 4
    z_max: int = 40
    verify_depth: int = 10
    e_floor: float = float(1 << 16)
    c_floor: float = 1.0
    hash_steps: int = 64

    def __post_init__(self):
        if self.n_target < 1:
            raise ValueError("N_target must be >= 1")
        if not 0 <= self.z_min <= self.z_max <= 255:
            raise ValueError("need 0 <= zMin <= zMax <= 255")
        if self.verify_depth < 1:
            raise ValueError("verifyDepth must be >= 1")
        if self.window < 1 or self.block_time < 1:
            raise ValueError("window and T must be positive")
        if self.e_floor <= 0 or self.c_floor <= 0:
            raise ValueError("floors must be positive")
        check_amount(self.reward)

    _KEYS = {
        "N_target": "n_target", "R": "reward", "T": "block_time", "window": "window",
        "zMin": "z_min", "zMax": "z_max", "verifyDepth": "verify_depth", "eFloor": "e_floor",
        "cFloor": "c_floor", "hashSteps": "hash_steps",
    }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainParams":
        unknown = set(d) - set(cls._KEYS)
        if unknown:
            raise ValueError(f"unknown chain parameters: {sorted(unknown)}")
        return cls(**{cls._KEYS[k]: v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: getattr(self, attr) for k, attr in self._KEYS.items()}


class ValidationError(Exception):
    def __init__(self, code: str, detail: str = "", height: int | None = None):
        self.code = code
        self.detail = detail
        self.height = height
        where = f" at height {height}" if height is not None else ""
        super().__init__(f"{code}{where}" + (f": {detail}" if detail else ""))


def _require(cond, code: str, detail: str = "") -> None:
    if not cond:
        raise ValidationError(code, detail)


# ---------------------------------------------------------------------------
# the empty job and per-evaluation cost

EMPTY_JOB = Job.create(bytes(8), 0, constant_evaluator(0), random_search_program(8), 16, is_empty=True)
EMPTY_JOB_ID = EMPTY_JOB.job_id
STEP_SAMPLES = 16

_steps_cache: dict[bytes, int] = {}


def per_eval_steps(job: Job) -> int:
    """Average evaluator steps for a job, measured deterministically from its id."""
    got = _steps_cache.get(job.job_id)
    if got is None:
        if job.evaluator is None:
            raise ValidationError("missing-body", "job programs were compacted")
        mean = measure_eval_steps(job.evaluator, STEP_SAMPLES, derive_seed(job.job_id),
                                  budget=job.eval_step_budget)
        got = max(1, math.floor(mean + 0.5))
        _steps_cache[job.job_id] = got
    return got


REFERENCE_STEPS = per_eval_steps(EMPTY_JOB)


# ---------------------------------------------------------------------------
# difficulty and rewards


@dataclass(frozen=True)
class DifficultyState:
    E: float
    C: float


def block_work(schedule: Iterable[ScheduleEntry]) -> float:
    """Expected reference-cost evaluations needed to complete a schedule."""
    return sum((1 << e.z) * e.per_eval_steps / REFERENCE_STEPS for e in schedule)


def difficulty_from_window(recent: Sequence[tuple[float, int, int]], params: ChainParams) -> DifficultyState:
    """``recent`` holds (work, block interval, new charges) per block."""
    if not recent:
        return DifficultyState(params.e_floor, params.c_floor)
    work = sum(w for w, _, _ in recent)
    elapsed = sum(dt for _, dt, _ in recent)
    E = work / (elapsed / params.block_time) if elapsed > 0 else params.e_floor
    C = sum(c for _, _, c in recent) / len(recent)
    return DifficultyState(E if E > 0 else params.e_floor, max(C, params.c_floor))


def measure_difficulty_state(chain, params: ChainParams) -> DifficultyState:
    node = chain.tip if isinstance(chain, Chain) else chain
    return difficulty_from_window(node.state.recent, params)


def _round(x: float) -> int:
    return math.floor(x + 0.5)


def _clamp(z: int, params: ChainParams) -> int:
    return max(params.z_min, min(params.z_max, z))


def schedule_jobs(pending: Sequence[Job], ds: DifficultyState, steps, params: ChainParams) -> list[ScheduleEntry]:
    """Pick jobs FIFO up to twice the average charge and size their difficulty.

    The first pending job is always taken so an oversized charge cannot
    starve the queue.  ``steps`` maps jobId to measured steps per evaluation.
    """
    chosen: list[Job] = []
    total = 0
    for job in pending:
        if len(chosen) >= MAX_SLOTS or (chosen and total + job.charge > 2 * ds.C):
            break
        chosen.append(job)
        total += job.charge
    if not chosen:
        z = _clamp(_round(math.log2(ds.E / params.n_target)), params)
        return [ScheduleEntry(EMPTY_JOB_ID, z, REFERENCE_STEPS)] * params.n_target
    out = []
    for job in chosen:
        s_j = steps[job.job_id]
        raw = math.log2(job.charge * ds.E / ds.C) - math.log2(s_j / REFERENCE_STEPS)
        out.append(ScheduleEntry(job.job_id, _clamp(_round(raw), params), s_j))
    return out


def compute_rewards(zs: Sequence[int], reward: int) -> list[int]:
    """Split ``reward`` in proportion to 2**z.

    Leftover coins go to the largest z, the last such slot on ties.
    """
    if not zs:
        raise ValueError("need at least one slot")
    weights = [1 << z for z in zs]
    total = sum(weights)
    shares = [reward * w // total for w in weights]
    top = max(range(len(zs)), key=lambda k: (zs[k], k))
    shares[top] += reward - sum(shares)
    return shares


def eval_context_for(prev_block_hash: bytes, job_slot: int, miner_id: bytes) -> EvalContext:
    return EvalContext(eval_context_bytes(prev_block_hash, job_slot, miner_id))


# ---------------------------------------------------------------------------
# ledger state


@dataclass(frozen=True)
class JobRecord:
    job: Job
    order: int
    phase: str = "pending"  # pending, scheduled, revealing, retry, paid, refunded
    scheduled_height: int = -1
    slot: int = -1
    sched_block_hash: bytes = ZERO_HASH
    commits: tuple = ()
    group: tuple = ()  # miners currently allowed to reveal
    group_value: int = WORST
    reveals: tuple = ()
    settled_height: int = -1
    paid_to: tuple = ()

    @property
    def settled(self) -> bool:
        return self.phase in ("paid", "refunded")

    def execution_ctxs(self) -> dict[bytes, EvalContext]:
        return {c.miner_id: eval_context_for(self.sched_block_hash, self.slot, c.miner_id) for c in self.commits}


class LedgerState:
    """Per-block snapshot.  Never mutate one that is attached to a BlockNode."""

    __slots__ = ("balances", "escrow", "tx_seq", "jobs", "queue", "active", "recent", "job_counter", "supply")

    def __init__(self):
        self.balances: dict[bytes, int] = {}
        self.escrow: dict[bytes, int] = {}
        self.tx_seq: dict[bytes, int] = {}
        self.jobs: dict[bytes, JobRecord] = {}
        self.queue: tuple = ()  # registered, not yet scheduled
        self.active: tuple = ()  # scheduled, not yet settled
        self.recent: tuple = ()
        self.job_counter = 0
        self.supply = 0

    def copy(self) -> "LedgerState":
        st = LedgerState()
        st.balances = dict(self.balances)
        st.escrow = dict(self.escrow)
        st.tx_seq = dict(self.tx_seq)
        st.jobs = dict(self.jobs)
        st.queue = self.queue
        st.active = self.active
        st.recent = self.recent
        st.job_counter = self.job_counter
        st.supply = self.supply
        return st

    def balance(self, nid: bytes) -> int:
        return self.balances.get(nid, 0)

    def credit(self, nid: bytes, amount: int) -> None:
        self.balances[nid] = check_amount(self.balance(nid) + amount)

    def debit(self, nid: bytes, amount: int) -> None:
        bal = self.balance(nid)
        _require(bal >= amount, "insufficient-balance", f"{nid.hex()} has {bal}, needs {amount}")
        self.balances[nid] = bal - amount

    def job(self, job_id: bytes) -> Job | None:
        if job_id == EMPTY_JOB_ID:
            return EMPTY_JOB
        rec = self.jobs.get(job_id)
        return rec.job if rec is not None else None


class BlockNode:
    __slots__ = ("block", "hash", "parent", "state", "height", "full")

    def __init__(self, block: Block, parent: "BlockNode | None", state: LedgerState, full: bool = True,
                 block_hash: bytes | None = None):
        self.block = block
        self.hash = block_hash if block_hash is not None else hash_object(block)
        self.parent = parent
        self.state = state
        self.height = block.height
        self.full = full

    @property
    def schedule(self) -> tuple:
        return self.block.schedule

    def ancestors(self) -> list["BlockNode"]:
        """Nodes from genesis to self."""
        out = []
        node = self
        while node is not None:
            out.append(node)
            node = node.parent
        out.reverse()
        return out

    def __repr__(self):
        return f"BlockNode(height={self.height}, hash={self.hash.hex()[:12]})"


@dataclass(frozen=True)
class Chain:
    tip: BlockNode
    pending: tuple = ()  # miniblocks on the tip, sorted by slot, one per slot

    @property
    def length(self) -> int:
        return self.tip.height + 1

    @property
    def blocks(self) -> list[Block]:
        return [n.block for n in self.tip.ancestors()]

    @property
    def ledger(self) -> dict[bytes, int]:
        return self.tip.state.balances

    @property
    def escrow(self) -> dict[bytes, int]:
        return self.tip.state.escrow

    @property
    def tip_id(self) -> bytes:
        return tagged_hash(TAG_TIP, self.tip.hash, *(hash_object(m) for m in self.pending))

    def filled_slots(self) -> set[int]:
        return {m.job_slot for m in self.pending}

    def with_miniblock(self, mb: Miniblock) -> "Chain":
        if mb.job_slot in self.filled_slots():
            return self
        return Chain(self.tip, tuple(sorted(self.pending + (mb,), key=lambda m: m.job_slot)))

    def is_complete(self) -> bool:
        return len(self.pending) == len(self.tip.schedule)


def compare_chains(a: Chain, b: Chain) -> int:
    """Positive if ``a`` is preferred: more blocks, then more pending miniblocks,
    then the smaller tip id."""
    ka = (a.length, len(a.pending))
    kb = (b.length, len(b.pending))
    if ka != kb:
        return 1 if ka > kb else -1
    ia, ib = a.tip_id, b.tip_id
    if ia == ib:
        return 0
    return 1 if ia < ib else -1


# ---------------------------------------------------------------------------
# miniblocks


def validate_miniblock(mb: Miniblock, parent: BlockNode, cache: "VerifiedCache | None" = None) -> None:
    """Raise ValidationError unless ``mb`` is a valid miniblock on ``parent``."""
    _require(mb.prev_block_hash == parent.hash, "parent-mismatch")
    schedule = parent.block.schedule
    _require(0 <= mb.job_slot < len(schedule), "bad-slot", f"slot {mb.job_slot}")
    entry = schedule[mb.job_slot]
    job = parent.state.job(entry.job_id)
    _require(job is not None and job.evaluator is not None, "unknown-job")
    mb_hash = hash_object(mb)
    if cache is not None and mb_hash in cache.miniblocks:
        return
    ctx = eval_context_bytes(mb.prev_block_hash, mb.job_slot, mb.miner_id)
    if cache is not None:
        cache.evaluator_runs += 1
    res = execute_evaluator(job.evaluator, mb.nonce.candidate, ctx, job.eval_step_budget)
    _require(res.evaluation == mb.nonce.eval_value, "evaluation-mismatch",
             f"claimed {mb.nonce.eval_value}, evaluator gives {res.evaluation}")
    _require(leading_zero_bits(mb_hash) >= entry.z, "insufficient-zeros",
             f"{leading_zero_bits(mb_hash)} < {entry.z}")
    if cache is not None:
        cache.miniblocks.add(mb_hash)


# ---------------------------------------------------------------------------
# block transition pieces (operate on a working LedgerState)


def _mint_payouts(parent: BlockNode, miners: Sequence[bytes], params: ChainParams) -> list[Payout]:
    zs = [e.z for e in parent.block.schedule]
    return [Payout(m, amt, MINT) for m, amt in zip(miners, compute_rewards(zs, params.reward))]


def _due(st: LedgerState, height: int) -> list[tuple[bytes, JobRecord, bool]]:
    out = []
    for jid in st.active:
        rec = st.jobs[jid]
        if rec.phase == "revealing" and rec.scheduled_height == height - 4:
            out.append((jid, rec, False))
        elif rec.phase == "retry" and rec.scheduled_height == height - 5:
            out.append((jid, rec, True))
    return out


def _next_group(rec: JobRecord) -> tuple[tuple, int]:
    values = sorted({c.eval_value for c in rec.commits if c.eval_value != WORST and c.eval_value > rec.group_value})
    if not values:
        return (), WORST
    v = values[0]
    return tuple(sorted(c.miner_id for c in rec.commits if c.eval_value == v)), v


def _expected_settlements(st: LedgerState, height: int, cache) -> list[Payout]:
    payouts = []
    def count_run():
        cache.evaluator_runs += 1

    on_eval = count_run if cache is not None else None
    for jid, rec, retry in _due(st, height):
        paid = settle_job(rec.commits, rec.reveals, rec.job, rec.execution_ctxs(), on_eval)
        if paid:
            payouts += [Payout(nid, amt, CHARGE, jid) for nid, amt in paid]
        elif retry or not _next_group(rec)[0]:
            payouts.append(Payout(rec.job.client_id, st.escrow[jid], REFUND, jid))
    return payouts


def _apply_settlements(st: LedgerState, height: int, payouts: Sequence[Payout]) -> None:
    by_job: dict[bytes, list[Payout]] = {}
    for p in payouts:
        _require(p.reason in (CHARGE, REFUND), "settlement-mismatch", "unexpected payout reason")
        by_job.setdefault(p.ref, []).append(p)
    due = _due(st, height)
    due_ids = {jid for jid, _, _ in due}
    _require(set(by_job) <= due_ids, "settlement-mismatch", "payout for a job that is not due")
    active = list(st.active)
    for jid, rec, retry in due:
        ps = by_job.get(jid)
        if ps is None:
            group, value = _next_group(rec)
            _require(not retry and group, "settlement-mismatch", "job left unsettled")
            st.jobs[jid] = replace(rec, phase="retry", group=group, group_value=value)
            continue
        escrowed = st.escrow.get(jid, 0)
        _require(sum(p.amount for p in ps) == escrowed, "settlement-mismatch", "payouts do not match escrow")
        refund = all(p.reason == REFUND for p in ps)
        _require(refund or all(p.reason == CHARGE for p in ps), "settlement-mismatch")
        if refund:
            _require(all(p.node_id == rec.job.client_id for p in ps), "settlement-mismatch", "refund to non-client")
        for p in ps:
            st.credit(p.node_id, p.amount)
        del st.escrow[jid]
        st.jobs[jid] = replace(rec, phase="refunded" if refund else "paid", settled_height=height,
                               group=(), paid_to=tuple(p.node_id for p in ps) if not refund else ())
        active.remove(jid)
    st.active = tuple(active)


def transaction_error(st: LedgerState, tx: Transaction) -> str | None:
    if tx.amount == 0 or tx.sender == tx.recipient:
        return "transaction-invalid"
    if tx.seq != st.tx_seq.get(tx.sender, 0):
        return "transaction-invalid"
    if st.balance(tx.sender) < tx.amount:
        return "insufficient-balance"
    return None


def _apply_transaction(st: LedgerState, tx: Transaction) -> None:
    code = transaction_error(st, tx)
    _require(code is None, code or "", f"seq {tx.seq}")
    st.debit(tx.sender, tx.amount)
    st.credit(tx.recipient, tx.amount)
    st.tx_seq[tx.sender] = tx.seq + 1


def commit_error(st: LedgerState, height: int, c: Commit, seen: set) -> str | None:
    rec = st.jobs.get(c.job_id)
    if rec is None or rec.phase != "scheduled" or rec.scheduled_height != height - 2:
        return "commit-invalid"
    if (c.job_id, c.miner_id) in seen:
        return "commit-invalid"
    return None


def _apply_commits(st: LedgerState, height: int, commits: Sequence[Commit]) -> None:
    seen: set = set()
    grouped: dict[bytes, list[Commit]] = {}
    for c in commits:
        code = commit_error(st, height, c, seen)
        _require(code is None, code or "")
        seen.add((c.job_id, c.miner_id))
        grouped.setdefault(c.job_id, []).append(c)
    for jid in st.active:
        rec = st.jobs[jid]
        if rec.phase == "scheduled" and rec.scheduled_height == height - 2:
            rec = replace(rec, phase="revealing", commits=tuple(grouped.get(jid, ())), group_value=-1)
            group, value = _next_group(rec)
            st.jobs[jid] = replace(rec, group=group, group_value=value)


def reveal_error(st: LedgerState, height: int, r: Reveal, seen: set) -> str | None:
    rec = st.jobs.get(r.job_id)
    if rec is None:
        return "reveal-invalid"
    lag = {"revealing": 3, "retry": 4}.get(rec.phase)
    if lag is None or rec.scheduled_height != height - lag or r.miner_id not in rec.group:
        return "reveal-invalid"
    if (r.job_id, r.miner_id) in seen:
        return "reveal-invalid"
    commit = next((c for c in rec.commits if c.miner_id == r.miner_id), None)
    if commit is None or solution_hash(r.miner_id, r.solution) != commit.solution_hash:
        return "reveal-invalid"
    return None


def _apply_reveals(st: LedgerState, height: int, reveals: Sequence[Reveal]) -> None:
    seen: set = set()
    for r in reveals:
        code = reveal_error(st, height, r, seen)
        _require(code is None, code or "")
        seen.add((r.job_id, r.miner_id))
        rec = st.jobs[r.job_id]
        st.jobs[r.job_id] = replace(rec, reveals=rec.reveals + (r,))


def job_error(st: LedgerState, job: Job, full: bool = True) -> str | None:
    if job.is_empty or job.charge == 0 or job.eval_step_budget == 0:
        return "job-invalid"
    if job.job_id in st.jobs or job.job_id == EMPTY_JOB_ID:
        return "job-invalid"
    if full and job.compacted:
        return "missing-body"
    if not job.compacted and job.content_hash() != job.job_id:
        # retained programs are bound to the id even in blocks past the horizon
        return "job-invalid"
    if full:
        try:
            validate_evaluator(job.evaluator)
            validate_program(job.searcher)
        except ProgramError:
            return "job-invalid"
    if st.balance(job.client_id) < job.charge:
        return "insufficient-balance"
    return None


def _register_job(st: LedgerState, job: Job, full: bool) -> None:
    code = job_error(st, job, full)
    _require(code is None, code or "", job.job_id.hex()[:12])
    st.debit(job.client_id, job.charge)
    st.escrow[job.job_id] = job.charge
    st.jobs[job.job_id] = JobRecord(job, st.job_counter)
    st.job_counter += 1
    st.queue = st.queue + (job.job_id,)


def expected_schedule(st: LedgerState, params: ChainParams) -> list[ScheduleEntry]:
    ds = difficulty_from_window(st.recent, params)
    pending = [st.jobs[j].job for j in st.queue]

    class _Steps(dict):
        def __missing__(self, jid):
            return per_eval_steps(st.jobs[jid].job)

    return schedule_jobs(pending, ds, _Steps(), params)


def _apply_schedule(st: LedgerState, height: int, block_hash: bytes, schedule: Sequence[ScheduleEntry]) -> None:
    _require(len(schedule) <= MAX_SLOTS, "schedule-mismatch", "too many slots")
    queue = list(st.queue)
    active = list(st.active)
    for slot, e in enumerate(schedule):
        if e.job_id == EMPTY_JOB_ID:
            continue
        _require(e.job_id in queue, "schedule-mismatch", "job not pending")
        queue.remove(e.job_id)
        active.append(e.job_id)
        st.jobs[e.job_id] = replace(st.jobs[e.job_id], phase="scheduled", scheduled_height=height, slot=slot,
                                    sched_block_hash=block_hash)
    st.queue = tuple(queue)
    st.active = tuple(active)


def _window_entry(parent: BlockNode, block: Block) -> tuple[float, int, int]:
    return (block_work(parent.block.schedule), block.timestamp - parent.block.timestamp,
            sum(j.charge for j in block.new_jobs))


# ---------------------------------------------------------------------------
# genesis, block application and assembly


def genesis_block(balances: dict[bytes, int], params: ChainParams, timestamp: int = 0,
                  schedule: Sequence[ScheduleEntry] | None = None) -> Block:
    if schedule is None:
        schedule = schedule_jobs([], difficulty_from_window((), params), {}, params)
    payouts = tuple(Payout(nid, amt, GENESIS) for nid, amt in sorted(balances.items()) if amt > 0)
    return Block(ZERO_HASH, 0, timestamp, (), (), (), tuple(schedule), (), (), payouts, ())


def _apply_genesis(block: Block) -> BlockNode:
    _require(block.height == 0, "bad-height")
    _require(block.prev_block_hash == ZERO_HASH, "hash-link-broken", "genesis must have a zero parent")
    _require(not (block.miniblock_hashes or block.transactions or block.new_jobs or block.commits or block.reveals),
             "genesis-invalid")
    _require(all(e.job_id == EMPTY_JOB_ID for e in block.schedule), "schedule-mismatch")
    _require(len(block.schedule) <= MAX_SLOTS, "schedule-mismatch", "too many slots")
    st = LedgerState()
    for p in block.payouts:
        _require(p.reason == GENESIS, "mint-mismatch", "genesis may only allocate balances")
        st.credit(p.node_id, p.amount)
        st.supply += p.amount
    return BlockNode(block, None, st)


def apply_block(parent: BlockNode | None, block: Block, params: ChainParams, full: bool = True,
                cache: "VerifiedCache | None" = None) -> BlockNode:
    """Validate ``block`` on ``parent`` and return the new node.

    ``full=False`` is the relaxed check for old blocks: hash links, header
    fields, miniblock count, total mint and a ledger replay trusting the
    recorded settlements.
    """
    if parent is None:
        return _apply_genesis(block)
    h = block.height
    _require(block.prev_block_hash == parent.hash, "hash-link-broken")
    _require(h == parent.height + 1, "bad-height")
    _require(block.timestamp >= parent.block.timestamp, "bad-timestamp")
    schedule = parent.block.schedule
    _require(len(schedule) > 0 and len(block.miniblock_hashes) == len(schedule), "incomplete-miniblocks",
             f"{len(block.miniblock_hashes)} of {len(schedule)}")
    block_hash = hash_object(block)

    if full:
        _require(block.miniblocks is not None, "missing-body", "miniblocks were compacted")
        _require(len(block.miniblocks) == len(schedule), "incomplete-miniblocks")
        for k, (mb, mh) in enumerate(zip(block.miniblocks, block.miniblock_hashes)):
            _require(mb.job_slot == k and hash_object(mb) == mh, "incomplete-miniblocks", f"slot {k}")
            validate_miniblock(mb, parent, cache)
    elif block.miniblocks is not None:
        # bodies kept past the horizon must still match the header
        _require(len(block.miniblocks) == len(schedule), "incomplete-miniblocks")
        for k, (mb, mh) in enumerate(zip(block.miniblocks, block.miniblock_hashes)):
            _require(mb.job_slot == k and hash_object(mb) == mh, "incomplete-miniblocks", f"slot {k}")

    mints = [p for p in block.payouts if p.reason == MINT]
    others = [p for p in block.payouts if p.reason != MINT]
    _require(block.payouts[: len(mints)] == tuple(mints), "mint-mismatch", "mint payouts must come first")
    if full:
        expected_mint = _mint_payouts(parent, [mb.miner_id for mb in block.miniblocks], params)
        _require(mints == expected_mint, "mint-mismatch")
    else:
        _require(sum(p.amount for p in mints) == params.reward, "mint-mismatch")

    st = parent.state.copy()
    if full:
        _require(others == _expected_settlements(parent.state, h, cache), "settlement-mismatch")
    for p in mints:
        st.credit(p.node_id, p.amount)
    st.supply += params.reward
    _apply_settlements(st, h, others)

    for tx in block.transactions:
        _apply_transaction(st, tx)
    _apply_commits(st, h, block.commits)
    _apply_reveals(st, h, block.reveals)
    for job in block.new_jobs:
        _register_job(st, job, full)
    st.recent = (st.recent + (_window_entry(parent, block),))[-params.window:]
    if full:
        _require(list(block.schedule) == expected_schedule(st, params), "schedule-mismatch")
    _apply_schedule(st, h, block_hash, block.schedule)
    return BlockNode(block, parent, st, full, block_hash)


def assemble_block(parent: BlockNode, miniblocks: Sequence[Miniblock], params: ChainParams, timestamp: int,
                   transactions: Iterable[Transaction] = (), jobs: Iterable[Job] = (),
                   commits: Iterable[Commit] = (), reveals: Iterable[Reveal] = ()) -> tuple[Block, dict]:
    """Build the next block from completed miniblocks and whatever valid items are offered.

    Invalid or unaffordable items are left out; the second return value maps
    each dropped item to its error code.
    """
    mbs = tuple(sorted(miniblocks, key=lambda m: m.job_slot))
    h = parent.height + 1
    dropped: dict = {}
    payouts = _mint_payouts(parent, [m.miner_id for m in mbs], params) + _expected_settlements(parent.state, h, None)
    st = parent.state.copy()
    for p in payouts:
        if p.reason == MINT:
            st.credit(p.node_id, p.amount)
    _apply_settlements(st, h, [p for p in payouts if p.reason != MINT])

    txs = []
    for tx in transactions:
        code = transaction_error(st, tx)
        if code is None:
            _apply_transaction(st, tx)
            txs.append(tx)
        else:
            dropped[tx] = code
    cs, seen = [], set()
    for c in commits:
        code = commit_error(st, h, c, seen)
        if code is None:
            seen.add((c.job_id, c.miner_id))
            cs.append(c)
        else:
            dropped[c] = code
    _apply_commits(st, h, cs)
    rs, seen = [], set()
    for r in reveals:
        code = reveal_error(st, h, r, seen)
        if code is None:
            seen.add((r.job_id, r.miner_id))
            rs.append(r)
        else:
            dropped[r] = code
    _apply_reveals(st, h, rs)
    js = []
    for job in jobs:
        code = job_error(st, job)
        if code is None:
            _register_job(st, job, True)
            js.append(job)
        else:
            dropped[job] = code
    draft = Block(parent.hash, h, timestamp, (), (), tuple(js))
    st.recent = (st.recent + (_window_entry(parent, draft),))[-params.window:]
    schedule = expected_schedule(st, params)
    block = Block(parent.hash, h, timestamp, tuple(hash_object(m) for m in mbs), tuple(txs), tuple(js),
                  tuple(schedule), tuple(cs), tuple(rs), tuple(payouts), mbs)
    return block, dropped


# ---------------------------------------------------------------------------
# whole-chain verification and compaction


@dataclass
class VerifiedCache:
    blocks: dict = field(default_factory=dict)  # block hash -> BlockNode
    miniblocks: set = field(default_factory=set)
    evaluator_runs: int = 0


def verify_blocks(blocks: Sequence[Block], pending: Sequence[Miniblock], params: ChainParams,
                  cache: VerifiedCache | None = None, expected_tip: bytes | None = None) -> Chain:
    """Rebuild and check a chain from genesis; raises ValidationError."""
    if not blocks:
        raise ValidationError("empty-chain")
    tip_height = blocks[-1].height
    node: BlockNode | None = None
    for b in blocks:
        old = b.height <= tip_height - params.verify_depth
        bh = hash_object(b)
        cached = cache.blocks.get(bh) if cache is not None else None
        if cached is not None and (cached.full or old) and (node is None or node.hash == b.prev_block_hash):
            node = cached
            continue
        try:
            node = apply_block(node, b, params, full=not old, cache=cache)
        except ValidationError as exc:
            exc.height = b.height
            raise
        if cache is not None:
            cache.blocks[bh] = node
    chain = Chain(node)
    for mb in pending:
        try:
            validate_miniblock(mb, node, cache)
        except ValidationError as exc:
            exc.height = node.height + 1
            raise
        if mb.job_slot in chain.filled_slots():
            raise ValidationError("duplicate-slot", f"slot {mb.job_slot}", node.height + 1)
        chain = chain.with_miniblock(mb)
    if expected_tip is not None and node.hash != expected_tip:
        raise ValidationError("tip-mismatch", "", node.height)
    return chain


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    code: str | None = None
    height: int | None = None
    detail: str = ""
    chain: Chain | None = None

    def __bool__(self):
        return self.ok


def verify_chain(chain, params: ChainParams, cache: VerifiedCache | None = None,
                 expected_tip: bytes | None = None) -> VerifyReport:
    """Verify a Chain (or a ``(blocks, pending)`` pair) and report the first failure."""
    if isinstance(chain, Chain):
        blocks, pending = chain.blocks, chain.pending
    else:
        blocks, pending = chain
    try:
        out = verify_blocks(blocks, pending, params, cache, expected_tip)
    except ValidationError as exc:
        return VerifyReport(False, exc.code, exc.height, exc.detail)
    return VerifyReport(True, chain=out)


def compact_chain(chain: Chain, params: ChainParams) -> Chain:
    """Drop job programs and miniblock bodies from blocks past the verification horizon.

    Programs are kept for any job not yet settled in an old block, so the
    remaining full checks can still re-run its evaluator.
    """
    cutoff = chain.tip.height - params.verify_depth
    if cutoff < 1:
        return chain
    jobs = chain.tip.state.jobs
    droppable = {jid for jid, rec in jobs.items() if 0 <= rec.settled_height <= cutoff}
    parent = None
    for node in chain.tip.ancestors():
        block = node.block
        if 1 <= node.height <= cutoff:
            block = replace(
                block, miniblocks=None,
                new_jobs=tuple(j.compact() if j.job_id in droppable else j for j in block.new_jobs),
            )
        parent = BlockNode(block, parent, node.state, node.full and node.height > cutoff, node.hash)
    return Chain(parent, chain.pending)
