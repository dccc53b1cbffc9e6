"""Deterministic discrete-event network simulation.

Two modes share the scenario format and the report:

* ``faithful``: every node is a full ``MinerState``.  Miners really execute
  the VM; the steps an attempt consumes become time through the node's
  compute rate (steps per tick).
* ``statistical``: chains are abstract (ids, heights, slots).  Each miner
  finds miniblocks as a Poisson process of rate
  ``computeRate / (s_ref * 2**z)`` per tick and no VM runs.  Difficulty is
  held at ``eFloor``, so rates are exact.  Jobs are not supported.

Time is an integer tick count; ``T`` (chain parameter) ticks make one
block interval.  Events at equal times run in insertion order.
"""

from __future__ import annotations

import bisect
import csv
import heapq
import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .consensus import (
    REFERENCE_STEPS, Chain, ChainParams, compare_chains, compute_rewards, genesis_block,
)
from .core import (
    Block, Commit, Job, Miniblock, Reveal, Transaction, derive_seed, hash_object, node_id, node_name,
)
from .evalvm import assemble
from .evalvm.isa import Program
from .evalvm.programs import random_cities, tsp_evaluator, tsp_searcher
from .mining import MinerPolicy, MinerState

MODES = ("faithful", "statistical")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class NodeConfig:
    name: str
    compute_rate: float = 0.0  # steps per tick
    role: str = "miner"
    balance: int = 0

    @property
    def node_id(self) -> bytes:
        return node_id(self.name)


@dataclass
class DelayModel:
    kind: str = "constant"  # constant | uniform | perLink
    d: int = 0
    lo: int = 0
    hi: int = 0
    matrix: list[list[int]] | None = None

    def sample(self, src: int, dst: int, rng: random.Random) -> int:
        if self.kind == "constant":
            return self.d
        if self.kind == "uniform":
            return rng.randint(self.lo, self.hi)
        return self.matrix[src][dst]

    def validate(self, n_nodes: int) -> None:
        if self.kind == "constant":
            ok = self.d >= 0
        elif self.kind == "uniform":
            ok = 0 <= self.lo <= self.hi
        elif self.kind == "perLink":
            m = self.matrix
            ok = (m is not None and len(m) == n_nodes and all(len(r) == n_nodes for r in m)
                  and all(x >= 0 for r in m for x in r))
        else:
            raise ConfigError(f"unknown delay model {self.kind!r}")
        if not ok:
            raise ConfigError("delays must be non-negative (perLink needs an n x n matrix)")

    @classmethod
    def from_dict(cls, d: dict) -> "DelayModel":
        kind = d.get("type", "constant")
        if kind == "constant":
            return cls(kind, d=int(d.get("d", 0)))
        if kind == "uniform":
            return cls(kind, lo=int(d["lo"]), hi=int(d["hi"]))
        if kind == "perLink":
            return cls(kind, matrix=[[int(x) for x in row] for row in d["matrix"]])
        raise ConfigError(f"unknown delay model {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"type": "constant", "d": self.d}
        if self.kind == "uniform":
            return {"type": "uniform", "lo": self.lo, "hi": self.hi}
        return {"type": "perLink", "matrix": self.matrix}


@dataclass
class JobSpec:
    submit_time: int
    client: str
    charge: int
    eval_step_budget: int
    evaluator: Program
    searcher: Program
    salt: int = 0
    cities: list[tuple[int, int]] | None = None  # kept for TSP jobs so reports can be checked
    source: dict = field(default_factory=dict)

    def build(self) -> Job:
        return Job.create(node_id(self.client), self.charge, self.evaluator, self.searcher, self.eval_step_budget,
                          salt=self.salt)

    @classmethod
    def from_dict(cls, d: dict, seed: int, index: int) -> "JobSpec":
        problem = d.get("problem", {})
        kind = problem.get("type")
        cities = None
        if kind == "tsp":
            if "cities" in problem:
                cities = [(int(x), int(y)) for x, y in problem["cities"]]
            else:
                rng = random.Random(derive_seed(seed, "cities", index))
                cities = random_cities(int(problem["count"]), rng)
            evaluator = tsp_evaluator(cities)
            searcher = tsp_searcher(len(cities), problem.get("restartAfter"))
        elif kind == "asm":
            evaluator = assemble(problem["evaluator"])
            searcher = assemble(problem["searcher"])
        else:
            raise ConfigError(f"job {index}: unknown problem type {kind!r}")
        return cls(int(d.get("submitTime", 0)), d["client"], int(d["charge"]), int(d.get("evalStepBudget", 1 << 20)),
                   evaluator, searcher, int(d.get("salt", index)), cities, dict(d))


@dataclass
class ScenarioConfig:
    nodes: list[NodeConfig]
    chain_params: ChainParams = field(default_factory=ChainParams)
    delay: DelayModel = field(default_factory=DelayModel)
    jobs: list[JobSpec] = field(default_factory=list)
    seed: int = 0
    duration: int = 0
    mode: str = "faithful"
    name: str = "scenario"
    max_blocks: int | None = None
    topology: str = "fullMesh"  # or "gossip"
    gossip_degree: int = 3
    policy: MinerPolicy = field(default_factory=MinerPolicy)
    trace: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not any(n.role == "miner" for n in self.nodes):
            raise ConfigError("need at least one miner")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ConfigError("node names must be unique")
        ids = {n.node_id for n in self.nodes}
        if len(ids) != len(names):
            raise ConfigError("node names collide after encoding")
        for n in self.nodes:
            if n.role not in ("miner", "client"):
                raise ConfigError(f"node {n.name}: role must be miner or client")
            if n.role == "miner" and n.compute_rate <= 0:
                raise ConfigError(f"node {n.name}: miners need a positive computeRate")
            if n.balance < 0:
                raise ConfigError(f"node {n.name}: negative balance")
        self.delay.validate(len(self.nodes))
        if self.topology not in ("fullMesh", "gossip"):
            raise ConfigError("topology must be fullMesh or gossip")
        for j in self.jobs:
            if j.client not in names:
                raise ConfigError(f"job client {j.client!r} is not a node")
            if j.submit_time < 0:
                raise ConfigError("job submitTime must be non-negative")
        if self.mode == "statistical" and self.jobs:
            raise ConfigError("statistical mode does not run jobs")
        if self.max_blocks is not None and self.max_blocks < 1:
            raise ConfigError("maxBlocks must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        try:
            seed = int(d.get("seed", 0))
            nodes = [NodeConfig(n["id"], float(n.get("computeRate", 0)), n.get("role", "miner"),
                                int(n.get("balance", 0))) for n in d["nodes"]]
            cfg = cls(
                nodes=nodes,
                chain_params=ChainParams.from_dict(d.get("chainParams", {})),
                delay=DelayModel.from_dict(d.get("delayModel", {})),
                jobs=[JobSpec.from_dict(j, seed, i) for i, j in enumerate(d.get("jobs", []))],
                seed=seed,
                duration=int(d["duration"]),
                mode=d.get("mode", "faithful"),
                name=d.get("name", "scenario"),
                max_blocks=d.get("maxBlocks"),
                topology=d.get("topology", "fullMesh"),
                gossip_degree=int(d.get("gossipDegree", 3)),
                policy=MinerPolicy.from_dict(d.get("policy", {})),
                trace=bool(d.get("trace", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad scenario: {exc!r}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "mode": self.mode, "seed": self.seed, "duration": self.duration,
            "maxBlocks": self.max_blocks, "topology": self.topology, "gossipDegree": self.gossip_degree,
            "nodes": [{"id": n.name, "computeRate": n.compute_rate, "role": n.role, "balance": n.balance}
                      for n in self.nodes],
            "delayModel": self.delay.to_dict(), "chainParams": self.chain_params.to_dict(),
            "jobs": [j.source for j in self.jobs],
        }


# ---------------------------------------------------------------------------
# event queue and report


class EventQueue:
    """Min-heap ordered by (time, insertion sequence)."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.last_time = 0

    def push(self, time: int, kind: str, *payload) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        self._seq += 1

    def pop(self) -> tuple[int, str, tuple]:
        time, _, kind, payload = heapq.heappop(self._heap)
        assert time >= self.last_time, "event out of time order"
        self.last_time = time
        return time, kind, payload

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class SimulationReport:
    name: str
    mode: str
    seed: int
    end_time: int
    height: int
    fork_count: int
    fork_events: int
    fork_heights_evaluated: int
    block_times: list[int]
    per_node_wins: dict[str, int]
    ledger: dict[str, int]
    supply: int
    jobs: list[dict]
    trace: list[tuple[int, str, str, str]]
    block_time_unit: int
    counters: dict[str, int] = field(default_factory=dict)
    final_chain: Chain | None = None
    final_chains: dict[str, Any] = field(default_factory=dict)
    abstract_chain: list[tuple] = field(default_factory=list)  # statistical mode only

    def write_abstract_chain_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["height", "block", "parent", "time", "miners"])
            w.writerows(self.abstract_chain)

    @property
    def fork_rate(self) -> float:
        return self.fork_events / self.fork_heights_evaluated if self.fork_heights_evaluated else 0.0

    def to_json(self) -> dict:
        bt = [x / self.block_time_unit for x in self.block_times]
        mean = sum(bt) / len(bt) if bt else None
        var = sum((x - mean) ** 2 for x in bt) / (len(bt) - 1) if len(bt) > 1 else None
        return {
            "scenario": self.name, "mode": self.mode, "seed": self.seed, "endTime": self.end_time,
            "height": self.height, "forkCount": self.fork_count, "forkEvents": self.fork_events,
            "forkHeightsEvaluated": self.fork_heights_evaluated, "forkRate": self.fork_rate,
            "blockTimes": self.block_times, "blockTimeMean": mean, "blockTimeVariance": var,
            "perNodeWins": self.per_node_wins, "ledger": self.ledger, "supply": self.supply,
            "jobs": self.jobs, "counters": self.counters, "finalTips": self.final_chains,
            "traceEvents": len(self.trace),
        }

    def write_trace_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "node", "kind", "object"])
            w.writerows(self.trace)


def _fork_windows(creations: dict[int, list[int]], first: dict[tuple[int, int], tuple[int, int]], n_slots: int,
                  d: int, end: int) -> tuple[int, int]:
    """Count heights where every slot saw the two-node window event.

    For the first miniblock at (height, slot), created at t by node c, the
    event holds when c creates nothing in (t, t+d] and all other nodes
    together create exactly one miniblock there.  Returns (events, heights
    evaluated); a height is evaluated when all its slots have a first
    creation whose window closed before ``end``.
    """
    by_height: dict[int, list] = {}
    for (h, k), v in first.items():
        by_height.setdefault(h, []).append(v)
    events = evaluated = 0
    for h, firsts in by_height.items():
        if len(firsts) != n_slots or any(t + d > end for t, _ in firsts):
            continue
        evaluated += 1
        ok = True
        for t, c in firsts:
            own = others = 0
            for node, times in creations.items():
                cnt = bisect.bisect_right(times, t + d) - bisect.bisect_right(times, t)
                if node == c:
                    own += cnt
                else:
                    others += cnt
            if own != 0 or others != 1:
                ok = False
                break
        events += ok
    return events, evaluated


def _peers(cfg: ScenarioConfig, rng: random.Random) -> list[list[int]]:
    n = len(cfg.nodes)
    if cfg.topology == "fullMesh" or n <= 1:
        return [[j for j in range(n) if j != i] for i in range(n)]
    links: set = set()
    order = list(range(n))
    rng.shuffle(order)
    for a, b in zip(order, order[1:]):  # a random spanning path keeps the graph connected
        links.add((min(a, b), max(a, b)))
    for i in range(n):
        for j in rng.sample([x for x in range(n) if x != i], min(cfg.gossip_degree, n - 1)):
            links.add((min(i, j), max(i, j)))
    peers = [[] for _ in range(n)]
    for a, b in sorted(links):
        peers[a].append(b)
        peers[b].append(a)
    return peers


def run_scenario(cfg: ScenarioConfig) -> SimulationReport:
    cfg.validate()
    if cfg.mode == "statistical":
        return _StatisticalSim(cfg).run()
    return _FaithfulSim(cfg).run()


# ---------------------------------------------------------------------------
# faithful mode


_KIND = {Block: "block", Miniblock: "miniblock", Job: "job", Commit: "commit", Reveal: "reveal",
         Transaction: "tx"}


class _FaithfulSim:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.params = cfg.chain_params
        self.rng = random.Random(derive_seed(cfg.seed, "network"))
        self.queue = EventQueue()
        self.trace: list = []
        self.names = [n.name for n in cfg.nodes]
        self.peers = _peers(cfg, self.rng)
        balances = {n.node_id: n.balance for n in cfg.nodes if n.balance}
        self.genesis = genesis_block(balances, self.params)
        self.states = [
            MinerState(n.node_id, self.genesis, self.params, cfg.policy, derive_seed(cfg.seed, "miner", n.name),
                       mining=n.role == "miner")
            for n in cfg.nodes
        ]
        self.seen: list[set] = [set() for _ in cfg.nodes]
        self.inflight: list = [None] * len(cfg.nodes)  # (token, attempt, completion, work key)
        self.clock: list[float | None] = [None] * len(cfg.nodes)
        self.tokens = [0] * len(cfg.nodes)
        self.created: dict[int, set] = {}
        self.creations: dict[int, list[int]] = {i: [] for i in range(len(cfg.nodes))}
        self.first: dict[tuple[int, int], tuple[int, int]] = {}
        self.max_height = 0
        self.job_by_id: dict[bytes, JobSpec] = {}
        self.duplicates = 0

    def log(self, t: int, i: int, kind: str, obj_hash: bytes) -> None:
        if self.cfg.trace:
            self.trace.append((t, self.names[i], kind, obj_hash.hex()))

    # -- messaging --

    def broadcast(self, src: int, msg, t: int) -> None:
        h = hash_object(msg)
        self.seen[src].add(h)
        self.log(t, src, "send-" + _KIND[type(msg)], h)
        for j in self.peers[src]:
            self.queue.push(t + self.cfg.delay.sample(src, j, self.rng), "deliver", j, msg, h, src)

    def deliver(self, t: int, i: int, msg, h: bytes, src: int) -> None:
        if h in self.seen[i]:
            self.duplicates += 1
            return
        self.seen[i].add(h)
        self.log(t, i, "recv-" + _KIND[type(msg)], h)
        st = self.states[i]
        if isinstance(msg, Block):
            out = st.on_new_block(msg, t)
        elif isinstance(msg, Miniblock):
            _, out = st.on_new_miniblock(msg, t)
        else:
            st.receive_item(msg)
            out = []
        if self.cfg.topology == "gossip":
            for j in self.peers[i]:
                if j != src:
                    self.queue.push(t + self.cfg.delay.sample(i, j, self.rng), "deliver", j, msg, h, i)
        for m in out:
            self.broadcast(i, m, t)
        self.reschedule(i, t)

    # -- mining time --

    def work_key(self, i: int):
        st = self.states[i]
        slot = st.desired_slot() if st.mining else None
        return None if slot is None else (st.tip.hash, slot)

    def reschedule(self, i: int, t: int) -> None:
        """Abandon the in-flight attempt if its work became obsolete and start fresh."""
        if not self.states[i].mining:
            return
        key = self.work_key(i)
        cur = self.inflight[i]
        if cur is not None and cur[3] == key:
            return
        self.tokens[i] += 1
        self.inflight[i] = None
        if key is not None:
            self.start(i, float(t))

    def start(self, i: int, start: float) -> None:
        st = self.states[i]
        a = st.attempt()
        if a is None:
            self.inflight[i] = None
            return
        done = start + a.cost / self.cfg.nodes[i].compute_rate
        tok = self.tokens[i]
        self.inflight[i] = (tok, a, done, (a.work.tip_hash, a.work.slot))
        self.queue.push(math.ceil(done), "attempt", i, tok)

    def finish(self, t: int, i: int, token: int) -> None:
        cur = self.inflight[i]
        if cur is None or cur[0] != token:
            return
        _, a, done, _ = cur
        self.inflight[i] = None
        st = self.states[i]
        if a.success:
            tip = self.states[i].nodes[a.work.tip_hash]
            height = tip.height + 1
            self.creations[i].append(t)
            self.first.setdefault((height, a.work.slot), (t, i))
        out = st.complete(a, t)
        for m in out:
            if isinstance(m, Block):
                bh = hash_object(m)
                self.created.setdefault(m.height, set()).add(bh)
                self.max_height = max(self.max_height, m.height)
                self.log(t, i, "block", bh)
            elif isinstance(m, Miniblock):
                self.log(t, i, "miniblock", hash_object(m))
            self.broadcast(i, m, t)
        self.tokens[i] += 1
        if self.work_key(i) is not None:
            self.start(i, done)

    # -- main loop --

    def run(self) -> SimulationReport:
        cfg = self.cfg
        for spec in cfg.jobs:
            idx = self.names.index(spec.client)
            self.queue.push(spec.submit_time, "submit", idx, spec)
        for i, n in enumerate(cfg.nodes):
            if n.role == "miner":
                self.start(i, 0.0)
        end = 0
        while len(self.queue):
            if self.queue.peek_time() > cfg.duration:
                break
            t, kind, payload = self.queue.pop()
            end = t
            if kind == "attempt":
                self.finish(t, *payload)
            elif kind == "deliver":
                self.deliver(t, *payload)
            elif kind == "submit":
                i, spec = payload
                job = spec.build()
                self.job_by_id[job.job_id] = spec
                self.log(t, i, "submit-job", job.job_id)
                self.states[i].receive_item(job)
                self.broadcast(i, job, t)
            if cfg.max_blocks is not None and self.max_height >= cfg.max_blocks:
                break
        return self.report(end)

    def report(self, end: int) -> SimulationReport:
        best = self.states[0].active
        for st in self.states[1:]:
            if compare_chains(st.active, best) > 0:
                best = st.active
        blocks = best.blocks
        wins: Counter = Counter()
        for b in blocks[1:]:
            for mb in b.miniblocks or ():
                wins[node_name(mb.miner_id)] += 1
        for mb in best.pending:
            wins[node_name(mb.miner_id)] += 1
        times = [b.timestamp - a.timestamp for a, b in zip(blocks, blocks[1:])]
        fork_events, evaluated = _fork_windows(self.creations, self.first, self.params.n_target,
                                               self._fork_d(), end)
        counters: Counter = Counter()
        for st in self.states:
            counters.update(st.counters)
        counters["duplicates_dropped"] = self.duplicates
        jobs = [self.job_report(best, jid, spec) for jid, spec in self.job_by_id.items()]
        return SimulationReport(
            name=self.cfg.name, mode="faithful", seed=self.cfg.seed, end_time=end, height=best.tip.height,
            fork_count=sum(1 for s in self.created.values() if len(s) > 1), fork_events=fork_events,
            fork_heights_evaluated=evaluated, block_times=times,
            per_node_wins={n: wins.get(n, 0) for n in self.names}, ledger={
                node_name(k): v for k, v in sorted(best.ledger.items())},
            supply=best.tip.state.supply, jobs=jobs, trace=self.trace, block_time_unit=self.params.block_time,
            counters=dict(sorted(counters.items())), final_chain=best,
            final_chains={n: st.active.tip.hash.hex() for n, st in zip(self.names, self.states)},
        )

    def _fork_d(self) -> int:
        dm = self.cfg.delay
        if dm.kind == "constant":
            return dm.d
        if dm.kind == "uniform":
            return dm.hi
        return max(max(r) for r in dm.matrix)

    def job_report(self, chain: Chain, jid: bytes, spec: JobSpec) -> dict:
        out: dict[str, Any] = {"jobId": jid.hex(), "client": spec.client, "charge": spec.charge,
                               "submitTime": spec.submit_time}
        rec = chain.tip.state.jobs.get(jid)
        if rec is None:
            reasons = {st.rejected_jobs[jid] for st in self.states if jid in st.rejected_jobs}
            out.update(status="unregistered", rejected=sorted(reasons))
            return out
        reg = next(b.height for b in chain.blocks if any(j.job_id == jid for j in b.new_jobs))
        out.update(status=rec.phase, registeredHeight=reg,
                   scheduledHeight=rec.scheduled_height if rec.scheduled_height >= 0 else None,
                   settledHeight=rec.settled_height if rec.settled_height >= 0 else None,
                   paidTo=[node_name(x) for x in rec.paid_to], commits=len(rec.commits))
        if rec.phase == "paid":
            winner = rec.paid_to[0]
            rv = next(r for r in rec.reveals if r.miner_id == winner)
            cm = next(c for c in rec.commits if c.miner_id == winner)
            out.update(solution=rv.solution.hex(), evaluation=cm.eval_value,
                       scheduleBlock=rec.sched_block_hash.hex(), slot=rec.slot)
        return out


# ---------------------------------------------------------------------------
# statistical mode


class _ABlock:
    __slots__ = ("uid", "parent", "height", "time", "creator", "miners")

    def __init__(self, uid, parent, height, time, creator, miners):
        self.uid = uid
        self.parent = parent
        self.height = height
        self.time = time
        self.creator = creator
        self.miners = miners


class _AMini:
    __slots__ = ("uid", "tip", "slot", "miner")

    def __init__(self, uid, tip, slot, miner):
        self.uid = uid
        self.tip = tip
        self.slot = slot
        self.miner = miner


class _AView:
    """One node's view: best tip plus the first-seen miniblocks per known tip."""

    __slots__ = ("tip", "pending", "heights")

    def __init__(self, tip):
        self.tip = tip
        self.pending: dict[int, dict[int, _AMini]] = {tip.uid: {}}
        self.heights: dict[int, int] = {tip.uid: tip.height}


def _tip_key(tip: _ABlock, pend: dict) -> int:
    return hash((tip.uid,) + tuple(pend[k].uid for k in sorted(pend)))


class _StatisticalSim:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        p = cfg.chain_params
        self.n_slots = p.n_target
        z = max(p.z_min, min(p.z_max, math.floor(math.log2(p.e_floor / p.n_target) + 0.5)))
        self.z = z
        self.rates = [n.compute_rate / (REFERENCE_STEPS * 2 ** z) if n.role == "miner" else 0.0 for n in cfg.nodes]
        self.rng = random.Random(derive_seed(cfg.seed, "network"))
        self.np_rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, "statistical")))
        self._exp = np.empty(0)
        self._exp_pos = 0
        self.queue = EventQueue()
        self.trace: list = []
        self.names = [n.name for n in cfg.nodes]
        self.peers = _peers(cfg, self.rng)
        self.genesis = _ABlock(0, None, 0, 0, -1, ())
        self.views = [_AView(self.genesis) for _ in cfg.nodes]
        self.seen: list[set] = [set() for _ in cfg.nodes]
        self.created: dict[int, int] = {}
        self.creations: dict[int, list[int]] = {i: [] for i in range(len(cfg.nodes))}
        self.first: dict[tuple[int, int], tuple[int, int]] = {}
        self.max_height = 0

    def exp(self) -> float:
        if self._exp_pos >= len(self._exp):
            self._exp = self.np_rng.standard_exponential(8192)
            self._exp_pos = 0
        x = self._exp[self._exp_pos]
        self._exp_pos += 1
        return float(x)

    def uid(self) -> int:
        return self.rng.getrandbits(63) | 1

    def log(self, t, i, kind, uid) -> None:
        if self.cfg.trace:
            self.trace.append((t, self.names[i], kind, f"{uid:016x}"))

    def broadcast(self, src: int, kind: str, obj, t: int) -> None:
        delay = self.cfg.delay
        self.seen[src].add(obj.uid)
        for j in self.peers[src]:
            self.queue.push(t + delay.sample(src, j, self.rng), kind, j, obj, src)

    def better(self, view: _AView, tip: _ABlock) -> bool:
        """Is (tip, its pending) preferred over the view's active chain?"""
        cur, pc = view.tip, view.pending[view.tip.uid]
        pn = view.pending.get(tip.uid, {})
        a, b = (tip.height, len(pn)), (cur.height, len(pc))
        if a != b:
            return a > b
        return tip is not cur and _tip_key(tip, pn) < _tip_key(cur, pc)

    def add_mini(self, view: _AView, mb: _AMini) -> bool:
        view.heights[mb.tip.uid] = mb.tip.height
        pend = view.pending.setdefault(mb.tip.uid, {})
        if mb.slot in pend:
            return False
        pend[mb.slot] = mb
        return True

    def set_tip(self, view: _AView, tip: _ABlock) -> None:
        view.tip = tip
        view.pending.setdefault(tip.uid, {})
        view.heights[tip.uid] = tip.height
        if len(view.heights) > 64:
            floor = tip.height - 4
            for uid in [u for u, h in view.heights.items() if h < floor]:
                del view.heights[uid]
                view.pending.pop(uid, None)

    def on_success(self, t: int, i: int) -> None:
        view = self.views[i]
        tip = view.tip
        pend = view.pending[tip.uid]
        slot = next(k for k in range(self.n_slots) if k not in pend)
        self.creations[i].append(t)
        self.first.setdefault((tip.height + 1, slot), (t, i))
        mb = _AMini(self.uid(), tip, slot, i)
        pend[slot] = mb
        if len(pend) == self.n_slots:
            miners = tuple(pend[k].miner for k in range(self.n_slots))
            block = _ABlock(self.uid(), tip, tip.height + 1, t, i, miners)
            self.created[block.height] = self.created.get(block.height, 0) + 1
            self.max_height = max(self.max_height, block.height)
            self.log(t, i, "block", block.uid)
            self.set_tip(view, block)
            self.broadcast(i, "block", block, t)
        else:
            self.log(t, i, "miniblock", mb.uid)
            self.broadcast(i, "mini", mb, t)
        self.queue.push(t + math.ceil(self.exp() / self.rates[i]), "success", i)

    def on_mini(self, t: int, i: int, mb: _AMini, src: int) -> None:
        if mb.uid in self.seen[i]:
            return
        self.seen[i].add(mb.uid)
        view = self.views[i]
        if self.add_mini(view, mb) and mb.tip is not view.tip and self.better(view, mb.tip):
            self.set_tip(view, mb.tip)
        self.forward(t, i, "mini", mb, src)

    def on_block(self, t: int, i: int, block: _ABlock, src: int) -> None:
        if block.uid in self.seen[i]:
            return
        self.seen[i].add(block.uid)
        view = self.views[i]
        view.pending.setdefault(block.uid, {})
        view.heights[block.uid] = block.height
        if self.better(view, block):
            self.set_tip(view, block)
        self.forward(t, i, "block", block, src)

    def forward(self, t, i, kind, obj, src) -> None:
        if self.cfg.topology == "gossip":
            for j in self.peers[i]:
                if j != src:
                    self.queue.push(t + self.cfg.delay.sample(i, j, self.rng), kind, j, obj, i)

    def run(self) -> SimulationReport:
        cfg = self.cfg
        for i, r in enumerate(self.rates):
            if r > 0:
                self.queue.push(math.ceil(self.exp() / r), "success", i)
        end = 0
        q = self.queue
        while len(q):
            if q.peek_time() > cfg.duration:
                break
            t, kind, payload = q.pop()
            end = t
            if kind == "success":
                self.on_success(t, *payload)
                if cfg.max_blocks is not None and self.max_height >= cfg.max_blocks:
                    break
            elif kind == "mini":
                self.on_mini(t, *payload)
            else:
                self.on_block(t, *payload)
        return self.report(end)

    def report(self, end: int) -> SimulationReport:
        def rank(v: _AView):
            pend = v.pending[v.tip.uid]
            return (-v.tip.height, -len(pend), _tip_key(v.tip, pend))

        best = min(self.views, key=rank)
        chain = []
        b = best.tip
        while b is not None:
            chain.append(b)
            b = b.parent
        chain.reverse()
        p = self.cfg.chain_params
        shares = compute_rewards([self.z] * self.n_slots, p.reward)
        wins: Counter = Counter()
        ledger = {n.name: n.balance for n in self.cfg.nodes}
        for blk in chain[1:]:
            for k, m in enumerate(blk.miners):
                wins[self.names[m]] += 1
                ledger[self.names[m]] += shares[k]
        times = [b.time - a.time for a, b in zip(chain, chain[1:])]
        d = self.cfg.delay
        dmax = d.d if d.kind == "constant" else d.hi if d.kind == "uniform" else max(max(r) for r in d.matrix)
        fork_events, evaluated = _fork_windows(self.creations, self.first, self.n_slots, dmax, end)
        return SimulationReport(
            name=self.cfg.name, mode="statistical", seed=self.cfg.seed, end_time=end, height=best.tip.height,
            fork_count=sum(1 for c in self.created.values() if c > 1), fork_events=fork_events,
            fork_heights_evaluated=evaluated, block_times=times,
            per_node_wins={n: wins.get(n, 0) for n in self.names},
            ledger=ledger,
            supply=best.tip.height * p.reward + sum(c.balance for c in self.cfg.nodes), jobs=[], trace=self.trace,
            block_time_unit=p.block_time, counters={"z": self.z},
            final_chains={n: f"{v.tip.uid:016x}" for n, v in zip(self.names, self.views)},
            abstract_chain=[
                (b.height, f"{b.uid:016x}", f"{b.parent.uid:016x}" if b.parent else "", b.time,
                 " ".join(self.names[m] for m in b.miners))
                for b in chain
            ],
        )
