"""Commit/reveal settlement of a single job's charge."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

from .core import WORST, Commit, Job, Reveal, solution_hash
from .evalvm import EvalContext, execute_evaluator


def verified_commits(commits: Iterable[Commit], reveals: Iterable[Reveal], job: Job,
                     execution_ctxs: Mapping[bytes, EvalContext | bytes],
                     on_eval: Callable[[], None] | None = None) -> list[Commit]:
    """Commits whose reveal matches the hash and reproduces the committed value.

    The revealed solution is re-evaluated under the miner's own context from
    the execution interval.  WORST commits never qualify.
    """
    by_miner: dict[bytes, Commit] = {}
    for c in commits:
        if c.job_id == job.job_id:
            by_miner.setdefault(c.miner_id, c)
    out = []
    seen = set()
    for r in reveals:
        c = by_miner.get(r.miner_id)
        if c is None or r.job_id != job.job_id or r.miner_id in seen:
            continue
        seen.add(r.miner_id)
        if c.eval_value == WORST or solution_hash(r.miner_id, r.solution) != c.solution_hash:
            continue
        ctx = execution_ctxs.get(r.miner_id)
        if ctx is None or job.evaluator is None:
            continue
        if on_eval is not None:
            on_eval()
        res = execute_evaluator(job.evaluator, r.solution, ctx, job.eval_step_budget)
        if res.evaluation == c.eval_value:
            out.append(c)
    return out


def split_charge(charge: int, winners: Iterable[bytes]) -> list[tuple[bytes, int]]:
    """Equal split; the indivisible remainder goes to the lowest node id."""
    ws = sorted(set(winners))
    if not ws:
        return []
    share, rem = divmod(charge, len(ws))
    return [(w, share + (rem if i == 0 else 0)) for i, w in enumerate(ws)]


def settle_job(commits: Iterable[Commit], reveals: Iterable[Reveal], job: Job,
               execution_ctxs: Mapping[bytes, EvalContext | bytes],
               on_eval: Callable[[], None] | None = None) -> list[tuple[bytes, int]]:
    """Pay the job's charge to the best verified commit(s).

    Returns ``[(node_id, amount), ...]``; an empty list means no reveal
    verified and the caller decides between a retry and a refund.
    """
    ok = verified_commits(commits, reveals, job, execution_ctxs, on_eval)
    if not ok:
        return []
    best = min(c.eval_value for c in ok)
    return split_charge(job.charge, (c.miner_id for c in ok if c.eval_value == best))
