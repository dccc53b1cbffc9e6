"""posearch command line.

Subcommands: ``sim run``, ``analyze fork``, ``analyze blocktime``,
``chain verify``, ``asm`` and ``demo tsp``.  Seeds default to the
``POSEARCH_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; exits with status 1."""


def _default_seed() -> int:
    raw = os.environ.get("POSEARCH_SEED")
    if raw is None:
        return 0
    try:
        return int(raw, 0)
    except ValueError:
        raise UsageError(f"POSEARCH_SEED is not an integer: {raw!r}") from None


def _seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def parse_range(text: str) -> list[float]:
    """``a:b:step`` (inclusive of b) or a comma-separated list."""
    try:
        if ":" in text:
            parts = [float(x) for x in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            lo, hi, step = parts
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step))
            vals = [round(lo + i * step, 12) for i in range(n + 1)]
            return [v for v in vals if v <= hi + 1e-12]
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"invalid range {text!r}; use a:b:step or a comma list") from None
    if not vals:
        raise UsageError(f"empty range {text!r}")
    return vals


def parse_ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"invalid integer list {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise UsageError("N values must be positive integers")
    return vals


# ---------------------------------------------------------------------------
# sim run


def write_outputs(report, cfg, out: Path) -> None:
    from .core import write_chain_file

    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    report.write_trace_csv(out / "trace.csv")
    (out / "params.json").write_text(json.dumps(cfg.chain_params.to_dict(), indent=2, sort_keys=True) + "\n")
    if report.final_chain is not None:
        write_chain_file(out / "chain.posc", report.final_chain.blocks, report.final_chain.pending)
    else:
        report.write_abstract_chain_csv(out / "chain.csv")


def cmd_sim_run(args) -> int:
    from .netsim import ConfigError, ScenarioConfig, run_scenario

    try:
        cfg = ScenarioConfig.load(args.config)
        if args.seed is not None or "POSEARCH_SEED" in os.environ:
            cfg.seed = _seed(args)
        if args.mode:
            cfg.mode = args.mode
        if args.max_blocks is not None:
            cfg.max_blocks = args.max_blocks
        if args.no_trace:
            cfg.trace = False
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    report = run_scenario(cfg)
    out = Path(args.out)
    write_outputs(report, cfg, out)
    summary = report.to_json()
    print(f"scenario {cfg.name}: height {summary['height']}, forks {summary['forkCount']}, "
          f"jobs settled {sum(1 for j in summary['jobs'] if j.get('status') in ('paid', 'refunded'))}"
          f"/{len(summary['jobs'])}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _print_rows(rows) -> None:
    print("series,x,analytic,montecarlo,stderr")
    for s, x, a, mc, se in rows:
        tail = "" if mc is None else f",{mc:.6f},{se:.6f}"
        print(f"{s},{x:g},{a:.6f}{tail}")


def cmd_analyze_fork(args) -> int:
    from . import analysis

    ds = parse_range(args.d)
    if any(d < 0 for d in ds):
        raise UsageError("delays must be non-negative")
    Ns = parse_ints(args.n)
    if args.samples < 0:
        raise UsageError("samples must be non-negative")
    rows = analysis.fork_series(ds, Ns, args.samples, _seed(args))
    _finish_series(rows, args)
    return EXIT_OK


def cmd_analyze_blocktime(args) -> int:
    from . import analysis

    ts = parse_range(args.t)
    if any(t < 0 for t in ts):
        raise UsageError("times must be non-negative")
    Ns = parse_ints(args.n)
    if args.samples < 0:
        raise UsageError("samples must be non-negative")
    rows = analysis.blocktime_series(ts, Ns, args.samples, _seed(args))
    _finish_series(rows, args)
    return EXIT_OK


def _finish_series(rows, args) -> None:
    from . import analysis

    _print_rows(rows)
    if args.out:
        analysis.write_series_csv(rows, args.out)
        print(f"wrote {args.out}")
    dev = analysis.max_deviation(rows)
    if dev is not None:
        print(f"max |analytic - montecarlo| = {dev:.6f}")


# ---------------------------------------------------------------------------
# chain verify


def cmd_chain_verify(args) -> int:
    from .consensus import ChainParams, verify_chain
    from .core import EncodingError, read_chain_file

    path = Path(args.chain)
    params_path = Path(args.params) if args.params else path.with_name("params.json")
    try:
        blocks, pending = read_chain_file(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except EncodingError as exc:
        print(f"INVALID: malformed chain file ({exc})")
        return EXIT_RUNTIME
    try:
        params = ChainParams.from_dict(json.loads(params_path.read_text()))
    except OSError:
        raise UsageError(f"chain parameters not found at {params_path}; pass --params") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad chain parameters: {exc}") from None
    tip = bytes.fromhex(args.expected_tip) if args.expected_tip else None
    rep = verify_chain((blocks, pending), params, expected_tip=tip)
    if rep.ok:
        chain = rep.chain
        print(f"OK: {len(blocks)} blocks, {len(pending)} pending miniblocks, tip {chain.tip.hash.hex()}")
        return EXIT_OK
    print(f"INVALID: {rep.code} at height {rep.height}" + (f" ({rep.detail})" if rep.detail else ""))
    return EXIT_RUNTIME


# ---------------------------------------------------------------------------
# asm


def cmd_asm(args) -> int:
    from .evalvm.isa import Program, ProgramError, assemble, disassemble, validate_evaluator, validate_program

    try:
        data = Path(args.source).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {args.source}: {exc.strerror}") from None
    try:
        if args.disassemble:
            text = data.decode().strip() if args.hex else None
            program = Program.from_bytes(bytes.fromhex(text) if text is not None else data)
            print(disassemble(program))
            return EXIT_OK
        program = assemble(data.decode())
        (validate_evaluator if args.evaluator else validate_program)(program)
    except (ProgramError, ValueError, UnicodeDecodeError) as exc:
        raise UsageError(f"{args.source}: {exc}") from None
    code = program.to_bytes()
    if args.out:
        Path(args.out).write_bytes(code.hex().encode() + b"\n" if args.hex else code)
        print(f"wrote {len(program.instructions)} instructions to {args.out}")
    else:
        print(code.hex())
    return EXIT_OK


# ---------------------------------------------------------------------------
# demo tsp


def tsp_demo_scenario(cities: int, charge: int, rates: list[float], seed: int, z: int,
                      search: str = "sample") -> dict:
    """``search="sample"`` draws an independent random tour per evaluation, so a
    miner's chance of holding the best tour follows its share of evaluations;
    ``"climb"`` runs the swap hill climber."""
    miners = [{"id": f"miner{i}", "computeRate": r, "role": "miner"} for i, r in enumerate(rates)]
    problem = {"type": "tsp", "count": cities}
    if search == "sample":
        problem["restartAfter"] = 1
    return {
        "name": f"demo_tsp_{cities}", "mode": "faithful", "seed": seed, "duration": 1 << 40, "maxBlocks": 7,
        "nodes": miners + [{"id": "client", "role": "client", "balance": max(charge, 1) * 4}],
        "delayModel": {"type": "constant", "d": 1000},
        "chainParams": {"N_target": 1, "T": 1_000_000, "zMin": z, "zMax": z},
        "jobs": [{"submitTime": 0, "client": "client", "charge": charge, "evalStepBudget": 1 << 22,
                  "problem": problem}],
    }


def cmd_demo_tsp(args) -> int:
    from .core import eval_context_bytes, node_id
    from .netsim import ConfigError, ScenarioConfig, run_scenario
    from .oracle import brute_force

    if not 3 <= args.cities <= 12:
        raise UsageError("--cities must be between 3 and 12")
    if args.charge < 1:
        raise UsageError("--charge must be positive")
    rates = [float(x) for x in args.rates.split(",")] if args.rates else [0.05] * args.miners
    if len(rates) < 1 or any(r <= 0 for r in rates):
        raise UsageError("need at least one miner with a positive rate")
    try:
        cfg = ScenarioConfig.from_dict(tsp_demo_scenario(args.cities, args.charge, rates, _seed(args), args.z,
                                                          args.search))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    report = run_scenario(cfg)
    spec = cfg.jobs[0]
    print(f"cities: {spec.cities}")
    job = report.jobs[0] if report.jobs else {"status": "unregistered"}
    if job.get("status") != "paid":
        print(f"job not paid (status {job.get('status')})")
        return EXIT_RUNTIME
    tour = list(bytes.fromhex(job["solution"]))
    print(f"winning tour: {tour}")
    print(f"tour length: {job['evaluation']}")
    print(f"paid to: {', '.join(job['paidTo'])} (charge {spec.charge})")
    if args.cities <= 8:
        winner = job["paidTo"][0]
        ctx = eval_context_bytes(bytes.fromhex(job["scheduleBlock"]), job["slot"], node_id(winner))
        best, best_tour = brute_force(spec.cities, ctx)
        verdict = "optimal" if best == job["evaluation"] else "not optimal"
        print(f"brute-force optimum: {best} {list(best_tour)} ({verdict})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posearch", description="Simulate and verify a blockchain that mines by solving optimization jobs.")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run scenarios").add_subparsers(dest="sim_command", required=True)
    run = sim.add_parser("run", help="run a scenario file")
    run.add_argument("config", help="scenario JSON file")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.add_argument("--mode", choices=("faithful", "statistical"), default=None)
    run.add_argument("--max-blocks", type=int, default=None)
    run.add_argument("--no-trace", action="store_true", help="skip the event trace")
    run.set_defaults(func=cmd_sim_run)

    an = sub.add_parser("analyze", help="closed forms against Monte Carlo").add_subparsers(
        dest="analyze_command", required=True)
    fork = an.add_parser("fork", help="fork probability against delay")
    fork.add_argument("--d", default="0.0:0.2:0.01", help="delays in block intervals, a:b:step or list")
    fork.add_argument("--n", default="1,2,4,8", help="miniblocks per block, comma list")
    fork.add_argument("--samples", type=int, default=0, help="Monte Carlo blocks per point (0: analytic only)")
    fork.add_argument("--seed", type=int, default=None)
    fork.add_argument("--out", default=None, help="CSV output path")
    fork.set_defaults(func=cmd_analyze_fork)
    bt = an.add_parser("blocktime", help="block-time CDF")
    bt.add_argument("--t", default="0:3:0.1", help="times in block intervals, a:b:step or list")
    bt.add_argument("--n", default="1,4,16,64", help="miniblocks per block, comma list")
    bt.add_argument("--samples", type=int, default=0, help="Monte Carlo blocks per series (0: analytic only)")
    bt.add_argument("--seed", type=int, default=None)
    bt.add_argument("--out", default=None, help="CSV output path")
    bt.set_defaults(func=cmd_analyze_blocktime)

    ch = sub.add_parser("chain", help="chain files").add_subparsers(dest="chain_command", required=True)
    ver = ch.add_parser("verify", help="verify a chain file")
    ver.add_argument("chain", help="chain.posc file")
    ver.add_argument("--params", default=None, help="chain parameters JSON (default: params.json beside the chain)")
    ver.add_argument("--expected-tip", default=None, help="hex hash the tip block must have")
    ver.set_defaults(func=cmd_chain_verify)

    asm = sub.add_parser("asm", help="assemble or disassemble VM programs")
    asm.add_argument("source")
    asm.add_argument("--out", default=None)
    asm.add_argument("--disassemble", action="store_true")
    asm.add_argument("--hex", action="store_true", help="bytecode as hex text")
    asm.add_argument("--evaluator", action="store_true", help="also check evaluator restrictions")
    asm.set_defaults(func=cmd_asm)

    demo = sub.add_parser("demo", help="built-in demos").add_subparsers(dest="demo_command", required=True)
    tsp = demo.add_parser("tsp", help="post a random TSP job and mine it")
    tsp.add_argument("--cities", type=int, default=6)
    tsp.add_argument("--charge", type=int, default=1000)
    tsp.add_argument("--miners", type=int, default=2)
    tsp.add_argument("--rates", default=None, help="comma list of compute rates, overrides --miners")
    tsp.add_argument("--z", type=int, default=9, help="difficulty exponent for every slot")
    tsp.add_argument("--search", choices=("sample", "climb"), default="sample",
                     help="independent random tours (default) or swap hill climbing")
    tsp.add_argument("--seed", type=int, default=None)
    tsp.set_defaults(func=cmd_demo_tsp)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"internal check failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
