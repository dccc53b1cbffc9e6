"""Built-in programs: the empty-job evaluator, random search, and TSP.

All programs are generated from Python so that problem constants
(city count, coordinates) are baked in as immediates.  The TSP
evaluator has no data-dependent branches, so its step count depends
only on the number of cities.
"""

from __future__ import annotations

from functools import lru_cache

from .isa import CTX_BASE, INPUT_BASE, Program, assemble

TSP_SCALE = 1 << 16  # fixed-point units per coordinate unit
TSP_DOMAIN = 1 << 24  # coordinates live in [0, TSP_DOMAIN)
PERTURB_OFFSET = 256  # keeps perturbed coordinates non-negative
ISQRT_TOP_BIT = 1 << 50  # highest power of four the squared distances can reach

# evaluator scratch memory
_TOT, _INV, _K, _X, _R, _M, _CA, _CB, _P, _SM = range(10)
_XT, _YT, _SEEN = 0x100, 0x200, 0x300

# searcher scratch memory
_BEST, _CNT, _A1, _A2 = range(4)


def constant_evaluator(value: int = 0) -> Program:
    """``PUSH value; HALT``: the evaluator of the empty (proof-of-work) job."""
    return assemble([("PUSH", value), ("HALT",)])


@lru_cache(maxsize=256)
def random_search_program(length: int, alphabet: int = 256) -> Program:
    """Fill ``length`` input bytes uniformly from ``range(alphabet)`` and evaluate, forever."""
    if not 0 <= length <= 4096 or not 1 <= alphabet <= 256:
        raise ValueError("length must be in 0..4096 and alphabet in 1..256")
    code: list = ["loop:"]
    for k in range(length):
        code += [("RAND",), ("PUSH", alphabet), ("MOD",), ("PUSH", INPUT_BASE + k), ("STORE",)]
    code += [("PUSH", length), ("EVAL",), ("POP",), ("JMP", "loop")]
    return assemble(code)


def perturbation(ctx_words, q: int) -> int:
    """Signed offset applied to coordinate number ``q`` (x of city i is 2i, y is 2i+1)."""
    bits = (ctx_words[(q // 7) % 4] >> (9 * (q % 7))) & 0x1FF
    mag = bits & 0xFF
    return -mag if bits >> 8 else mag


def _perturbed_coordinate(code: list, q: int, base: int, dest: int) -> None:
    code += [
        ("PUSH", CTX_BASE + (q // 7) % 4), ("LOAD",), ("PUSH", 9 * (q % 7)), ("SHR",),
        ("PUSH", 0x1FF), ("AND",), ("DUP",), ("PUSH", _P), ("STORE",),
        ("PUSH", 0xFF), ("AND",),
        ("PUSH", _P), ("LOAD",), ("PUSH", 8), ("SHR",),
        ("PUSH", 0), ("SWAP",), ("SUB",),  # sign mask: 0 or all ones
        ("DUP",), ("PUSH", _SM), ("STORE",),
        ("XOR",), ("PUSH", _SM), ("LOAD",), ("SUB",),  # conditional negate
        ("PUSH", base + PERTURB_OFFSET), ("ADD",), ("PUSH", dest), ("STORE",),
    ]


def _isqrt_unrolled(code: list) -> None:
    # digit-by-digit square root of mem[_X] into mem[_R], branch-free
    bit = ISQRT_TOP_BIT
    while bit:
        code += [
            ("PUSH", _R), ("LOAD",), ("PUSH", bit), ("ADD",),  # t = r + bit
            ("DUP",), ("PUSH", _X), ("LOAD",), ("SWAP",), ("LT",),
            ("PUSH", 0), ("EQ",),  # x >= t
            ("PUSH", 0), ("SWAP",), ("SUB",),  # mask
            ("DUP",), ("PUSH", _M), ("STORE",),
            ("AND",),
            ("PUSH", _X), ("LOAD",), ("SWAP",), ("SUB",), ("PUSH", _X), ("STORE",),
            ("PUSH", _R), ("LOAD",), ("PUSH", 1), ("SHR",),
            ("PUSH", bit), ("PUSH", _M), ("LOAD",), ("AND",), ("ADD",),
            ("PUSH", _R), ("STORE",),
        ]
        bit >>= 2


def _coord_sq_diff(code: list, table: int) -> None:
    code += [
        ("PUSH", _CA), ("LOAD",), ("PUSH", table), ("ADD",), ("LOAD",),
        ("PUSH", _CB), ("LOAD",), ("PUSH", table), ("ADD",), ("LOAD",),
        ("SUB",), ("DUP",), ("MUL",),
    ]


def tsp_evaluator(cities) -> Program:
    """Tour length for a candidate permutation of ``cities``.

    ``cities`` is a sequence of integer (x, y) pairs in ``[0, TSP_DOMAIN)``.
    The candidate is one byte per visited city.  Each coordinate is moved
    by a context-derived offset of at most 255 fixed-point units before
    measuring, so a result cannot be replayed under another context.
    Anything that is not a permutation of ``range(n)`` scores WORST.
    """
    n = len(cities)
    if not 1 <= n <= 255:
        raise ValueError("city count must be in 1..255")
    for x, y in cities:
        if not (0 <= x < TSP_DOMAIN and 0 <= y < TSP_DOMAIN):
            raise ValueError("city coordinates must lie in [0, 2**24)")

    code: list = []
    for i, (x, y) in enumerate(cities):
        _perturbed_coordinate(code, 2 * i, x, _XT + i)
        _perturbed_coordinate(code, 2 * i + 1, y, _YT + i)

    # validity: exact length, every byte a city index, no repeats
    code += [("INPUTLEN",), ("PUSH", n), ("EQ",), ("PUSH", 0), ("EQ",), ("PUSH", _INV), ("STORE",)]
    code += [("PUSH", 0), ("PUSH", _K), ("STORE",), "check:"]
    code += [
        ("PUSH", _K), ("LOAD",), ("PUSH", INPUT_BASE), ("ADD",), ("LOAD",),
        ("DUP",), ("PUSH", _CA), ("STORE",),
        ("PUSH", n), ("LT",), ("PUSH", 0), ("EQ",),
        ("PUSH", _CA), ("LOAD",), ("PUSH", _SEEN), ("ADD",), ("LOAD",), ("OR",),
        ("PUSH", _INV), ("LOAD",), ("OR",), ("PUSH", _INV), ("STORE",),
        ("PUSH", 1), ("PUSH", _CA), ("LOAD",), ("PUSH", _SEEN), ("ADD",), ("STORE",),
        ("PUSH", _K), ("LOAD",), ("PUSH", 1), ("ADD",), ("DUP",), ("PUSH", _K), ("STORE",),
        ("PUSH", n), ("EQ",), ("JZ", "check"),
    ]

    # tour length: n edges, each an integer square root of dx^2 + dy^2
    code += [("PUSH", 0), ("PUSH", _K), ("STORE",), "edge:"]
    code += [
        ("PUSH", _K), ("LOAD",), ("PUSH", INPUT_BASE), ("ADD",), ("LOAD",), ("PUSH", _CA), ("STORE",),
        ("PUSH", _K), ("LOAD",), ("PUSH", 1), ("ADD",), ("PUSH", n), ("MOD",),
        ("PUSH", INPUT_BASE), ("ADD",), ("LOAD",), ("PUSH", _CB), ("STORE",),
    ]
    _coord_sq_diff(code, _XT)
    _coord_sq_diff(code, _YT)
    code += [("ADD",), ("PUSH", _X), ("STORE",), ("PUSH", 0), ("PUSH", _R), ("STORE",)]
    _isqrt_unrolled(code)
    code += [
        ("PUSH", _TOT), ("LOAD",), ("PUSH", _R), ("LOAD",), ("ADD",), ("PUSH", _TOT), ("STORE",),
        ("PUSH", _K), ("LOAD",), ("PUSH", 1), ("ADD",), ("DUP",), ("PUSH", _K), ("STORE",),
        ("PUSH", n), ("EQ",), ("JZ", "edge"),
    ]
    # invalid tours: TOT | (0 - INV) is all ones
    code += [
        ("PUSH", _TOT), ("LOAD",), ("PUSH", 0), ("PUSH", _INV), ("LOAD",), ("SUB",), ("OR",),
        ("HALT",),
    ]
    return assemble(code)


def _swap_code() -> list:
    return [
        ("PUSH", _A1), ("LOAD",), ("LOAD",),
        ("PUSH", _A2), ("LOAD",), ("LOAD",),
        ("PUSH", _A1), ("LOAD",), ("STORE",),
        ("PUSH", _A2), ("LOAD",), ("STORE",),
    ]


def tsp_searcher(n: int, restart_after: int | None = None) -> Program:
    """Random-restart swap hill climber over tours of ``n`` cities.

    Each restart draws a fresh random tour (Fisher-Yates), then proposes
    random two-city swaps, keeping any that do not lengthen the tour.
    """
    if not 2 <= n <= 255:
        raise ValueError("city count must be in 2..255")
    if restart_after is None:
        restart_after = 4 * n * n
    code: list = []
    for k in range(n):
        code += [("PUSH", k), ("PUSH", INPUT_BASE + k), ("STORE",)]
    code.append("restart:")
    for i in range(n - 1, 0, -1):
        code += [
            ("RAND",), ("PUSH", i + 1), ("MOD",), ("PUSH", INPUT_BASE), ("ADD",), ("PUSH", _A1), ("STORE",),
            ("PUSH", INPUT_BASE + i), ("PUSH", _A2), ("STORE",),
        ]
        code += _swap_code()
    code += [
        ("PUSH", n), ("EVAL",), ("PUSH", _BEST), ("STORE",),
        ("PUSH", 0), ("PUSH", _CNT), ("STORE",),
        "step:",
        ("PUSH", _CNT), ("LOAD",), ("PUSH", 1), ("ADD",), ("DUP",), ("PUSH", _CNT), ("STORE",),
        ("PUSH", restart_after), ("EQ",), ("JZ", "propose"), ("JMP", "restart"),
        "propose:",
        ("RAND",), ("PUSH", n), ("MOD",), ("PUSH", INPUT_BASE), ("ADD",), ("PUSH", _A1), ("STORE",),
        ("RAND",), ("PUSH", n), ("MOD",), ("PUSH", INPUT_BASE), ("ADD",), ("PUSH", _A2), ("STORE",),
    ]
    code += _swap_code()
    code += [
        ("PUSH", n), ("EVAL",),
        ("DUP",), ("PUSH", _BEST), ("LOAD",), ("SWAP",), ("LT",),  # best < v: worse
        ("JZ", "keep"),
        ("POP",),
    ]
    code += _swap_code()
    code += [
        ("JMP", "step"),
        "keep:",
        ("PUSH", _BEST), ("STORE",), ("JMP", "step"),
    ]
    return assemble(code)


def random_cities(n: int, rng) -> list[tuple[int, int]]:
    """``n`` uniform random cities, kept clear of the domain edge so perturbed
    coordinates stay inside it."""
    hi = TSP_DOMAIN - 2 * PERTURB_OFFSET
    return [(rng.randrange(hi), rng.randrange(hi)) for _ in range(n)]
