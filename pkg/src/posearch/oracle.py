"""Exhaustive TSP checker, written independently of the VM evaluator.

Used to confirm that tours found on chain are optimal.  It re-derives the
context-dependent coordinate offsets from the raw context bytes and uses
``math.isqrt`` for edge lengths, so it shares no code with the programs
it checks.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

OFFSET = 256
WORST = (1 << 64) - 1


def _context_words(ctx: bytes) -> list[int]:
    if len(ctx) != 32:
        raise ValueError("context must be 32 bytes")
    return [int.from_bytes(ctx[i:i + 8], "big") for i in range(0, 32, 8)]


def shifted_cities(cities: Sequence[tuple[int, int]], ctx: bytes) -> list[tuple[int, int]]:
    """Coordinates as the evaluator sees them under ``ctx``.

    Coordinate number q (x of city i is 2i, y is 2i+1) is moved by a
    9-bit sign-magnitude value taken from bit 9*(q mod 7) of context word
    (q div 7) mod 4, then shifted by +256 to stay non-negative.
    """
    words = _context_words(ctx)
    out = []
    for i, (x, y) in enumerate(cities):
        moved = []
        for q, base in ((2 * i, x), (2 * i + 1, y)):
            raw = (words[(q // 7) % 4] >> (9 * (q % 7))) & 0x1FF
            delta = raw & 0xFF
            if raw & 0x100:
                delta = -delta
            moved.append(base + OFFSET + delta)
        out.append((moved[0], moved[1]))
    return out


def tour_length(cities: Sequence[tuple[int, int]], ctx: bytes, tour: Sequence[int]) -> int:
    """Evaluator-equivalent tour length; WORST for anything but a permutation."""
    n = len(cities)
    if len(tour) != n or sorted(tour) != list(range(n)):
        return WORST
    pts = shifted_cities(cities, ctx)
    total = 0
    for a, b in zip(tour, list(tour[1:]) + [tour[0]]):
        dx = pts[a][0] - pts[b][0]
        dy = pts[a][1] - pts[b][1]
        total += math.isqrt(dx * dx + dy * dy)
    return total


def brute_force(cities: Sequence[tuple[int, int]], ctx: bytes) -> tuple[int, tuple[int, ...]]:
    """Shortest tour over all permutations starting at city 0."""
    n = len(cities)
    if not 1 <= n <= 10:
        raise ValueError("brute force is limited to 1..10 cities")
    best, best_tour = WORST, tuple(range(n))
    for rest in itertools.permutations(range(1, n)):
        tour = (0,) + rest
        length = tour_length(cities, ctx, tour)
        if length < best:
            best, best_tour = length, tour
    return best, best_tour
