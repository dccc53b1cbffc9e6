"""Chain data types, canonical encoding and hashing.

Encoding rules, applied recursively:

* an object is one tag byte followed by its fields in declared order;
* every field is a u32 big-endian length followed by its payload;
* integers are fixed-width big-endian, byte strings are raw;
* a list payload is a u32 count followed by each element encoded as a field;
* an absent optional value has an empty payload.

A block's identity is the hash of its header, which commits to the body
through per-section digests.  That lets old blocks drop job programs and
miniblock bodies without changing any hash.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from typing import Any, Iterable

from .evalvm.isa import MAX_CANDIDATE, Program, ProgramError

WORST = (1 << 64) - 1
U64_MAX = WORST
ZERO_HASH = bytes(32)


class EncodingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tags

TAG_NONCE = 0x01
TAG_MINIBLOCK = 0x02
TAG_JOB = 0x03
TAG_TRANSACTION = 0x04
TAG_SCHEDULE_ENTRY = 0x05
TAG_COMMIT = 0x06
TAG_REVEAL = 0x07
TAG_PAYOUT = 0x08
TAG_BLOCK_HEADER = 0x09
TAG_BLOCK = 0x0A
TAG_JOB_SUMMARY = 0x0B

# tags for derived hashes that are not objects
TAG_EVAL_CONTEXT = 0x20
TAG_SOLUTION = 0x21
TAG_JOB_CONTENT = 0x22
TAG_SECTION = 0x23
TAG_TIP = 0x24
TAG_SEED = 0x25

# payout reasons
MINT = 0
CHARGE = 1
REFUND = 2
GENESIS = 3
PAYOUT_REASONS = {MINT: "mint", CHARGE: "charge", REFUND: "refund", GENESIS: "genesis"}


# ---------------------------------------------------------------------------
# hashing helpers


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _field(payload: bytes) -> bytes:
    return len(payload).to_bytes(4, "big") + payload


def tagged_hash(tag: int, *parts: bytes) -> bytes:
    """SHA-256 over a tag byte and length-prefixed parts."""
    h = hashlib.sha256(bytes([tag]))
    for p in parts:
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return h.digest()


def leading_zero_bits(h: bytes) -> int:
    return 8 * len(h) - int.from_bytes(h, "big").bit_length()


def node_id(x: Any) -> bytes:
    """8-byte node identifier from an int, an 8-byte value, or a short name."""
    if isinstance(x, bytes):
        if len(x) != 8:
            raise ValueError("node ids are 8 bytes")
        return x
    if isinstance(x, int):
        return x.to_bytes(8, "big")
    s = str(x)
    raw = s.encode()
    if len(raw) > 8:
        raise ValueError(f"node name {s!r} longer than 8 bytes")
    return raw.rjust(8, b"\0")


def node_name(nid: bytes) -> str:
    stripped = nid.lstrip(b"\0")
    try:
        text = stripped.decode("ascii")
        if text.isprintable() and text:
            return text
    except UnicodeDecodeError:
        pass
    return nid.hex()


def check_amount(value: int) -> int:
    if not 0 <= value <= U64_MAX:
        raise OverflowError(f"amount {value} out of u64 range")
    return value


# ---------------------------------------------------------------------------
# field kinds


class _Kind:
    def enc(self, v) -> bytes:
        raise NotImplementedError

    def dec(self, b: bytes):
        raise NotImplementedError


class _Fixed(_Kind):
    def __init__(self, n: int):
        self.n = n

    def enc(self, v):
        if not isinstance(v, (bytes, bytearray)) or len(v) != self.n:
            raise EncodingError(f"expected {self.n} bytes")
        return bytes(v)

    def dec(self, b):
        if len(b) != self.n:
            raise EncodingError(f"expected {self.n} bytes")
        return bytes(b)


class _Uint(_Kind):
    def __init__(self, width: int):
        self.width = width

    def enc(self, v):
        if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < 1 << (8 * self.width):
            raise EncodingError(f"integer {v!r} does not fit {self.width} bytes")
        return v.to_bytes(self.width, "big")

    def dec(self, b):
        if len(b) != self.width:
            raise EncodingError("bad integer width")
        return int.from_bytes(b, "big")


class _Bool(_Kind):
    def enc(self, v):
        return b"\x01" if v else b"\x00"

    def dec(self, b):
        if b not in (b"\x00", b"\x01"):
            raise EncodingError("bad boolean")
        return b == b"\x01"


class _Bytes(_Kind):
    def __init__(self, maxlen: int):
        self.maxlen = maxlen

    def enc(self, v):
        if len(v) > self.maxlen:
            raise EncodingError(f"byte string longer than {self.maxlen}")
        return bytes(v)

    def dec(self, b):
        if len(b) > self.maxlen:
            raise EncodingError(f"byte string longer than {self.maxlen}")
        return bytes(b)


class _OptProgram(_Kind):
    def enc(self, v):
        return b"" if v is None else v.to_bytes()

    def dec(self, b):
        if not b:
            return None
        try:
            return Program.from_bytes(bytes(b))
        except ProgramError as exc:
            raise EncodingError(str(exc)) from None


class _Obj(_Kind):
    def __init__(self, cls):
        self.cls = cls

    def enc(self, v):
        if not isinstance(v, self.cls):
            raise EncodingError(f"expected {self.cls.__name__}")
        return canonical_encode(v)

    def dec(self, b):
        return decode(bytes(b), self.cls)


class _List(_Kind):
    def __init__(self, item: _Kind, optional: bool = False):
        self.item = item
        self.optional = optional

    def enc(self, v):
        if v is None:
            if not self.optional:
                raise EncodingError("list may not be absent")
            return b""
        parts = [len(v).to_bytes(4, "big")]
        for x in v:
            parts.append(_field(self.item.enc(x)))
        return b"".join(parts)

    def dec(self, b):
        if not b and self.optional:
            return None
        r = _Reader(b)
        count = r.u32()
        out = tuple(self.item.dec(r.field()) for _ in range(count))
        r.done()
        return out


class _Reader:
    def __init__(self, b: bytes):
        self.b = memoryview(b)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.b):
            raise EncodingError("truncated input")
        out = bytes(self.b[self.pos : self.pos + n])
        self.pos += n
        return out

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def field(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self.pos != len(self.b):
            raise EncodingError("trailing bytes")


H32 = _Fixed(32)
ID = _Fixed(8)
U8 = _Uint(1)
U16 = _Uint(2)
U64 = _Uint(8)


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Nonce:
    candidate: bytes
    eval_value: int

    _tag = TAG_NONCE
    _schema = (("candidate", _Bytes(MAX_CANDIDATE)), ("eval_value", U64))


@dataclass(frozen=True)
class Miniblock:
    prev_block_hash: bytes
    job_slot: int
    miner_id: bytes
    nonce: Nonce

    _tag = TAG_MINIBLOCK
    _schema = (("prev_block_hash", H32), ("job_slot", U16), ("miner_id", ID), ("nonce", _Obj(Nonce)))


@dataclass(frozen=True)
class Job:
    """A search request.  ``evaluator``/``searcher`` are None once compacted."""

    job_id: bytes
    client_id: bytes
    charge: int
    evaluator: Program | None
    searcher: Program | None
    eval_step_budget: int
    is_empty: bool = False
    salt: int = 0

    _tag = TAG_JOB
    _schema = (
        ("job_id", H32), ("client_id", ID), ("charge", U64), ("evaluator", _OptProgram()),
        ("searcher", _OptProgram()), ("eval_step_budget", U64), ("is_empty", _Bool()), ("salt", U64),
    )

    @classmethod
    def create(cls, client_id: bytes, charge: int, evaluator: Program, searcher: Program,
               eval_step_budget: int, is_empty: bool = False, salt: int = 0) -> "Job":
        jid = job_content_hash(client_id, charge, evaluator, searcher, eval_step_budget, is_empty, salt)
        return cls(jid, client_id, charge, evaluator, searcher, eval_step_budget, is_empty, salt)

    @property
    def compacted(self) -> bool:
        return self.evaluator is None or self.searcher is None

    def content_hash(self) -> bytes:
        return job_content_hash(self.client_id, self.charge, self.evaluator, self.searcher,
                                self.eval_step_budget, self.is_empty, self.salt)

    def summary(self) -> "JobSummary":
        return JobSummary(self.job_id, self.client_id, self.charge, self.eval_step_budget, self.is_empty, self.salt)

    def compact(self) -> "Job":
        return replace(self, evaluator=None, searcher=None)


def job_content_hash(client_id, charge, evaluator, searcher, eval_step_budget, is_empty, salt) -> bytes:
    if evaluator is None or searcher is None:
        raise EncodingError("cannot hash a job without its programs")
    return tagged_hash(
        TAG_JOB_CONTENT, ID.enc(client_id), U64.enc(charge), evaluator.to_bytes(), searcher.to_bytes(),
        U64.enc(eval_step_budget), _Bool().enc(is_empty), U64.enc(salt),
    )


@dataclass(frozen=True)
class JobSummary:
    job_id: bytes
    client_id: bytes
    charge: int
    eval_step_budget: int
    is_empty: bool
    salt: int

    _tag = TAG_JOB_SUMMARY
    _schema = (
        ("job_id", H32), ("client_id", ID), ("charge", U64), ("eval_step_budget", U64),
        ("is_empty", _Bool()), ("salt", U64),
    )


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    recipient: bytes
    amount: int
    seq: int

    _tag = TAG_TRANSACTION
    _schema = (("sender", ID), ("recipient", ID), ("amount", U64), ("seq", U64))


@dataclass(frozen=True)
class ScheduleEntry:
    job_id: bytes
    z: int
    per_eval_steps: int

    _tag = TAG_SCHEDULE_ENTRY
    _schema = (("job_id", H32), ("z", U8), ("per_eval_steps", U64))


@dataclass(frozen=True)
class Commit:
    job_id: bytes
    miner_id: bytes
    eval_value: int
    solution_hash: bytes

    _tag = TAG_COMMIT
    _schema = (("job_id", H32), ("miner_id", ID), ("eval_value", U64), ("solution_hash", H32))


@dataclass(frozen=True)
class Reveal:
    job_id: bytes
    miner_id: bytes
    solution: bytes

    _tag = TAG_REVEAL
    _schema = (("job_id", H32), ("miner_id", ID), ("solution", _Bytes(MAX_CANDIDATE)))


@dataclass(frozen=True)
class Payout:
    node_id: bytes
    amount: int
    reason: int
    ref: bytes = ZERO_HASH  # job id for CHARGE and REFUND

    _tag = TAG_PAYOUT
    _schema = (("node_id", ID), ("amount", U64), ("reason", U8), ("ref", H32))


@dataclass(frozen=True)
class BlockHeader:
    prev_block_hash: bytes
    height: int
    timestamp: int
    miniblock_hashes: tuple
    transactions_digest: bytes
    jobs_digest: bytes
    schedule_digest: bytes
    commits_digest: bytes
    reveals_digest: bytes
    payouts_digest: bytes

    _tag = TAG_BLOCK_HEADER
    _schema = (
        ("prev_block_hash", H32), ("height", U64), ("timestamp", U64), ("miniblock_hashes", _List(H32)),
        ("transactions_digest", H32), ("jobs_digest", H32), ("schedule_digest", H32),
        ("commits_digest", H32), ("reveals_digest", H32), ("payouts_digest", H32),
    )


@dataclass(frozen=True)
class Block:
    prev_block_hash: bytes
    height: int
    timestamp: int = 0
    miniblock_hashes: tuple = ()
    transactions: tuple = ()
    new_jobs: tuple = ()
    schedule: tuple = ()
    commits: tuple = ()
    reveals: tuple = ()
    payouts: tuple = ()
    miniblocks: tuple | None = ()  # None once compacted

    _tag = TAG_BLOCK
    _schema = (
        ("prev_block_hash", H32), ("height", U64), ("timestamp", U64), ("miniblock_hashes", _List(H32)),
        ("transactions", _List(_Obj(Transaction))), ("new_jobs", _List(_Obj(Job))),
        ("schedule", _List(_Obj(ScheduleEntry))), ("commits", _List(_Obj(Commit))),
        ("reveals", _List(_Obj(Reveal))), ("payouts", _List(_Obj(Payout))),
        ("miniblocks", _List(_Obj(Miniblock), optional=True)),
    )

    def header(self) -> BlockHeader:
        return BlockHeader(
            self.prev_block_hash, self.height, self.timestamp, tuple(self.miniblock_hashes),
            section_digest(self.transactions),
            section_digest([j.summary() for j in self.new_jobs]),
            section_digest(self.schedule),
            section_digest(self.commits),
            section_digest(self.reveals),
            section_digest(self.payouts),
        )

    @property
    def compacted(self) -> bool:
        return self.miniblocks is None or any(j.compacted for j in self.new_jobs)


def section_digest(items: Iterable) -> bytes:
    items = list(items)
    parts = [len(items).to_bytes(4, "big")] + [canonical_encode(x) for x in items]
    return tagged_hash(TAG_SECTION, *parts)


_TYPES = {cls._tag: cls for cls in (Nonce, Miniblock, Job, JobSummary, Transaction, ScheduleEntry,
                                    Commit, Reveal, Payout, BlockHeader, Block)}


# ---------------------------------------------------------------------------
# codec


def canonical_encode(obj) -> bytes:
    schema = getattr(type(obj), "_schema", None)
    if schema is None:
        raise EncodingError(f"cannot encode {type(obj).__name__}")
    parts = [bytes([obj._tag])]
    for name, kind in schema:
        parts.append(_field(kind.enc(getattr(obj, name))))
    return b"".join(parts)


def decode(data: bytes, expected: type | None = None):
    if not data:
        raise EncodingError("empty input")
    cls = _TYPES.get(data[0])
    if cls is None:
        raise EncodingError(f"unknown tag {data[0]:#x}")
    if expected is not None and cls is not expected:
        raise EncodingError(f"expected {expected.__name__}, found {cls.__name__}")
    r = _Reader(data)
    r.take(1)
    values = {name: kind.dec(r.field()) for name, kind in cls._schema}
    r.done()
    return cls(**values)


def hash_object(obj) -> bytes:
    """SHA-256 identity of a chain object; raw bytes hash as themselves.

    A block hashes as its header so that compaction keeps its identity.
    """
    if isinstance(obj, (bytes, bytearray, memoryview)):
        return sha256(bytes(obj))
    memo = obj.__dict__.get("_digest")  # objects are frozen, so the digest never changes
    if memo is None:
        target = obj.header() if isinstance(obj, Block) else obj
        memo = sha256(canonical_encode(target))
        obj.__dict__["_digest"] = memo
    return memo


def solution_hash(miner_id: bytes, solution: bytes) -> bytes:
    return tagged_hash(TAG_SOLUTION, miner_id, solution)


def eval_context_bytes(prev_block_hash: bytes, job_slot: int, miner_id: bytes) -> bytes:
    return tagged_hash(TAG_EVAL_CONTEXT, prev_block_hash, U16.enc(job_slot), miner_id)


def derive_seed(*parts: bytes | int | str) -> int:
    """64-bit seed derived from arbitrary parts (PRNG stream separation)."""
    raw = []
    for p in parts:
        if isinstance(p, int):
            raw.append(p.to_bytes(16, "big", signed=True))
        elif isinstance(p, str):
            raw.append(p.encode())
        else:
            raw.append(bytes(p))
    return int.from_bytes(tagged_hash(TAG_SEED, *raw)[:8], "big")


# ---------------------------------------------------------------------------
# chain files

CHAIN_MAGIC = b"POSC"
CHAIN_VERSION = 1


def write_chain_file(path, blocks: Iterable[Block], pending: Iterable[Miniblock] = ()) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_chain_file(blocks, pending))


def encode_chain_file(blocks: Iterable[Block], pending: Iterable[Miniblock] = ()) -> bytes:
    out = [CHAIN_MAGIC, bytes([CHAIN_VERSION])]
    for obj in list(blocks) + list(pending):
        enc = canonical_encode(obj)
        out.append(struct.pack(">I", len(enc)))
        out.append(enc)
    return b"".join(out)


def decode_chain_file(data: bytes) -> tuple[list[Block], list[Miniblock]]:
    if data[:4] != CHAIN_MAGIC:
        raise EncodingError("not a chain file")
    if len(data) < 5 or data[4] != CHAIN_VERSION:
        raise EncodingError("unsupported chain file version")
    r = _Reader(data[5:])
    blocks, pending = [], []
    while r.pos < len(r.b):
        obj = decode(r.field())
        if isinstance(obj, Block):
            if pending:
                raise EncodingError("block after pending miniblocks")
            blocks.append(obj)
        elif isinstance(obj, Miniblock):
            pending.append(obj)
        else:
            raise EncodingError(f"unexpected {type(obj).__name__} record")
    return blocks, pending


def read_chain_file(path) -> tuple[list[Block], list[Miniblock]]:
    with open(path, "rb") as fh:
        return decode_chain_file(fh.read())

