import hashlib

import pytest
from hypothesis import given, strategies as st

from posearch.consensus import ChainParams
from posearch.core import (
    Block, Commit, EncodingError, Miniblock, Nonce, Payout, Reveal, ScheduleEntry, Transaction,
    canonical_encode, decode, decode_chain_file, derive_seed, encode_chain_file, hash_object,
    leading_zero_bits, node_id, node_name, read_chain_file, write_chain_file,
)

from conftest import build_chain, tsp_job

h32 = st.binary(min_size=32, max_size=32)
nid = st.binary(min_size=8, max_size=8)
u64 = st.integers(0, 2**64 - 1)


@given(h32, st.integers(0, 65535), nid, st.binary(max_size=64), u64)
def test_miniblock_round_trip(prev, slot, miner, cand, value):
    mb = Miniblock(prev, slot, miner, Nonce(cand, value))
    assert decode(canonical_encode(mb)) == mb


@given(nid, nid, u64, u64)
def test_transaction_round_trip(a, b, amount, seq):
    tx = Transaction(a, b, amount, seq)
    assert decode(canonical_encode(tx), Transaction) == tx


def test_other_objects_round_trip():
    objs = [
        ScheduleEntry(bytes(32), 12, 400),
        Commit(bytes([1]) * 32, node_id("m"), 77, bytes([2]) * 32),
        Reveal(bytes([1]) * 32, node_id("m"), b"\x00\x01\x02"),
        Payout(node_id("m"), 5, 1, bytes([3]) * 32),
    ]
    for o in objs:
        assert decode(canonical_encode(o)) == o


def test_hash_is_sha256_of_canonical_encoding():
    tx = Transaction(node_id("a"), node_id("b"), 3, 0)
    assert hash_object(tx) == hashlib.sha256(canonical_encode(tx)).digest()
    assert hash_object(b"abc") == hashlib.sha256(b"abc").digest()


def test_field_order_matters():
    a = Transaction(node_id("a"), node_id("b"), 1, 2)
    b = Transaction(node_id("a"), node_id("b"), 2, 1)
    assert hash_object(a) != hash_object(b)


def test_decode_rejects_garbage():
    tx = canonical_encode(Transaction(node_id("a"), node_id("b"), 1, 2))
    with pytest.raises(EncodingError):
        decode(b"")
    with pytest.raises(EncodingError):
        decode(b"\xff" + tx[1:])
    with pytest.raises(EncodingError):
        decode(tx + b"\x00")
    with pytest.raises(EncodingError):
        decode(tx[:-1])
    with pytest.raises(EncodingError):
        decode(tx, Miniblock)


def test_leading_zero_bits():
    assert leading_zero_bits(bytes(32)) == 256
    assert leading_zero_bits(b"\x80" + bytes(31)) == 0
    assert leading_zero_bits(b"\x00\x01" + bytes(30)) == 15


def test_node_ids():
    assert node_id(5) == (5).to_bytes(8, "big")
    assert node_name(node_id("alice")) == "alice"
    with pytest.raises(ValueError):
        node_id("much-too-long")


def test_derive_seed_separates_streams():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b") != derive_seed(2, "a")


def test_block_identity_survives_compaction():
    params = ChainParams(n_target=1, z_min=2, z_max=2)
    job, _ = tsp_job(5)
    m = build_chain(params, 3, {0: [job]}, {node_id("client"): 10_000})
    block = m.active.blocks[1]
    assert block.new_jobs
    from dataclasses import replace
    slim = replace(block, miniblocks=None, new_jobs=tuple(j.compact() for j in block.new_jobs))
    assert hash_object(slim) == hash_object(block)
    assert len(canonical_encode(slim)) < len(canonical_encode(block))


def test_chain_file_round_trip(tmp_path):
    params = ChainParams(n_target=3, z_min=2, z_max=2)
    m = build_chain(params, 4)
    blocks = m.active.blocks
    pending = [Miniblock(blocks[-1].prev_block_hash, 0, node_id("x"), Nonce(b"ab", 1))]
    data = encode_chain_file(blocks, pending)
    assert decode_chain_file(data) == (blocks, pending)
    path = tmp_path / "c.posc"
    write_chain_file(path, blocks)
    assert read_chain_file(path) == (blocks, [])
    with pytest.raises(EncodingError):
        decode_chain_file(b"JUNK" + data[4:])
    assert isinstance(blocks[0], Block)
