import itertools
import random

import pytest
import reedsolo
from hypothesis import given, settings, strategies as st

from caliper.ecc import (CodecParams, FragmentSet, decode_codeword, ecc_decode, ecc_encode,
                         gf_inverse, gf_mul, mask, partition, reassemble, rs_decode_block,
                         rs_encode_block, unmask)
from caliper.errors import DecodeFailure


def oracle(nsym):
    return reedsolo.RSCodec(nsym, fcr=0, prim=0x11D, generator=2)


@given(st.binary(min_size=1, max_size=200), st.integers(min_value=1, max_value=54))
@settings(max_examples=150, deadline=None)
def test_encode_matches_reference_codec(msg, nsym):
    assert rs_encode_block(msg, nsym) == bytes(oracle(nsym).encode(msg))


@given(st.data())
@settings(max_examples=100, deadline=None)
def test_decode_errors_and_erasures_within_bound(data):
    nsym = data.draw(st.integers(2, 40))
    msg = data.draw(st.binary(min_size=1, max_size=255 - nsym))
    cw = bytearray(rs_encode_block(msg, nsym))
    n = len(cw)
    erasures = data.draw(st.integers(0, min(nsym, n)))
    errors = data.draw(st.integers(0, (nsym - erasures) // 2))
    pos = data.draw(st.permutations(range(n)))[:erasures + errors]
    for p in pos:
        cw[p] ^= data.draw(st.integers(1, 255))
    got = rs_decode_block(bytes(cw), nsym, pos[:erasures])
    assert got == msg
    # the reference decoder agrees
    assert bytes(oracle(nsym).decode(bytes(cw), erase_pos=list(pos[:erasures]))[0]) == msg


def test_gf_field_inverse():
    for a in range(1, 256):
        assert gf_mul(a, gf_inverse(a)) == 1


def test_zero_parity_codeword_is_payload():
    p = CodecParams(16, 4, parity_symbols=0, checksum_len=0)
    k = bytes(range(16))
    assert ecc_encode(k, p) == k


def test_round_trip_default_profile():
    p = CodecParams(256, 128)
    k = random.Random(1).randbytes(256)
    assert ecc_decode(partition(ecc_encode(k, p), p.rows, p.fragment_len), p) == k


def test_16_byte_key_8_parity_exhaustive_positions():
    # 4 corrupted symbols always decode, 5 never yield a key
    p = CodecParams(16, 1, parity_symbols=8)
    k = bytes(range(100, 116))
    cw = ecc_encode(k, p)
    n = len(cw)
    rng = random.Random(2)
    for pos in itertools.combinations(range(n), 4):
        bad = bytearray(cw)
        for q in pos:
            bad[q] ^= rng.randrange(1, 256)
        assert decode_codeword(bytes(bad), p) == k
    for _ in range(3000):
        bad = bytearray(cw)
        for q in rng.sample(range(n), 5):
            bad[q] ^= rng.randrange(1, 256)
        with pytest.raises(DecodeFailure):
            decode_codeword(bytes(bad), p)


def test_erase_exactly_parity_symbols():
    p = CodecParams(40, 1, parity_symbols=12)
    k = bytes(range(40))
    cw = bytearray(ecc_encode(k, p))
    pos = random.Random(3).sample(range(len(cw)), 12)
    for q in pos:
        cw[q] = 0
    assert decode_codeword(bytes(cw), p, pos) == k


def test_random_fragments_never_decode_to_wrong_key():
    p = CodecParams(16, 4, parity_symbols=8)
    rng = random.Random(4)
    for _ in range(10_000):
        frags = [rng.randbytes(p.fragment_len) for _ in range(p.rows)]
        with pytest.raises(DecodeFailure):
            ecc_decode(FragmentSet(frags, p.fragment_len), p)


def test_mask_examples():
    assert mask(b"\xab", b"\xcd") == b"\x66"
    x = bytes(range(10))
    assert mask(x, bytes(10)) == x
    r = bytes(range(10, 20))
    assert unmask(mask(x, r), r) == x
    with pytest.raises(ValueError):
        mask(b"ab", b"a")


def test_partition_layout():
    fs = partition(b"\x00\x01\x02\x03", 2, 2)
    assert fs.fragments == [b"\x00\x01", b"\x02\x03"]
    one = partition(b"abc", 1, 4)
    assert one.fragments == [b"abc\x00"] and reassemble(one) == b"abc"
    with pytest.raises(ValueError):
        partition(b"abcde", 2, 2)


@given(st.binary(min_size=1, max_size=300), st.integers(1, 16))
def test_partition_round_trip(cw, m):
    L = -(-len(cw) // m)
    assert reassemble(partition(cw, m, L)) == cw


@given(st.binary(min_size=1, max_size=64), st.integers(1, 8), st.randoms())
def test_mask_distributes_over_partition(cw, m, rnd):
    pad = rnd.randbytes(len(cw))
    L = -(-len(cw) // m)
    whole = partition(mask(cw, pad), m, L).fragments
    parts = [mask(a, b) for a, b in zip(partition(cw, m, L).fragments,
                                        partition(pad, m, L).fragments)]
    assert whole == parts


def _fragment_errors(params, k, bad_rows, rng):
    """Flip every byte of the chosen fragments; return (fragments, per-block symbol errors)."""
    cw = ecc_encode(k, params)
    fs = partition(cw, params.rows, params.fragment_len)
    frags = list(fs.fragments)
    for m in bad_rows:
        frags[m] = bytes(b ^ rng.randrange(1, 256) for b in frags[m])
    errs = [0] * params.block_count
    for j in range(params.codeword_len):
        if j // params.fragment_len in bad_rows:
            errs[j % params.block_count] += 1
    return FragmentSet(frags, params.fragment_len, len(cw)), errs


@pytest.mark.parametrize("data_len,rows,parity", [(16, 4, 8), (16, 8, 16), (32, 8, 12),
                                                  (64, 16, 20), (256, 16, 32)])
def test_whole_fragment_corruption_frontier(data_len, rows, parity):
    """Exhaustive over subsets: success iff every block sees <= parity/2 symbol errors."""
    p = CodecParams(data_len, rows, parity)
    rng = random.Random(data_len * rows + parity)
    k = rng.randbytes(data_len)
    subsets = itertools.chain.from_iterable(itertools.combinations(range(rows), f)
                                            for f in range(rows + 1))
    if rows > 8:
        subsets = [tuple(range(f)) for f in range(rows + 1)]
    for bad in subsets:
        fs, errs = _fragment_errors(p, k, set(bad), rng)
        if max(errs) <= parity // 2:
            assert ecc_decode(fs, p) == k
        else:
            with pytest.raises(DecodeFailure):
                ecc_decode(fs, p)


def test_single_block_frontier_matches_fragment_len_rule():
    # one RS block: f whole fragments decode iff f * L <= parity // 2
    p = CodecParams(12, 8, parity_symbols=8)
    assert p.block_count == 1
    rng = random.Random(9)
    k = rng.randbytes(12)
    for f in range(p.rows + 1):
        fs, _ = _fragment_errors(p, k, set(range(f)), rng)
        if f * p.fragment_len <= 4:
            assert ecc_decode(fs, p) == k
        else:
            with pytest.raises(DecodeFailure):
                ecc_decode(fs, p)


def test_erased_rows_bound():
    p = CodecParams(256, 16, 32)
    rng = random.Random(5)
    k = rng.randbytes(256)
    cw = ecc_encode(k, p)
    e = p.max_erased_rows()
    frags = partition(cw, p.rows, p.fragment_len).fragments
    for bad in itertools.combinations(range(p.rows), e):
        fs = FragmentSet([None if i in bad else f for i, f in enumerate(frags)], p.fragment_len)
        assert ecc_decode(fs, p) == k
    worst = sorted(range(p.rows), key=lambda m: -p.row_load()[m][0])[:e + 1]
    fs = FragmentSet([None if i in worst else f for i, f in enumerate(frags)], p.fragment_len)
    with pytest.raises(DecodeFailure):
        ecc_decode(fs, p)


def test_default_profile_shape():
    p = CodecParams(256, 128)
    assert (p.block_count, p.block_len, p.codeword_len, p.fragment_len) == (2, 162, 324, 3)


def test_codec_params_round_trip_and_validation():
    p = CodecParams(256, 16, 32)
    assert CodecParams.from_bytes(p.to_bytes()) == p
    with pytest.raises(ValueError):
        CodecParams(256, 16, 32, fragment_len=2)
    with pytest.raises(ValueError):
        CodecParams(256, 16, -1)
