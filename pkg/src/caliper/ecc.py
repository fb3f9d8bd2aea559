"""Reed-Solomon key codec over GF(2^8).

The private key is extended with a short checksum, split into equal RS
blocks, and the block codewords are byte-interleaved so that one bad
fragment spreads its damage across every block.  Field: primitive
polynomial 0x11D, generator 2, first consecutive root 0.
"""

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from math import ceil

import numpy as np

from .encoding import digest, pack_fields, u32, unpack_fields, as_int
from .errors import DecodeFailure

PRIM = 0x11D
FIELD_MAX = 255

GF_EXP = [0] * 512
GF_LOG = [0] * 256


def _init_tables():
    x = 1
    for i in range(FIELD_MAX):
        GF_EXP[i] = x
        GF_LOG[x] = i
        x <<= 1
        if x & 0x100:
            x ^= PRIM
    for i in range(FIELD_MAX, 512):
        GF_EXP[i] = GF_EXP[i - FIELD_MAX]


_init_tables()
_EXP = np.array(GF_EXP, dtype=np.uint8)
_LOG = np.array(GF_LOG, dtype=np.int64)


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return GF_EXP[GF_LOG[a] + GF_LOG[b]]


def gf_div(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("division by zero in GF(256)")
    if a == 0:
        return 0
    return GF_EXP[(GF_LOG[a] + FIELD_MAX - GF_LOG[b]) % FIELD_MAX]


def gf_pow(a: int, power: int) -> int:
    return GF_EXP[(GF_LOG[a] * power) % FIELD_MAX]


def gf_inverse(a: int) -> int:
    return GF_EXP[FIELD_MAX - GF_LOG[a]]


# Polynomials are coefficient lists, highest degree first.

def poly_scale(p, x):
    return [gf_mul(c, x) for c in p]


def poly_add(p, q):
    r = [0] * max(len(p), len(q))
    for i, c in enumerate(p):
        r[i + len(r) - len(p)] = c
    for i, c in enumerate(q):
        r[i + len(r) - len(q)] ^= c
    return r


def poly_mul(p, q):
    r = [0] * (len(p) + len(q) - 1)
    for j, b in enumerate(q):
        if b == 0:
            continue
        for i, a in enumerate(p):
            if a:
                r[i + j] ^= gf_mul(a, b)
    return r


def poly_eval(p, x):
    y = p[0]
    for c in p[1:]:
        y = gf_mul(y, x) ^ c
    return y


@lru_cache(maxsize=64)
def _power_grid(n: int, count: int):
    # exponent of alpha^(i * (n-1-j)) for evaluation point i and coefficient j
    i = np.arange(count, dtype=np.int64)[:, None]
    j = np.arange(n, dtype=np.int64)[None, :]
    return (i * (n - 1 - j)) % FIELD_MAX


def poly_eval_many(p, count: int) -> np.ndarray:
    """Evaluate ``p`` at alpha^0 .. alpha^(count-1) in one vectorised pass."""
    c = np.asarray(p, dtype=np.int64)
    nz = c != 0
    if not nz.any():
        return np.zeros(count, dtype=np.uint8)
    grid = _power_grid(len(c), count)[:, nz]
    terms = _EXP[(grid + _LOG[c[nz]][None, :]) % FIELD_MAX]
    return np.bitwise_xor.reduce(terms, axis=1)


def poly_divmod(dividend, divisor):
    out = list(dividend)
    for i in range(len(dividend) - (len(divisor) - 1)):
        coef = out[i]
        if coef:
            for j in range(1, len(divisor)):
                if divisor[j]:
                    out[i + j] ^= gf_mul(divisor[j], coef)
    sep = -(len(divisor) - 1)
    return out[:sep], out[sep:]


_GENERATORS: dict[int, list[int]] = {}


def generator_poly(nsym: int) -> list[int]:
    g = _GENERATORS.get(nsym)
    if g is None:
        g = [1]
        for i in range(nsym):
            g = poly_mul(g, [1, gf_pow(2, i)])
        _GENERATORS[nsym] = g
    return g


def rs_encode_block(msg: bytes, nsym: int) -> bytes:
    """Systematic encoding: ``msg`` followed by ``nsym`` parity bytes."""
    if len(msg) + nsym > FIELD_MAX:
        raise ValueError(f"block of {len(msg) + nsym} symbols exceeds {FIELD_MAX}")
    if nsym == 0:
        return bytes(msg)
    gen = generator_poly(nsym)
    out = list(msg) + [0] * nsym
    for i in range(len(msg)):
        coef = out[i]
        if coef:
            for j in range(1, len(gen)):
                out[i + j] ^= gf_mul(gen[j], coef)
    return bytes(msg) + bytes(out[len(msg):])


def _syndromes(msg, nsym):
    # leading zero keeps the indexing of the errata routines aligned
    return [0] + poly_eval_many(msg, nsym).tolist()


def _errata_locator(coef_pos):
    loc = [1]
    for p in coef_pos:
        loc = poly_mul(loc, poly_add([1], [gf_pow(2, p), 0]))
    return loc


def _error_evaluator(synd, err_loc, nsym):
    _, rem = poly_divmod(poly_mul(synd, err_loc), [1] + [0] * (nsym + 1))
    return rem


def _correct_errata(msg, synd, err_pos):
    coef_pos = [len(msg) - 1 - p for p in err_pos]
    err_loc = _errata_locator(coef_pos)
    err_eval = _error_evaluator(synd[::-1], err_loc, len(err_loc) - 1)[::-1]
    xs = [gf_pow(2, p) for p in coef_pos]
    correction = [0] * len(msg)
    for i, xi in enumerate(xs):
        xi_inv = gf_inverse(xi)
        denom = 1
        for j, xj in enumerate(xs):
            if j != i:
                denom = gf_mul(denom, 1 ^ gf_mul(xi_inv, xj))
        if denom == 0:
            raise DecodeFailure("degenerate errata locator")
        y = gf_mul(xi, poly_eval(err_eval[::-1], xi_inv))
        correction[err_pos[i]] = gf_div(y, denom)
    return [a ^ b for a, b in zip(msg, correction)]


def _error_locator(fsynd, nsym, erase_count):
    # Berlekamp-Massey on the Forney syndromes
    err_loc = [1]
    old_loc = [1]
    shift = len(fsynd) - nsym if len(fsynd) > nsym else 0
    for i in range(nsym - erase_count):
        k = i + shift
        delta = fsynd[k]
        for j in range(1, len(err_loc)):
            delta ^= gf_mul(err_loc[-(j + 1)], fsynd[k - j])
        old_loc = old_loc + [0]
        if delta:
            if len(old_loc) > len(err_loc):
                new_loc = poly_scale(old_loc, delta)
                old_loc = poly_scale(err_loc, gf_inverse(delta))
                err_loc = new_loc
            err_loc = poly_add(err_loc, poly_scale(old_loc, delta))
    while err_loc and err_loc[0] == 0:
        del err_loc[0]
    errs = len(err_loc) - 1
    if errs * 2 + erase_count > nsym:
        raise DecodeFailure("too many errors to correct")
    return err_loc


def _find_errors(err_loc, nmess):
    errs = len(err_loc) - 1
    roots = np.flatnonzero(poly_eval_many(err_loc, nmess) == 0)
    positions = [nmess - 1 - int(i) for i in roots]
    if len(positions) != errs:
        raise DecodeFailure("Chien search root count does not match locator degree")
    return positions


def _forney_syndromes(synd, erase_pos, nmess):
    fsynd = list(synd[1:])
    for p in erase_pos:
        x = gf_pow(2, nmess - 1 - p)
        for j in range(len(fsynd) - 1):
            fsynd[j] = gf_mul(fsynd[j], x) ^ fsynd[j + 1]
    return fsynd


def rs_decode_block(block: bytes, nsym: int, erase_pos=()) -> bytes:
    """Correct up to ``2*errors + erasures <= nsym`` and return the message part.

    Raises DecodeFailure when the received word is beyond the decoding radius
    (a miscorrection to a different codeword is still possible; callers
    carry their own integrity check).
    """
    msg = list(block)
    erase_pos = sorted(set(erase_pos))
    if len(erase_pos) > nsym:
        raise DecodeFailure("too many erasures to correct")
    for p in erase_pos:
        msg[p] = 0
    if nsym == 0:
        return bytes(msg)
    synd = _syndromes(msg, nsym)
    if max(synd) == 0:
        return bytes(msg[:-nsym])
    fsynd = _forney_syndromes(synd, erase_pos, len(msg))
    err_loc = _error_locator(fsynd, nsym, len(erase_pos))
    err_pos = _find_errors(err_loc[::-1], len(msg))
    msg = _correct_errata(msg, synd, erase_pos + err_pos)
    if max(_syndromes(msg, nsym)) > 0:
        raise DecodeFailure("could not correct block")
    return bytes(msg[:-nsym])


# ---------------------------------------------------------------------------
# key codec


@dataclass(frozen=True)
class CodecParams:
    """Shape of a key codeword and its split into table rows.

    ``rows`` is the number of fragments (one per server-table row).  A
    ``fragment_len`` of 0 means "smallest length that fits the codeword".
    """

    data_len: int
    rows: int
    parity_symbols: int = 32
    fragment_len: int = 0
    checksum_len: int = 4

    def __post_init__(self):
        if self.data_len < 1 or self.rows < 1:
            raise ValueError("data_len and rows must be positive")
        if self.parity_symbols < 0 or not 0 <= self.checksum_len <= 32:
            raise ValueError("invalid parity or checksum length")
        if self.parity_symbols >= FIELD_MAX:
            raise ValueError("parity budget exceeds RS block length")
        if self.fragment_len == 0:
            object.__setattr__(self, "fragment_len", ceil(self.codeword_len / self.rows))
        if self.rows * self.fragment_len < self.codeword_len:
            raise ValueError(
                f"{self.rows} fragments of {self.fragment_len} bytes cannot hold "
                f"a {self.codeword_len}-byte codeword")

    @property
    def payload_len(self) -> int:
        return self.data_len + self.checksum_len

    @property
    def block_count(self) -> int:
        return ceil(self.payload_len / (FIELD_MAX - self.parity_symbols))

    @property
    def block_data_len(self) -> int:
        return ceil(self.payload_len / self.block_count)

    @property
    def block_len(self) -> int:
        return self.block_data_len + self.parity_symbols

    @property
    def codeword_len(self) -> int:
        return self.block_count * self.block_len

    def block_position(self, j: int) -> tuple[int, int]:
        """Map codeword byte ``j`` to ``(block, offset)`` under interleaving."""
        return j % self.block_count, j // self.block_count

    def row_load(self) -> list[list[int]]:
        """``load[m][b]``: codeword symbols of block ``b`` carried by fragment ``m``."""
        load = [[0] * self.block_count for _ in range(self.rows)]
        for j in range(self.codeword_len):
            load[j // self.fragment_len][j % self.block_count] += 1
        return load

    def max_erased_rows(self) -> int:
        """Largest number of arbitrary rows that can be erased and still decode."""
        load = self.row_load()
        worst = 0
        for e in range(1, self.rows + 1):
            for b in range(self.block_count):
                col = sorted((row[b] for row in load), reverse=True)
                if sum(col[:e]) > self.parity_symbols:
                    return worst
            worst = e
        return worst

    def to_bytes(self) -> bytes:
        return pack_fields(u32(self.data_len), u32(self.rows), u32(self.parity_symbols),
                           u32(self.fragment_len), u32(self.checksum_len))

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodecParams":
        d, m, p, f, c = (as_int(x) for x in unpack_fields(data, 5))
        return cls(data_len=d, rows=m, parity_symbols=p, fragment_len=f, checksum_len=c)


def key_checksum(k_pr: bytes, length: int) -> bytes:
    return digest(b"caliper-key-check" + k_pr)[:length]


def ecc_encode(k_pr: bytes, params: CodecParams) -> bytes:
    if len(k_pr) != params.data_len:
        raise ValueError(f"key is {len(k_pr)} bytes, params expect {params.data_len}")
    payload = k_pr + key_checksum(k_pr, params.checksum_len)
    k, b = params.block_data_len, params.block_count
    payload = payload.ljust(k * b, b"\x00")
    blocks = [rs_encode_block(payload[i * k:(i + 1) * k], params.parity_symbols)
              for i in range(b)]
    out = bytearray(params.codeword_len)
    for j in range(params.codeword_len):
        blk, off = params.block_position(j)
        out[j] = blocks[blk][off]
    return bytes(out)


def row_codeword(k_pr: bytes, params: CodecParams) -> bytes:
    """The codeword extended to ``rows * fragment_len`` bytes.

    The tail is keyed off ``k_pr`` rather than zero-filled: it gives nothing
    away about which column is real, yet a client that has recovered the
    key can still check every row, including ones beyond the codeword.
    """
    cw = ecc_encode(k_pr, params)
    extra = params.rows * params.fragment_len - len(cw)
    if extra <= 0:
        return cw
    return cw + hashlib.shake_256(b"caliper-tail" + bytes(k_pr)).digest(extra)


def decode_codeword(codeword: bytes, params: CodecParams, erasures=()) -> bytes:
    """Recover ``k_pr`` from a (possibly damaged) interleaved codeword."""
    if len(codeword) != params.codeword_len:
        raise ValueError("codeword length does not match params")
    b = params.block_count
    blocks = [bytearray() for _ in range(b)]
    erased = [[] for _ in range(b)]
    erasures = set(erasures)
    for j, byte in enumerate(codeword):
        blk, off = params.block_position(j)
        blocks[blk].append(byte)
        if j in erasures:
            erased[blk].append(off)
    payload = b"".join(rs_decode_block(bytes(blocks[i]), params.parity_symbols, erased[i])
                       for i in range(b))
    k_pr = payload[:params.data_len]
    check = payload[params.data_len:params.payload_len]
    if check != key_checksum(k_pr, params.checksum_len) or any(payload[params.payload_len:]):
        raise DecodeFailure("key checksum mismatch")
    return k_pr


@dataclass
class FragmentSet:
    """Fixed-size fragments of a codeword; ``None`` marks an erased slot."""

    fragments: list
    fragment_len: int
    length: int = field(default=0)

    def __post_init__(self):
        for f in self.fragments:
            if f is not None and len(f) != self.fragment_len:
                raise ValueError(f"fragment of {len(f)} bytes, expected {self.fragment_len}")

    @property
    def erased(self) -> list[bool]:
        return [f is None for f in self.fragments]

    def __len__(self):
        return len(self.fragments)


def partition(codeword: bytes, rows: int, fragment_len: int) -> FragmentSet:
    if rows < 1 or fragment_len < 1 or rows * fragment_len < len(codeword):
        raise ValueError("codeword does not fit in the requested fragments")
    padded = codeword.ljust(rows * fragment_len, b"\x00")
    frags = [padded[i * fragment_len:(i + 1) * fragment_len] for i in range(rows)]
    return FragmentSet(frags, fragment_len, len(codeword))


def reassemble(fs: FragmentSet) -> bytes:
    if any(fs.erased):
        raise ValueError("cannot reassemble a fragment set with erasures")
    return b"".join(fs.fragments)[:fs.length]


def ecc_decode(fragments: FragmentSet, params: CodecParams) -> bytes:
    if len(fragments) != params.rows or fragments.fragment_len != params.fragment_len:
        raise ValueError("fragment set is not shaped for these codec params")
    L = params.fragment_len
    buf = bytearray()
    erasures = []
    for m, frag in enumerate(fragments.fragments):
        if frag is None:
            erasures.extend(range(m * L, (m + 1) * L))
            buf += bytes(L)
        else:
            buf += frag
    n = params.codeword_len
    return decode_codeword(bytes(buf[:n]), params, [e for e in erasures if e < n])


def mask(fragment: bytes, pad: bytes) -> bytes:
    """Byte-wise XOR; applying the same pad twice restores the input."""
    if len(fragment) != len(pad):
        raise ValueError(f"length mismatch: {len(fragment)} vs {len(pad)}")
    return bytes(a ^ b for a, b in zip(fragment, pad))


unmask = mask
