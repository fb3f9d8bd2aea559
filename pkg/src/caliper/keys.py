"""Signing keys and envelope keys.

Signing keys are RSA with PKCS#1 v1.5 / SHA-256.  Only the private
exponent ``d`` is vaulted (as ``key_bits // 8`` big-endian bytes); the
signer is rebuilt from ``d`` and the public numbers at verification time.
Primes are drawn from an injected ``Entropy`` so seeded simulations produce
the same keys on every run.
"""

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa, x25519

from .entropy import as_entropy

PUBLIC_EXPONENT = 65537


def _prime(bits: int, rng) -> int:
    while True:
        cand = int.from_bytes(rng.bytes(bits // 8), "big")
        cand |= (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits and gmpy2.gcd(PUBLIC_EXPONENT, p - 1) == 1:
            return p


def generate_signing_key(rng, key_bits: int = 2048) -> rsa.RSAPrivateKey:
    if key_bits % 16 or key_bits < 512:
        raise ValueError("key_bits must be a multiple of 16 and at least 512")
    rng = as_entropy(rng)
    if not rng.deterministic:
        return rsa.generate_private_key(PUBLIC_EXPONENT, key_bits)
    while True:
        p = _prime(key_bits // 2, rng)
        q = _prime(key_bits // 2, rng)
        if p != q and (p * q).bit_length() == key_bits:
            break
    return _from_factors(p, q)


def _from_factors(p: int, q: int) -> rsa.RSAPrivateKey:
    if p < q:
        p, q = q, p
    n = p * q
    d = int(gmpy2.invert(PUBLIC_EXPONENT, (p - 1) * (q - 1)))
    numbers = rsa.RSAPrivateNumbers(
        p, q, d, rsa.rsa_crt_dmp1(d, p), rsa.rsa_crt_dmq1(d, q), rsa.rsa_crt_iqmp(p, q),
        rsa.RSAPublicNumbers(PUBLIC_EXPONENT, n))
    return numbers.private_key(unsafe_skip_rsa_key_validation=True)


def public_bytes(key) -> bytes:
    if isinstance(key, rsa.RSAPrivateKey):
        key = key.public_key()
    return key.public_bytes(serialization.Encoding.DER,
                            serialization.PublicFormat.SubjectPublicKeyInfo)


def load_public(k_pu: bytes) -> rsa.RSAPublicKey:
    key = serialization.load_der_public_key(k_pu)
    if not isinstance(key, rsa.RSAPublicKey):
        raise ValueError("not an RSA public key")
    return key


def modulus_len(k_pu: bytes) -> int:
    return (load_public(k_pu).key_size + 7) // 8


def private_exponent_bytes(key: rsa.RSAPrivateKey) -> bytearray:
    return bytearray(key.private_numbers().d.to_bytes((key.key_size + 7) // 8, "big"))


def signer_from_exponent(k_pu: bytes, d_bytes: bytes) -> rsa.RSAPrivateKey:
    pub = load_public(k_pu).public_numbers()
    d = int.from_bytes(d_bytes, "big")
    p = _recover_factor(pub.n, pub.e, d)
    return _from_factors(p, pub.n // p)


def _recover_factor(n: int, e: int, d: int) -> int:
    # same walk as rsa_recover_prime_factors, with gmpy2 arithmetic and fixed bases
    k = gmpy2.mpz(d * e - 1)
    if k <= 0 or k % 2:
        raise ValueError("private exponent does not match the public key")
    t = k
    while t % 2 == 0:
        t //= 2
    for g in range(2, 1000):
        x = gmpy2.powmod(g, t, n)
        spins = t
        while spins < k:
            y = gmpy2.powmod(x, 2, n)
            if x != 1 and x != n - 1 and y == 1:
                p = int(gmpy2.gcd(x - 1, n))
                if 1 < p < n:
                    return p
            x = y
            spins *= 2
    raise ValueError("unable to factor modulus from private exponent")


def sign(key: rsa.RSAPrivateKey, message: bytes) -> bytes:
    return key.sign(message, padding.PKCS1v15(), hashes.SHA256())


def verify(k_pu: bytes, signature: bytes, message: bytes) -> bool:
    try:
        load_public(k_pu).verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
    except (InvalidSignature, ValueError):
        return False
    return True


class BoxKey:
    """X25519 key pair used to address sealed envelopes."""

    def __init__(self, private: x25519.X25519PrivateKey):
        self.private = private
        self.public = private.public_key().public_bytes(serialization.Encoding.Raw,
                                                         serialization.PublicFormat.Raw)

    @classmethod
    def generate(cls, rng) -> "BoxKey":
        return cls(x25519.X25519PrivateKey.from_private_bytes(as_entropy(rng).bytes(32)))

    def private_bytes(self) -> bytes:
        return self.private.private_bytes(serialization.Encoding.Raw,
                                          serialization.PrivateFormat.Raw,
                                          serialization.NoEncryption())

    @classmethod
    def from_private_bytes(cls, raw: bytes) -> "BoxKey":
        return cls(x25519.X25519PrivateKey.from_private_bytes(raw))
