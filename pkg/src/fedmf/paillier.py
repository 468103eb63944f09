"""Paillier cryptosystem with signed fixed-point encoding of reals.

Plaintexts live in Z_n. Reals are carried as ``(mantissa, exponent)`` pairs
where ``x ~= mantissa * 2**exponent`` and negative mantissas are stored as
``n - |mantissa|``. Only the mantissa is ever encrypted; the exponent travels
in the clear and every value in one computation shares the same exponent, so
ciphertexts can be added without rescaling.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from fedmf.arith import from_hex, gcd, invert, is_probable_prime, mpz, powmod, random_prime

DEFAULT_KEY_BITS = 1024
DEFAULT_EXPONENT = -40
# Reserve 2**20 accumulated additions before a sum can wrap past max_number.
HEADROOM_BITS = 20


class EncodingError(ValueError):
    """Raised when a value cannot be represented or decoded safely."""


class KeyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int
    g: int = field(init=False)
    n_squared: int = field(init=False)
    max_number: int = field(init=False)

    def __post_init__(self):
        if self.n < 15:
            raise ValueError(f"modulus too small: {self.n}")
        n = mpz(self.n)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "g", n + 1)
        object.__setattr__(self, "n_squared", n * n)
        object.__setattr__(self, "max_number", n // 2)

    @property
    def key_bits(self) -> int:
        return int(self.n).bit_length()

    def __repr__(self):
        return f"PaillierPublicKey(key_bits={self.key_bits})"


@dataclass(frozen=True)
class PaillierSecretKey:
    """Factorisation of ``n`` plus the precomputed decryption constants."""

    p: int
    q: int
    public_key: PaillierPublicKey
    lambda_: int = field(init=False, repr=False)
    mu: int = field(init=False, repr=False)

    def __post_init__(self):
        p, q = mpz(self.p), mpz(self.q)
        if p == q:
            raise ValueError("p and q must differ")
        if p * q != self.public_key.n:
            raise KeyMismatchError("p * q does not equal the public modulus")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        n, nsq = self.public_key.n, self.public_key.n_squared
        lam = mpz(math.lcm(int(p) - 1, int(q) - 1))
        object.__setattr__(self, "lambda_", lam)
        object.__setattr__(self, "mu", invert(_L(powmod(self.public_key.g, lam, nsq), n), n))
        # CRT constants for decryption and key-holder encryption.
        p2, q2 = p * p, q * q
        object.__setattr__(self, "_p2", p2)
        object.__setattr__(self, "_q2", q2)
        object.__setattr__(self, "_hp", invert(_L(powmod(self.public_key.g, p - 1, p2), p), p))
        object.__setattr__(self, "_hq", invert(_L(powmod(self.public_key.g, q - 1, q2), q), q))
        object.__setattr__(self, "_p_inv_q", invert(p, q))
        object.__setattr__(self, "_p2_inv_q2", invert(p2, q2))

    def __repr__(self):
        return f"PaillierSecretKey(key_bits={self.public_key.key_bits})"


@dataclass(frozen=True, slots=True)
class Ciphertext:
    value: int
    exponent: int = 0


@dataclass(frozen=True, slots=True)
class EncodedNumber:
    mantissa: int
    exponent: int


def _L(x, n):
    return (x - 1) // n


def keygen(key_bits: int = DEFAULT_KEY_BITS, seed: int | None = None,
           rng: random.Random | None = None,
           primes: tuple[int, int] | None = None):
    """Generate a Paillier key pair with an exactly ``key_bits``-bit modulus.

    Args:
        key_bits: modulus length; must be even and at least 8.
        seed: makes generation reproducible (tests and benchmarks only).
        rng: explicit randomness source, overrides ``seed``.
        primes: inject fixed primes instead of generating them.

    Returns:
        tuple: ``(PaillierPublicKey, PaillierSecretKey)``
    """
    if primes is not None:
        p, q = primes
        for x in (p, q):
            if not is_probable_prime(x):
                raise ValueError(f"{x} is not prime")
        pk = PaillierPublicKey(p * q)
        return pk, PaillierSecretKey(p, q, pk)

    if key_bits < 8 or key_bits % 2:
        raise ValueError(f"key_bits must be even and >= 8, got {key_bits}")
    if rng is None:
        rng = random.Random(seed) if seed is not None else random.SystemRandom()
    half = key_bits // 2
    while True:
        p = random_prime(half, rng)
        q = random_prime(half, rng)
        n = p * q
        if p != q and n.bit_length() == key_bits and math.gcd(n, (p - 1) * (q - 1)) == 1:
            break
    pk = PaillierPublicKey(n)
    return pk, PaillierSecretKey(p, q, pk)


_system_rng = random.SystemRandom()


def _random_unit(n, rng) -> int:
    while True:
        r = rng.randrange(1, int(n))
        if gcd(r, n) == 1:
            return r


def encrypt(pk: PaillierPublicKey, m: int, r: int | None = None,
            rng: random.Random | None = None) -> Ciphertext:
    """Encrypt an integer ``0 <= m < n`` as ``g**m * r**n mod n**2``."""
    if not 0 <= m < pk.n:
        raise ValueError("plaintext out of range [0, n)")
    if r is None:
        r = _random_unit(pk.n, rng or _system_rng)
    elif gcd(r, pk.n) != 1:
        raise ValueError("r must be coprime to n")
    nsq = pk.n_squared
    # g = n + 1, so g**m = 1 + m*n (mod n**2)
    gm = (1 + m * pk.n) % nsq
    return Ciphertext(gm * powmod(r, pk.n, nsq) % nsq)


def encrypt_with_secret(sk: PaillierSecretKey, m: int,
                        rng: random.Random | None = None) -> Ciphertext:
    """Encrypt using the factorisation of ``n`` to draw the obfuscator faster.

    The n-th residues mod n**2 split by CRT into the order-(p-1) subgroup of
    Z*_{p^2} and the order-(q-1) subgroup of Z*_{q^2}; ``b**p mod p**2`` for
    uniform ``b`` in [1, p) is uniform on the first, and likewise for q. The
    resulting ciphertext has the same distribution as :func:`encrypt`.
    """
    pk = sk.public_key
    if not 0 <= m < pk.n:
        raise ValueError("plaintext out of range [0, n)")
    rng = rng or _system_rng
    p2, q2 = sk._p2, sk._q2
    a_p = powmod(rng.randrange(1, int(sk.p)), sk.p, p2)
    a_q = powmod(rng.randrange(1, int(sk.q)), sk.q, q2)
    rn = a_p + p2 * ((a_q - a_p) * sk._p2_inv_q2 % q2)
    nsq = pk.n_squared
    return Ciphertext((1 + m * pk.n) % nsq * rn % nsq)


def decrypt(sk: PaillierSecretKey, c: Ciphertext | int, crt: bool = True) -> int:
    """Recover the plaintext integer in [0, n).

    ``crt=False`` evaluates ``L(c**lambda mod n**2) * mu mod n`` directly.
    """
    pk = sk.public_key
    value = c.value if isinstance(c, Ciphertext) else mpz(c)
    if not 0 <= value < pk.n_squared:
        raise ValueError("ciphertext out of range [0, n**2)")
    if gcd(value, pk.n) != 1:
        raise ValueError("ciphertext is not invertible modulo n")
    if not crt:
        return _L(powmod(value, sk.lambda_, pk.n_squared), pk.n) * sk.mu % pk.n
    p, q = sk.p, sk.q
    mp = _L(powmod(value, p - 1, sk._p2), p) * sk._hp % p
    mq = _L(powmod(value, q - 1, sk._q2), q) * sk._hq % q
    return mp + ((mq - mp) * sk._p_inv_q % q) * p


def add_cipher(pk: PaillierPublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """Homomorphic addition: decrypts to ``(m1 + m2) mod n``."""
    if c1.exponent != c2.exponent:
        raise EncodingError(f"exponent mismatch: {c1.exponent} != {c2.exponent}")
    return Ciphertext(c1.value * c2.value % pk.n_squared, c1.exponent)


def add_plain(pk: PaillierPublicKey, c: Ciphertext, m2: int) -> Ciphertext:
    """Add a plaintext integer: ``c * g**m2 mod n**2``."""
    if not 0 <= m2 < pk.n:
        raise ValueError("plaintext out of range [0, n)")
    nsq = pk.n_squared
    return Ciphertext(c.value * ((1 + m2 * pk.n) % nsq) % nsq, c.exponent)


def mul_plain(pk: PaillierPublicKey, c: Ciphertext, k: int) -> Ciphertext:
    """Multiply by a plaintext integer: ``c**k mod n**2``."""
    if not 0 <= k < pk.n:
        raise ValueError("scalar out of range [0, n)")
    return Ciphertext(powmod(c.value, k, pk.n_squared), c.exponent)


def sub_cipher(pk: PaillierPublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    """``c1 - c2`` as ``c1 * c2**(n-1)``."""
    return add_cipher(pk, c1, mul_plain(pk, c2, pk.n - 1))


def encode(x: float, exponent: int, pk: PaillierPublicKey,
           headroom_bits: int = HEADROOM_BITS) -> EncodedNumber:
    """Encode a real as ``round(x * 2**-exponent) mod n``.

    Raises:
        EncodingError: if ``|mantissa|`` reaches ``max_number >> headroom_bits``
            or ``x`` is not finite.
    """
    if not math.isfinite(x):
        raise EncodingError(f"cannot encode non-finite value {x!r}")
    try:
        mantissa = round(math.ldexp(x, -exponent))
    except OverflowError:
        raise EncodingError(f"{x!r} overflows the encoding at exponent {exponent}") from None
    if abs(mantissa) >= pk.max_number >> headroom_bits:
        raise EncodingError(f"{x!r} overflows the encoding at exponent {exponent}")
    return EncodedNumber(mantissa % pk.n, exponent)


def decode(e: EncodedNumber, pk: PaillierPublicKey) -> float:
    """Map a mantissa back to a signed real; the middle band is an error."""
    n, max_number = pk.n, pk.max_number
    if e.mantissa < max_number:
        signed = e.mantissa
    elif e.mantissa > n - max_number:
        signed = e.mantissa - n
    else:
        raise EncodingError("mantissa lies in the overflow band; value corrupted")
    return math.ldexp(int(signed), e.exponent)


def encrypt_encoded(pk: PaillierPublicKey, e: EncodedNumber, r: int | None = None,
                    rng: random.Random | None = None) -> Ciphertext:
    c = encrypt(pk, e.mantissa, r=r, rng=rng)
    return Ciphertext(c.value, e.exponent)


def decrypt_encoded(sk: PaillierSecretKey, c: Ciphertext) -> EncodedNumber:
    return EncodedNumber(decrypt(sk, c), c.exponent)


def encrypt_real(sk: PaillierSecretKey, x: float, exponent: int = DEFAULT_EXPONENT,
                 rng: random.Random | None = None) -> Ciphertext:
    """Encode and encrypt on the key-holder fast path."""
    e = encode(x, exponent, sk.public_key)
    return Ciphertext(encrypt_with_secret(sk, e.mantissa, rng).value, exponent)


def decrypt_real(sk: PaillierSecretKey, c: Ciphertext) -> float:
    return decode(decrypt_encoded(sk, c), sk.public_key)


def ciphertext_to_hex(c: Ciphertext) -> str:
    return format(c.value, "x")


def ciphertext_from_hex(s: str, exponent: int) -> Ciphertext:
    return Ciphertext(from_hex(s), exponent)
