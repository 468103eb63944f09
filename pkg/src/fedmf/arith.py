"""Big-integer helpers: modular exponentiation, inverses and prime generation.

gmpy2 is used when importable; the pure-Python fallbacks are exact but
roughly an order of magnitude slower at 1024-bit moduli.
"""
from __future__ import annotations

import math
import random

try:
    import gmpy2

    HAVE_GMPY2 = True
except ImportError:  # pragma: no cover - exercised only without gmpy2
    gmpy2 = None
    HAVE_GMPY2 = False

MILLER_RABIN_ROUNDS = 64

_SMALL_PRIMES = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67,
    71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149,
    151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
]


def mpz(x):
    """Convert to the fastest available integer type."""
    return gmpy2.mpz(x) if HAVE_GMPY2 else int(x)


def powmod(base, exponent, modulus):
    if HAVE_GMPY2:
        return gmpy2.powmod(base, exponent, modulus)
    return pow(base, exponent, modulus)


def gcd(a, b):
    if HAVE_GMPY2:
        return gmpy2.gcd(a, b)
    return math.gcd(int(a), int(b))


def from_hex(s: str):
    return gmpy2.mpz(s, 16) if HAVE_GMPY2 else int(s, 16)


def invert(a, modulus):
    """Return the inverse of ``a`` modulo ``modulus``.

    Raises:
        ZeroDivisionError: if ``a`` has no inverse.
    """
    if HAVE_GMPY2:
        return gmpy2.invert(a, modulus)
    return pow(int(a), -1, int(modulus))


def is_probable_prime(n: int, rounds: int = MILLER_RABIN_ROUNDS,
                      rng: random.Random | None = None) -> bool:
    """Miller-Rabin test with ``rounds`` random bases after trial division."""
    n = int(n)
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    rng = rng or random.SystemRandom()
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = powmod(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = powmod(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: random.Random | None = None) -> int:
    """Draw a random prime with exactly ``bits`` bits."""
    if bits < 2:
        raise ValueError("a prime needs at least 2 bits")
    rng = rng or random.SystemRandom()
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if bits == 2:
            candidate = rng.choice((2, 3))
        if is_probable_prime(candidate, rng=rng):
            return candidate
