"""Symmetric Tate pairing on the supersingular curve y^2 = x^3 + x.

For p = 3 (mod 4) the curve has p + 1 points over F_p and embedding degree
two.  The distortion map (x, y) -> (-x, i*y) with i^2 = -1 sends G1 to an
independent subgroup of E(F_p^2), which turns the reduced Tate pairing into
a symmetric, non-degenerate bilinear map G1 x G1 -> GT.  Because the
distorted x-coordinate stays in F_p, vertical lines vanish under the final
exponentiation and are skipped in the Miller loop.

Points are affine tuples ``(x, y)``; ``None`` is the point at infinity.
GT elements are pairs ``(a, b)`` standing for ``a + b*i`` in F_p^2.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property

import gmpy2
from gmpy2 import mpz

from ..errors import DecodeError

GT_ONE = (mpz(1), mpz(0))


@dataclass(frozen=True)
class PairingContext:
    name: str
    p: int
    q: int
    cofactor: int
    _p: mpz = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_p", mpz(self.p))

    @cached_property
    def field_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @cached_property
    def scalar_bytes(self) -> int:
        return (self.q.bit_length() + 7) // 8

    @cached_property
    def point_bytes(self) -> int:
        return 1 + self.field_bytes

    @cached_property
    def gt_bytes(self) -> int:
        return 2 * self.field_bytes

    @cached_property
    def generator(self):
        return self.hash_to_g1(b"generator", dst=b"zephyr-generator")

    # -- F_p^2 --------------------------------------------------------------

    def gt_mul(self, a, b):
        p = self._p
        a0, a1 = a
        b0, b1 = b
        t0 = a0 * b0
        t1 = a1 * b1
        return ((t0 - t1) % p, ((a0 + a1) * (b0 + b1) - t0 - t1) % p)

    def _f2_sqr(self, a):
        p = self._p
        a0, a1 = a
        return ((a0 + a1) * (a0 - a1) % p, 2 * a0 * a1 % p)

    def gt_pow(self, a, e: int):
        e %= self.q
        r = GT_ONE
        for bit in bin(e)[2:]:
            r = self._f2_sqr(r)
            if bit == "1":
                r = self.gt_mul(r, a)
        return r

    def _f2_pow_raw(self, a, e: int):
        r = GT_ONE
        for bit in bin(e)[2:]:
            r = self._f2_sqr(r)
            if bit == "1":
                r = self.gt_mul(r, a)
        return r

    def gt_to_bytes(self, a) -> bytes:
        n = self.field_bytes
        return int(a[0]).to_bytes(n, "little") + int(a[1]).to_bytes(n, "little")

    # -- G1 -----------------------------------------------------------------

    def is_on_curve(self, pt) -> bool:
        if pt is None:
            return True
        x, y = pt
        p = self._p
        return (y * y - x * x * x - x) % p == 0

    def neg(self, pt):
        if pt is None:
            return None
        return (pt[0], (-pt[1]) % self._p)

    def add(self, a, b):
        if a is None:
            return b
        if b is None:
            return a
        p = self._p
        x1, y1 = a
        x2, y2 = b
        if x1 == x2:
            if (y1 + y2) % p == 0:
                return None
            lam = (3 * x1 * x1 + 1) * gmpy2.invert(2 * y1, p) % p
        else:
            lam = (y2 - y1) * gmpy2.invert(x2 - x1, p) % p
        x3 = (lam * lam - x1 - x2) % p
        return (x3, (lam * (x1 - x3) - y1) % p)

    def mul(self, k: int, pt):
        """Scalar multiplication in Jacobian coordinates."""
        if pt is None:
            return None
        k = int(k)
        if k < 0:
            return self.mul(-k, self.neg(pt))
        if k == 0:
            return None
        p = self._p
        xp, yp = mpz(pt[0]), mpz(pt[1])
        X, Y, Z = xp, yp, mpz(1)
        for bit in bin(k)[3:]:
            X, Y, Z = self._jac_double(X, Y, Z)
            if bit == "1":
                X, Y, Z = self._jac_add_affine(X, Y, Z, xp, yp)
        if Z == 0:
            return None
        zi = gmpy2.invert(Z, p)
        zi2 = zi * zi % p
        return (X * zi2 % p, Y * zi2 * zi % p)

    def _jac_double(self, X, Y, Z):
        p = self._p
        if Z == 0 or Y == 0:
            return mpz(1), mpz(1), mpz(0)
        YY = Y * Y % p
        ZZ = Z * Z % p
        M = (3 * X * X + ZZ * ZZ) % p
        S = 4 * X * YY % p
        X3 = (M * M - 2 * S) % p
        Y3 = (M * (S - X3) - 8 * YY * YY) % p
        return X3, Y3, 2 * Y * Z % p

    def _jac_add_affine(self, X, Y, Z, xp, yp):
        p = self._p
        if Z == 0:
            return xp, yp, mpz(1)
        ZZ = Z * Z % p
        R = (yp * ZZ * Z - Y) % p
        H = (xp * ZZ - X) % p
        if H == 0:
            if R == 0:
                return self._jac_double(X, Y, Z)
            return mpz(1), mpz(1), mpz(0)
        HH = H * H % p
        HHH = HH * H % p
        X3 = (R * R - HHH - 2 * X * HH) % p
        Y3 = (R * (X * HH - X3) - Y * HHH) % p
        return X3, Y3, Z * H % p

    def in_subgroup(self, pt) -> bool:
        return self.is_on_curve(pt) and self.mul(self.q, pt) is None

    def random_scalar(self, rng) -> int:
        return rng.randrange(1, self.q)

    def hash_to_g1(self, data: bytes, dst: bytes = b"zephyr-h1"):
        """Try-and-increment onto the curve, then clear the cofactor."""
        p = self._p
        n = self.field_bytes + 16
        ctr = 0
        while True:
            h = hashlib.shake_256(dst + b"\x00" + struct.pack("<I", ctr) + data).digest(n)
            ctr += 1
            x = mpz(int.from_bytes(h, "little")) % p
            rhs = (x * x * x + x) % p
            if rhs == 0 or gmpy2.legendre(rhs, p) != 1:
                continue
            y = gmpy2.powmod(rhs, (p + 1) // 4, p)
            if y & 1:
                y = p - y
            pt = self.mul(self.cofactor, (x, y))
            if pt is not None:
                return pt

    def encode_point(self, pt) -> bytes:
        n = self.field_bytes
        if pt is None:
            return b"\x00" * (1 + n)
        x, y = pt
        return bytes([2 | (int(y) & 1)]) + int(x).to_bytes(n, "little")

    def decode_point(self, data: bytes, check_subgroup: bool = True):
        """Inverse of :meth:`encode_point`; rejects anything outside G1."""
        n = self.field_bytes
        if len(data) != 1 + n:
            raise DecodeError(f"point encoding must be {1 + n} bytes, got {len(data)}")
        tag = data[0]
        x = mpz(int.from_bytes(data[1:], "little"))
        if tag == 0:
            if x != 0:
                raise DecodeError("bad encoding of the point at infinity")
            return None
        if tag not in (2, 3):
            raise DecodeError(f"unknown point tag {tag}")
        p = self._p
        if x >= p:
            raise DecodeError("x coordinate out of range")
        rhs = (x * x * x + x) % p
        y = gmpy2.powmod(rhs, (p + 1) // 4, p)
        if y * y % p != rhs:
            raise DecodeError("x coordinate is not on the curve")
        if (int(y) & 1) != (tag & 1):
            y = (p - y) % p
        pt = (x, y)
        if check_subgroup and self.mul(self.q, pt) is not None:
            raise DecodeError("point is not in the order-q subgroup")
        return pt

    # -- pairing ------------------------------------------------------------

    def _miller(self, a, b):
        p = self._p
        xp, yp = mpz(a[0]), mpz(a[1])
        xq, yq = mpz(b[0]), mpz(b[1])
        X, Y, Z = xp, yp, mpz(1)
        f0, f1 = mpz(1), mpz(0)
        bits = bin(self.q)[3:]
        last = len(bits) - 1
        for idx, bit in enumerate(bits):
            # tangent at T evaluated at (-xq, i*yq), scaled by an F_p factor
            YY = Y * Y % p
            ZZ = Z * Z % p
            M = (3 * X * X + ZZ * ZZ) % p
            Z3 = 2 * Y * Z % p
            l0 = (M * (X + ZZ * xq) - 2 * YY) % p
            l1 = Z3 * ZZ % p * yq % p
            s0 = (f0 + f1) * (f0 - f1)
            s1 = 2 * f0 * f1
            t0 = s0 * l0
            t1 = s1 * l1
            f0, f1 = (t0 - t1) % p, ((s0 + s1) * (l0 + l1) - t0 - t1) % p
            S = 4 * X * YY % p
            X3 = (M * M - 2 * S) % p
            Y = (M * (S - X3) - 8 * YY * YY) % p
            X, Z = X3, Z3
            if bit == "1" and idx != last:
                # chord through T and P; the final addition is vertical
                ZZ = Z * Z % p
                R = (yp * ZZ * Z - Y) % p
                H = (xp * ZZ - X) % p
                Z3 = Z * H % p
                l0 = (R * (xq + xp) - Z3 * yp) % p
                l1 = Z3 * yq % p
                t0 = f0 * l0
                t1 = f1 * l1
                f0, f1 = (t0 - t1) % p, ((f0 + f1) * (l0 + l1) - t0 - t1) % p
                HH = H * H % p
                HHH = HH * H % p
                X3 = (R * R - HHH - 2 * X * HH) % p
                Y = (R * (X * HH - X3) - Y * HHH) % p
                X, Z = X3, Z3
        return f0, f1

    def pair(self, a, b):
        """e(a, b) for a, b in G1; returns an element of order dividing q in GT."""
        if a is None or b is None:
            return GT_ONE
        f0, f1 = self._miller(a, b)
        p = self._p
        # f^(p-1) = conj(f) / f
        n = gmpy2.invert(f0 * f0 + f1 * f1, p)
        inv = (f0 * n % p, (-f1) * n % p)
        g = self.gt_mul((f0, (-f1) % p), inv)
        return self._f2_pow_raw(g, self.cofactor)


_STANDARD_P = int(
    "884fe923da519b9392656eaf7c6491cd56ed547714ad363935fcbfdcdd1fab7a02ce8c497cc16b86"
    "0845a8ae3ad10de560d5c5cacd5dab6517a1494855eb3f61a3d1f07303c7a9ccbb308202a0366ee6"
    "6956d4c8b374f36e5d6d49702479cb0a284d7f39a70a39ccf99ee672eae83b38c601d01e9bb85379"
    "58ee688a7700af26844d31cbfc49ec00b361799ffd08f9c55b5578f53154cbe984bf0dab07909ca2"
    "9d52ad2885154135fd105a0db4a748df1b15e2dc01ae1831926d71af7d384d07",
    16,
)
_STANDARD_Q = int("af0d0ca9ada3437769fa16d2eab2fa2cc39f6259ae29bc6b7a1745a280e7591d", 16)

STANDARD = PairingContext("ss1536", _STANDARD_P, _STANDARD_Q, (_STANDARD_P + 1) // _STANDARD_Q)

# Small instance for exhaustive checks; offers no security.
TOY = PairingContext(name="toy40", p=0x97D9BCF77B, q=5189, cofactor=(0x97D9BCF77B + 1) // 5189)

CONTEXTS = {ctx.name: ctx for ctx in (STANDARD, TOY)}


def get_context(name: str) -> PairingContext:
    try:
        return CONTEXTS[name]
    except KeyError:
        raise DecodeError(f"unknown pairing context {name!r}") from None
