"""Small helpers around mpmath's interval context."""

from __future__ import annotations

from contextlib import contextmanager
from fractions import Fraction

import mpmath


@contextmanager
def iv_prec(bits: int):
    """Temporarily set the precision of the interval context (it does not
    follow mpmath.workprec)."""
    old = mpmath.iv.prec
    mpmath.iv.prec = bits
    try:
        yield mpmath.iv
    finally:
        mpmath.iv.prec = old


def fraction_from_mpf(x) -> Fraction:
    sign, man, exp, _ = mpmath.mpf(x)._mpf_
    val = Fraction(man) * Fraction(2) ** exp
    return -val if sign else val


def iv_from_fraction(q: Fraction):
    return mpmath.iv.mpf(q.numerator) / mpmath.iv.mpf(q.denominator)
