"""Exact rational helpers shared by every module.

All masses, lengths and costs are ``gmpy2.mpq`` values.  Files carry them as
``"p/q"`` strings.
"""

from fractions import Fraction
from numbers import Rational

from gmpy2 import mpq

Q = mpq
ZERO = mpq(0)
ONE = mpq(1)


def q(value) -> mpq:
    """Coerce ``value`` to an exact rational.

    Accepts ints, ``Fraction``, ``mpq`` and ``"p/q"`` / ``"p"`` strings.
    Floats are rejected: they would silently smuggle rounding into the ledger.
    """
    if isinstance(value, bool):
        raise TypeError("bool is not a rational")
    if isinstance(value, float):
        raise TypeError(f"refusing float {value!r}; pass a string or Fraction")
    if isinstance(value, str):
        return parse(value)
    if isinstance(value, Fraction):
        return mpq(value.numerator, value.denominator)
    if isinstance(value, (int, Rational)) or type(value) is type(ONE):
        return mpq(value)
    raise TypeError(f"cannot convert {type(value).__name__} to a rational")


def fmt(value) -> str:
    value = mpq(value)
    return f"{value.numerator}/{value.denominator}"


def parse(text: str) -> mpq:
    text = text.strip()
    if not text:
        raise ValueError("empty rational")
    if "/" in text:
        num, den = text.split("/", 1)
        if int(den) == 0:
            raise ValueError(f"zero denominator in {text!r}")
        return mpq(int(num), int(den))
    if "." in text or "e" in text.lower():
        # decimal literal, converted exactly
        f = Fraction(text)
        return mpq(f.numerator, f.denominator)
    return mpq(int(text))


def floor_to_grid(value, grid: int) -> mpq:
    """Largest multiple of ``1/grid`` not exceeding ``value``."""
    value = mpq(value)
    return mpq((value.numerator * grid) // value.denominator, grid)
