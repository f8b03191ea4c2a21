"""Exact euro amounts held as integer micro-euros.

Rounding is never implicit: arithmetic between ``Money`` values is exact and
scaling by a fraction requires the caller to name a quantum.
"""
from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Union

MICROS_PER_EUR = 1_000_000

# Quanta, expressed in micro-euros.
MICRO = 1
MIL = 1_000  # a tenth of a cent
CENT = 10_000
EUR = MICROS_PER_EUR

Number = Union[int, str, Decimal, Fraction, float]


def to_fraction(value: Number) -> Fraction:
    """Exact rational for a decimal quantity; floats go through their shortest repr."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("bool is not a quantity")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        value = repr(value)
    try:
        return Fraction(Decimal(value))
    except (InvalidOperation, ValueError) as exc:
        raise ValueError(f"not a decimal quantity: {value!r}") from exc


def round_half_up(value: Fraction) -> int:
    """Round to the nearest integer, ties away from zero."""
    sign = -1 if value < 0 else 1
    magnitude = abs(value)
    whole, rest = divmod(magnitude.numerator, magnitude.denominator)
    if 2 * rest >= magnitude.denominator:
        whole += 1
    return sign * whole


@dataclass(frozen=True, order=True)
class Money:
    micros: int

    def __post_init__(self):
        if not isinstance(self.micros, int) or isinstance(self.micros, bool):
            raise TypeError(f"Money holds integer micro-euros, got {self.micros!r}")

    @classmethod
    def zero(cls) -> Money:
        return cls(0)

    @classmethod
    def eur(cls, value: Number) -> Money:
        """Parse a euro amount; anything finer than a micro-euro is rejected."""
        micros = to_fraction(value) * MICROS_PER_EUR
        if micros.denominator != 1:
            raise ValueError(f"{value!r} EUR is not representable in micro-euros")
        return cls(int(micros))

    @classmethod
    def cents(cls, cents: int) -> Money:
        return cls(cents * CENT)

    @classmethod
    def from_fraction(cls, eur: Fraction, quantum: int = MICRO) -> Money:
        """Round an exact euro value to a multiple of ``quantum`` micro-euros."""
        return cls(round_half_up(eur * MICROS_PER_EUR / quantum) * quantum)

    def quantize(self, quantum: int) -> Money:
        return Money(round_half_up(Fraction(self.micros, quantum)) * quantum)

    def scale(self, factor: Number, quantum: int = MICRO) -> Money:
        return Money(round_half_up(self.micros * to_fraction(factor) / quantum) * quantum)

    def as_fraction(self) -> Fraction:
        return Fraction(self.micros, MICROS_PER_EUR)

    def as_decimal(self) -> Decimal:
        return Decimal(self.micros).scaleb(-6)

    def format(self, places: int = 2) -> str:
        """At least ``places`` decimals, more when the amount needs them."""
        q = Decimal(1).scaleb(-places)
        exact = self.as_decimal()
        shown = exact.quantize(q) if exact == exact.quantize(q) else exact.normalize()
        return f"{shown:f}"

    def __str__(self) -> str:
        return f"€ {self.format()}"

    def __add__(self, other: Money) -> Money:
        if not isinstance(other, Money):
            return NotImplemented
        return Money(self.micros + other.micros)

    def __sub__(self, other: Money) -> Money:
        if not isinstance(other, Money):
            return NotImplemented
        return Money(self.micros - other.micros)

    def __neg__(self) -> Money:
        return Money(-self.micros)

    def __mul__(self, count: int) -> Money:
        if not isinstance(count, int) or isinstance(count, bool):
            return NotImplemented
        return Money(self.micros * count)

    __rmul__ = __mul__

    def __bool__(self) -> bool:
        return self.micros != 0
