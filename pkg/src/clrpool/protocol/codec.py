"""Fixed-point encoding of reals as residues modulo 2**64."""
from __future__ import annotations

import math

import numpy as np

from ..errors import RangeExceeded


class FixedPointCodec:
    """``encode(x) = round(x * 2**scale_bits) mod 2**modulus_bits``.

    Values must satisfy ``|x| < 2**range_bits`` so that sums of up to
    ``2**(modulus_bits - 1 - scale_bits - range_bits)`` addends cannot wrap.
    """

    def __init__(self, scale_bits: int = 20, modulus_bits: int = 64, range_bits: int = 42):
        self.scale_bits = scale_bits
        self.scale = 1 << scale_bits
        self.modulus = 1 << modulus_bits
        self.limit = float(1 << range_bits)

    def check(self, values) -> None:
        for v in np.asarray(values, dtype=float).ravel():
            if not (math.isfinite(v) and abs(v) < self.limit):
                raise RangeExceeded(f"value {v!r} outside fixed-point range |x| < 2**42")

    def encode(self, values) -> list[int]:
        self.check(values)
        return [round(float(v) * self.scale) % self.modulus
                for v in np.asarray(values, dtype=float).ravel()]

    def add(self, a, b) -> list[int]:
        return [(x + y) % self.modulus for x, y in zip(a, b)]

    def sub(self, a, b) -> list[int]:
        return [(x - y) % self.modulus for x, y in zip(a, b)]

    def decode(self, residues) -> np.ndarray:
        half = self.modulus >> 1
        return np.array([(r - self.modulus if r >= half else r) / self.scale
                         for r in residues], dtype=float)

    @property
    def resolution(self) -> float:
        """Worst-case rounding error of one encoded value."""
        return 0.5 / self.scale


DEFAULT_CODEC = FixedPointCodec()
