"""Monotone link functions g together with g', the antiderivative G and g^-1.

The GLM loss used throughout the package is ``L(beta; x, y) = G(x'beta) - x'beta * y``
with ``G' = g``, so every link exposes ``G`` alongside ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Identity:
    """g(z) = z, which turns the GLM loss into the least-squares loss."""

    name = "identity"

    def g(self, z):
        return np.asarray(z, dtype=float)

    def dg(self, z):
        return np.ones_like(np.asarray(z, dtype=float))

    def G(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * z * z

    def inverse(self, y):
        return np.asarray(y, dtype=float)

    @property
    def is_identity(self) -> bool:
        return True


@dataclass(frozen=True)
class Elu:
    """Exponential linear unit ``g(z; a) = min(a (exp(z/a) - 1), max(0, z))``.

    ``g'`` at exactly zero is taken from the right (value 1).
    """

    a: float = 1.0
    name = "elu"

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"ELU scale must be positive, got {self.a}")

    def g(self, z):
        z = np.asarray(z, dtype=float)
        neg = np.minimum(z, 0.0)
        return np.where(z >= 0, z, self.a * np.expm1(neg / self.a))

    def dg(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(z >= 0, 1.0, np.exp(np.minimum(z, 0.0) / self.a))

    def G(self, z):
        # integral of g from 0, piecewise; G(0) = 0
        z = np.asarray(z, dtype=float)
        a = self.a
        neg = np.minimum(z, 0.0)
        return np.where(z >= 0, 0.5 * z * z, a * a * np.expm1(neg / a) - a * neg)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= -self.a):
            raise ValueError(f"ELU(a={self.a}) is bounded below by {-self.a}")
        neg = np.minimum(y, 0.0)
        return np.where(y >= 0, y, self.a * np.log1p(neg / self.a))

    @property
    def is_identity(self) -> bool:
        return False


Link = Identity | Elu


def make_link(name: str, a: float = 1.0) -> Link:
    name = name.strip().lower()
    if name == "identity":
        return Identity()
    if name == "elu":
        return Elu(a)
    raise ValueError(f"unknown link {name!r} (expected 'identity' or 'elu')")
