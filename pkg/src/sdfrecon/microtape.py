"""Minimal reverse-mode autodiff over scalars.

The shading stage ships hand-derived closed-form derivatives; this tape is an
independent second derivation path used to cross-check them.  It supports
exactly the operations the local shading computation needs: +, -, *, /,
sqrt and max-with-constant.
"""

from __future__ import annotations

import math

__all__ = ["Var", "sqrt", "relu", "backward"]


class Var:
    __slots__ = ("value", "_parents", "grad")

    def __init__(self, value, parents=()):
        self.value = float(value)
        self._parents = parents  # tuple of (Var, local_derivative)
        self.grad = 0.0

    def __add__(self, other):
        other = _as_var(other)
        return Var(self.value + other.value, ((self, 1.0), (other, 1.0)))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, ((self, -1.0),))

    def __sub__(self, other):
        other = _as_var(other)
        return Var(self.value - other.value, ((self, 1.0), (other, -1.0)))

    def __rsub__(self, other):
        return _as_var(other) - self

    def __mul__(self, other):
        other = _as_var(other)
        return Var(self.value * other.value, ((self, other.value), (other, self.value)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_var(other)
        inv = 1.0 / other.value
        return Var(
            self.value * inv,
            ((self, inv), (other, -self.value * inv * inv)),
        )

    def __rtruediv__(self, other):
        return _as_var(other) / self

    def __repr__(self):
        return f"Var({self.value})"


def _as_var(x):
    return x if isinstance(x, Var) else Var(x)


def sqrt(x):
    if isinstance(x, Var):
        s = math.sqrt(x.value)
        return Var(s, ((x, 0.5 / s),))
    return math.sqrt(x)


def relu(x):
    """max(0, x); derivative 0 at and below the kink."""
    if isinstance(x, Var):
        return Var(x.value, ((x, 1.0),)) if x.value > 0.0 else Var(0.0)
    return x if x > 0.0 else 0.0


def backward(output: Var) -> None:
    """Accumulate d(output)/d(leaf) into every reachable Var's ``grad``."""
    order = []
    seen = set()

    def visit(node):
        if id(node) in seen:
            return
        seen.add(id(node))
        for parent, _ in node._parents:
            visit(parent)
        order.append(node)

    visit(output)
    output.grad = 1.0
    for node in reversed(order):
        for parent, local in node._parents:
            parent.grad += local * node.grad
