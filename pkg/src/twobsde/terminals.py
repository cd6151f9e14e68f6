"""Terminal functions g(x) used as xi = g(X_T)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .generators import compile_expression


@dataclass(frozen=True)
class Terminal:
    name: str
    func: Callable
    scale: float = 1.0  # a typical magnitude, used for "x scale" tolerances

    def __call__(self, x):
        return np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float) * np.ones_like(x, dtype=float)

    def abs(self) -> Terminal:
        return Terminal(f"|{self.name}|", lambda x: np.abs(self.func(x)), self.scale)

    def power(self, p) -> Terminal:
        return Terminal(f"|{self.name}|^{p:g}", lambda x: np.abs(self.func(x)) ** p, self.scale**p)

    def scaled(self, c) -> Terminal:
        return Terminal(f"{c:g}*{self.name}", lambda x: c * self.func(x), abs(c) * self.scale)


def _expr(text):
    fn, _ = compile_expression(text, variables=("x",))
    return fn


TERMINAL_PRESETS = {
    "zero": lambda: Terminal("zero", lambda x: np.zeros_like(x), 1.0),
    "one": lambda: Terminal("one", lambda x: np.ones_like(x), 1.0),
    "linear": lambda: Terminal("x", lambda x: x, 1.0),
    "square": lambda: Terminal("x^2", lambda x: x**2, 1.0),
    "neg_square": lambda: Terminal("-x^2", lambda x: -(x**2), 1.0),
    "abs": lambda: Terminal("|x|", np.abs, 1.0),
    "cos": lambda: Terminal("cos(x)", np.cos, 1.0),
    "cos_plus_one": lambda: Terminal("cos(x)+1", lambda x: np.cos(x) + 1.0, 1.0),
}


def make_terminal(preset: str, expr: str | None = None, scale: float = 1.0) -> Terminal:
    if preset == "expression":
        if not expr:
            raise ConfigurationError("terminal preset 'expression' needs 'expr'")
        return Terminal(f"expr({expr})", _expr(expr), scale)
    try:
        term = TERMINAL_PRESETS[preset]()
    except KeyError:
        raise ConfigurationError(f"unknown terminal preset {preset!r}") from None
    return term if scale == 1.0 else Terminal(term.name, term.func, scale)
