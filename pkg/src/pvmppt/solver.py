"""Scalar root finding for strictly decreasing functions.

The electrical model reduces every implicit equation to a strictly
decreasing scalar function with a known sign-changing bracket, so a
Newton iteration guarded by bisection always converges.
"""

from __future__ import annotations

from typing import Callable


class SolverError(RuntimeError):
    """Root finding failed; carries the last bracket for diagnosis."""

    def __init__(self, message: str, lo: float, hi: float, f_lo: float, f_hi: float):
        super().__init__(
            f"{message} (bracket [{lo!r}, {hi!r}], f(lo)={f_lo!r}, f(hi)={f_hi!r})"
        )
        self.lo = lo
        self.hi = hi
        self.f_lo = f_lo
        self.f_hi = f_hi


def solve_decreasing(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    fprime: Callable[[float], float] | None = None,
    xtol: float = 1e-13,
    ftol: float = 0.0,
    max_iter: int = 200,
) -> float:
    """Find the root of a strictly decreasing ``f`` on ``[lo, hi]``.

    Requires ``f(lo) >= 0 >= f(hi)``.  Newton steps are taken when a
    derivative is supplied and the step stays inside the bracket;
    otherwise the bracket is bisected, so convergence is guaranteed.
    ``xtol`` is relative to the bracket magnitude; ``ftol`` is an
    absolute bound on the residual (0 disables it).
    """
    f_lo = f(lo)
    f_hi = f(hi)
    if f_lo < 0.0 or f_hi > 0.0:
        raise SolverError("bracket does not enclose a root", lo, hi, f_lo, f_hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi

    x = 0.5 * (lo + hi)
    fx = f(x)
    for _ in range(max_iter):
        if fx > 0.0:
            lo = x
        else:
            hi = x
        scale = max(abs(lo), abs(hi), 1.0)
        if hi - lo <= xtol * scale or (ftol > 0.0 and abs(fx) <= ftol):
            return x

        x_new = None
        if fprime is not None:
            d = fprime(x)
            if d != 0.0:
                cand = x - fx / d
                if lo < cand < hi:
                    x_new = cand
        if x_new is None:
            x_new = 0.5 * (lo + hi)
        x = x_new
        fx = f(x)

    raise SolverError("did not converge", lo, hi, f(lo), f(hi))


def golden_section_max(
    f: Callable[[float], float], lo: float, hi: float, xtol: float = 1e-3
) -> tuple[float, float]:
    """Maximize a unimodal ``f`` on ``[lo, hi]`` to resolution ``xtol``."""
    invphi = 0.6180339887498949
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)
