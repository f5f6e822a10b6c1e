"""Adaptive Simpson quadrature."""

from __future__ import annotations

import math


class QuadratureError(RuntimeError):
    pass


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 50) -> float:
    """Integrate a scalar function on ``[a, b]`` by recursive interval bisection.

    Uses the Richardson-corrected Simpson estimate and splits the tolerance
    between halves. Raises :class:`QuadratureError` if any branch hits
    ``max_depth`` without meeting its tolerance.
    """
    if a == b:
        return 0.0
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4 * fm + fb)
    return _recurse(f, a, b, fa, fm, fb, whole, tol, max_depth)


def _recurse(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4 * frm + fb)
    delta = left + right - whole
    if abs(delta) <= 15 * tol:
        return left + right + delta / 15.0
    if depth <= 0 or not math.isfinite(delta):
        raise QuadratureError(f"adaptive Simpson failed to converge on [{a}, {b}]")
    return _recurse(f, a, m, fa, flm, fm, left, tol / 2, depth - 1) + _recurse(
        f, m, b, fm, frm, fb, right, tol / 2, depth - 1
    )
