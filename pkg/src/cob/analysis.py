"""Closed-form cost model: CGF loop distribution, expected step counts, byte totals.

Everything that can be exact is exact (``Fraction``); the float helpers exist
for sweeps where exactness is too slow.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Iterable, List, Sequence, Union

from .protocol_types import COSTS, CostModel

Number = Union[int, float, Fraction]


def _exact(x: Number) -> Fraction:
    """Floats go through their shortest repr, so 0.8 becomes 4/5 rather than the binary double."""
    if isinstance(x, float):
        return Fraction(repr(x))
    if isinstance(x, (int, Rational)):
        return Fraction(x)
    raise TypeError(f"expected a number, got {type(x).__name__}")


def _check_h(h: Fraction):
    if not Fraction(2, 3) < h <= 1:
        raise ValueError(f"honest ratio must satisfy 2/3 < h <= 1, got {h}")


@dataclass(frozen=True)
class ChiParams:
    """chi_{ell,q}: the maximum of ell independent geometric(q) trial counts."""

    ell: int
    q: Fraction

    def __post_init__(self):
        object.__setattr__(self, "q", _exact(self.q))
        if self.ell < 0:
            raise ValueError("ell must be >= 0")
        if self.ell > 0 and not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")

    @classmethod
    def from_h(cls, ell: int, h: Number) -> "ChiParams":
        return cls(ell, _exact(h) / 2)


def chi_cdf(w: int, params: ChiParams) -> Fraction:
    if params.ell == 0:
        return Fraction(1 if w >= 0 else 0)
    if w <= 0:
        return Fraction(0)
    return (1 - (1 - params.q) ** w) ** params.ell


def chi_pmf(w: int, params: ChiParams) -> Fraction:
    """P(chi = w), exactly."""
    if params.ell == 0:
        return Fraction(1 if w == 0 else 0)
    if w < 1:
        raise ValueError("w must be >= 1")
    return chi_cdf(w, params) - chi_cdf(w - 1, params)


def chi_tail(w: int, params: ChiParams) -> float:
    """P(chi > w) in floating point without cancellation."""
    if params.ell == 0:
        return 0.0 if w >= 0 else 1.0
    if w <= 0:
        return 1.0
    log_fail = w * math.log1p(-float(params.q))
    return -math.expm1(params.ell * math.log1p(-math.exp(log_fail)))


def chi_mean(params: ChiParams, tol: float = 1e-12) -> float:
    """E[chi] = sum_{w>=0} P(chi > w), truncated once the remaining tail is below tol.

    For w past the truncation point P(chi > w) <= ell (1-q)^w, so the remainder
    is at most ell (1-q)^W / q.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if params.ell == 0:
        return 0.0
    q = float(params.q)
    total, w = 0.0, 0
    while True:
        if params.ell * (1 - q) ** w / q < tol:
            return total
        total += chi_tail(w, params)
        w += 1


def chi_mean_exact(params: ChiParams) -> Fraction:
    """E[chi] by inclusion-exclusion: sum_k C(ell,k) (-1)^(k+1) / (1 - (1-q)^k)."""
    if params.ell == 0:
        return Fraction(0)
    p = 1 - params.q
    total = Fraction(0)
    for k in range(1, params.ell + 1):
        term = Fraction(math.comb(params.ell, k)) / (1 - p ** k)
        total += term if k % 2 else -term
    return total


def expected_cob_steps(ell: int, h: Number, exact: bool = False) -> Number:
    """4 + 3 E[chi_{ell,h/2}]: the last step in which messages are broadcast, in expectation."""
    hh = _exact(h)
    _check_h(hh)
    params = ChiParams(ell, hh / 2)
    if exact:
        return 4 + 3 * chi_mean_exact(params)
    return 4 + 3 * chi_mean(params)


def expected_alg_steps(h: Number) -> Fraction:
    """Baseline: 4 graded-consensus steps, 2/h expected loops of 3, one final step."""
    hh = _exact(h)
    _check_h(hh)
    return 5 + 6 / hh


def honest_leader_probability(h: Number) -> Fraction:
    hh = _exact(h)
    _check_h(hh)
    return hh * hh * (1 + hh - hh * hh)


def _cob_weight(ell: int, n: int, steps: Number, costs: CostModel) -> Number:
    return n * (2 * costs.step_cost(1, ell) + (steps - 2) * costs.step_cost(3, ell))


def cob_weight(ell: int, h: Number, n: int, exact: bool = True, steps: Number = None, costs: CostModel = COSTS) -> Number:
    """Bytes broadcast by n players per step over one run.

    ``steps`` overrides the expected step count (for checking realized runs).
    ``exact`` uses the rational E[chi], which gets slow beyond ell of a few hundred.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if steps is None:
        steps = expected_cob_steps(ell, h, exact=exact)
    else:
        _check_h(_exact(h))
    return _cob_weight(ell, n, steps, costs)


ALG_GRADED_BYTES = 132
ALG_BINARY_BYTES = 200


def alg_weight_honest(ell: int, h: Number, n: int) -> Fraction:
    """ell independent baseline instances with honest leaders."""
    per_run = 2 * ALG_GRADED_BYTES + (expected_alg_steps(h) - 3) * ALG_BINARY_BYTES
    return ell * n * per_run


def alg_weight_drop(ell: int, h: Number, n: int) -> Fraction:
    """Lower bound when every malicious leader forces its instance to bottom after step 5."""
    hh = _exact(h)
    per_run = 2 * ALG_GRADED_BYTES + ALG_BINARY_BYTES * (2 + (expected_alg_steps(hh) - 5) * honest_leader_probability(hh))
    return ell * n * per_run


# --- figures ----------------------------------------------------------------------

MB = 10 ** 6
FIGURE_HEADER = ("ell", "cob_mb", "alg_honest_mb", "alg_drop_mb")


@dataclass(frozen=True)
class FigureRow:
    ell: int
    cob: Number
    alg_honest: Fraction
    alg_drop: Fraction


def figure_data(h: Number = 0.8, n: int = 4000, ell_range: Iterable[int] = range(1, 1001), exact_up_to: int = 64) -> List[FigureRow]:
    """Byte totals per ell (exact rationals for ell <= exact_up_to, floats above)."""
    rows = []
    for ell in ell_range:
        cob = cob_weight(ell, h, n, exact=ell <= exact_up_to)
        rows.append(FigureRow(ell, cob, alg_weight_honest(ell, h, n), alg_weight_drop(ell, h, n)))
    return rows


def _fmt(x: Number) -> str:
    if isinstance(x, Fraction) and x.denominator == 1:
        return str(x.numerator)
    return repr(float(x))


def figure_csv(rows: Sequence[FigureRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIGURE_HEADER)
    for r in rows:
        w.writerow([r.ell, _fmt(Fraction(r.cob) / MB), _fmt(r.alg_honest / MB), _fmt(r.alg_drop / MB)])
    return buf.getvalue()


def figure_svg(rows: Sequence[FigureRow], log: bool = True, width: int = 640, height: int = 420) -> str:
    """A small standalone line chart of the three curves (MB against ell)."""
    pad_l, pad_r, pad_t, pad_b = 70, 20, 20, 50
    xs = [r.ell for r in rows]
    series = [
        ("Cob", "#1f77b4", [float(r.cob) / MB for r in rows]),
        ("baseline, honest leaders", "#d62728", [float(r.alg_honest) / MB for r in rows]),
        ("baseline, dropped", "#2ca02c", [float(r.alg_drop) / MB for r in rows]),
    ]
    ys = [y for _, _, s in series for y in s]
    fx = (lambda v: math.log10(v)) if log else float
    x0, x1 = fx(min(xs)), fx(max(xs))
    y0, y1 = fx(min(ys)), fx(max(ys))
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(v):
        return pad_l + (fx(v) - x0) / (x1 - x0) * (width - pad_l - pad_r)

    def py(v):
        return height - pad_b - (fx(v) - y0) / (y1 - y0) * (height - pad_t - pad_b)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="13">number of components ell</text>',
        f'<text x="16" y="{height / 2:.0f}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {height / 2:.0f})">MB broadcast</text>',
    ]
    for label, color, s in series:
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, s))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    for k, (label, color, _) in enumerate(series):
        y = pad_t + 14 + 16 * k
        out.append(f'<line x1="{pad_l + 10}" y1="{y - 4}" x2="{pad_l + 30}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + 36}" y="{y}" font-size="12">{label}</text>')
    for v, text in ((min(xs), str(min(xs))), (max(xs), str(max(xs)))):
        out.append(f'<text x="{px(v):.1f}" y="{height - pad_b + 16}" text-anchor="middle" font-size="11">{text}</text>')
    for v in (min(ys), max(ys)):
        out.append(f'<text x="{pad_l - 6}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="11">{v:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
