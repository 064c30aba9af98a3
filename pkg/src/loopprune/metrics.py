"""Quality and efficiency measurement: PSNR, Bjontegaard deltas, timing,
and report rendering.

BD metrics follow the classic construction: cubic polynomials are fitted
through (psnr, log rate) for the rate delta and (log rate, psnr) for the
quality delta, the difference is integrated in closed form over the
overlapping range, and the averaged log-rate difference is mapped back to
a percentage.
"""

from __future__ import annotations

import math
import os
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CurveError, DimensionError


def psnr(a, b, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when MSE is zero.

    ``peak`` defaults to 255 for 8-bit arrays and 1.0 for float arrays.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    if peak is None:
        peak = 255.0 if a.dtype == np.uint8 or b.dtype == np.uint8 else 1.0
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class RDPoint:
    rate: float   # bits
    psnr: float   # dB


@dataclass(frozen=True)
class BDResult:
    bd_rate: float  # percent
    bd_psnr: float  # dB


def validate_rd_curve(points):
    """Sort by rate and require >= 4 points with strictly increasing rate
    and strictly increasing psnr; returns (rates, psnrs) float64 arrays."""
    pts = [(float(p.rate), float(p.psnr)) if isinstance(p, RDPoint) else (float(p[0]), float(p[1]))
           for p in points]
    if len(pts) < 4:
        raise CurveError(f"an RD curve needs at least 4 points, got {len(pts)}")
    pts.sort()
    rates = np.array([p[0] for p in pts])
    psnrs = np.array([p[1] for p in pts])
    if not np.all(np.isfinite(rates)) or not np.all(np.isfinite(psnrs)):
        raise CurveError("RD points must be finite")
    if rates.min() <= 0:
        raise CurveError("RD rates must be positive")
    if np.any(np.diff(rates) <= 0) or np.any(np.diff(psnrs) <= 0):
        raise CurveError("RD curve must be strictly increasing in rate and psnr")
    return rates, psnrs


def _mean_fit_over(xs: np.ndarray, ys: np.ndarray, lo: float, hi: float) -> float:
    """Average of the cubic least-squares fit of ys(xs) over [lo, hi],
    using the closed-form polynomial antiderivative."""
    coeffs = np.polyfit(xs, ys, 3)
    anti = np.polyint(coeffs)
    return (np.polyval(anti, hi) - np.polyval(anti, lo)) / (hi - lo)


def bd_metrics(anchor, test) -> BDResult:
    """Bjontegaard deltas of ``test`` relative to ``anchor``.

    bd_rate is the average rate difference in percent at equal quality
    (negative means the test curve needs less rate); bd_psnr is the
    average quality difference in dB at equal rate.
    """
    a_rate, a_psnr = validate_rd_curve(anchor)
    t_rate, t_psnr = validate_rd_curve(test)
    a_log = np.log(a_rate)
    t_log = np.log(t_rate)

    lo = max(a_psnr.min(), t_psnr.min())
    hi = min(a_psnr.max(), t_psnr.max())
    if not lo < hi:
        raise CurveError("PSNR ranges do not overlap; cannot compute BD-rate")
    d_log_rate = _mean_fit_over(t_psnr, t_log, lo, hi) - _mean_fit_over(a_psnr, a_log, lo, hi)
    bd_rate = (math.exp(d_log_rate) - 1.0) * 100.0

    lo = max(a_log.min(), t_log.min())
    hi = min(a_log.max(), t_log.max())
    if not lo < hi:
        raise CurveError("rate ranges do not overlap; cannot compute BD-PSNR")
    bd_psnr = _mean_fit_over(t_log, t_psnr, lo, hi) - _mean_fit_over(a_log, a_psnr, lo, hi)
    return BDResult(bd_rate, bd_psnr)


# -- timing -----------------------------------------------------------------

@dataclass
class TimingResult:
    median_s: float
    times: list
    env: dict


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def time_inference(model, patches: np.ndarray, repeats: int = 3,
                   batch_size: int = 16) -> TimingResult:
    """Median wall time of a full single-threaded validation pass.

    BLAS thread pools are pinned to one thread for comparability; the
    environment fingerprint travels with the result.  Timing covers
    forward passes only.
    """
    from threadpoolctl import threadpool_limits

    from .model import apply_model

    patches = np.asarray(patches, dtype=np.float32)
    if patches.shape[0] == 0:
        raise ConfigError("time_inference requires a non-empty dataset")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    times = []
    with threadpool_limits(limits=1):
        for _ in range(repeats):
            t0 = time.perf_counter()
            apply_model(model, patches, batch_size=batch_size)
            times.append(time.perf_counter() - t0)
    env = {"cpu": _cpu_model(), "logical_cpus": os.cpu_count(), "blas_threads": 1}
    return TimingResult(statistics.median(times), times, env)


# -- SVG rendering ------------------------------------------------------------

_SVG_W, _SVG_H = 640, 400
_ML, _MR, _MT, _MB = 70, 70, 24, 52


def _nice_ticks(lo: float, hi: float, target: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10.0 ** math.floor(math.log10(span / target))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if span / (step * mult) <= target:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * span:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _scale(v, lo, hi, px_lo, px_hi):
    if hi <= lo:
        return (px_lo + px_hi) / 2.0
    return px_lo + (v - lo) / (hi - lo) * (px_hi - px_lo)


def _fmt(v: float) -> str:
    return f"{v:g}"


def svg_dual_axis_chart(x, left, right, x_label: str, left_label: str,
                        right_label: str) -> str:
    """Deterministic two-axis line chart (left series blue, right red)."""
    x = [float(v) for v in x]
    left = [float(v) for v in left]
    right = [float(v) for v in right]
    x_lo, x_hi = (min(x), max(x)) if x else (0.0, 1.0)
    l_lo, l_hi = (min(left), max(left)) if left else (0.0, 1.0)
    r_lo, r_hi = (min(right), max(right)) if right else (0.0, 1.0)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if l_hi == l_lo:
        l_lo, l_hi = l_lo - 0.5, l_hi + 0.5
    if r_hi == r_lo:
        r_lo, r_hi = r_lo - 0.5, r_hi + 0.5

    px0, px1 = _ML, _SVG_W - _MR
    py0, py1 = _SVG_H - _MB, _MT

    def xpix(v):
        return _scale(v, x_lo, x_hi, px0, px1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}" font-family="monospace" font-size="11">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>',
        f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>',
        f'<line x1="{px1}" y1="{py0}" x2="{px1}" y2="{py1}" stroke="black"/>',
    ]
    for t in _nice_ticks(x_lo, x_hi):
        if x_lo <= t <= x_hi:
            xp = xpix(t)
            parts.append(f'<line x1="{xp:.2f}" y1="{py0}" x2="{xp:.2f}" y2="{py0 + 4}" stroke="black"/>')
            parts.append(f'<text x="{xp:.2f}" y="{py0 + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _nice_ticks(l_lo, l_hi):
        if l_lo <= t <= l_hi:
            yp = _scale(t, l_lo, l_hi, py0, py1)
            parts.append(f'<line x1="{px0 - 4}" y1="{yp:.2f}" x2="{px0}" y2="{yp:.2f}" stroke="black"/>')
            parts.append(f'<text x="{px0 - 7}" y="{yp + 4:.2f}" text-anchor="end" fill="#1f77b4">{_fmt(t)}</text>')
    for t in _nice_ticks(r_lo, r_hi):
        if r_lo <= t <= r_hi:
            yp = _scale(t, r_lo, r_hi, py0, py1)
            parts.append(f'<line x1="{px1}" y1="{yp:.2f}" x2="{px1 + 4}" y2="{yp:.2f}" stroke="black"/>')
            parts.append(f'<text x="{px1 + 7}" y="{yp + 4:.2f}" text-anchor="start" fill="#d62728">{_fmt(t)}</text>')

    for series, lo_v, hi_v, color in ((left, l_lo, l_hi, "#1f77b4"),
                                      (right, r_lo, r_hi, "#d62728")):
        coords = [
            f"{xpix(xv):.2f},{_scale(yv, lo_v, hi_v, py0, py1):.2f}"
            for xv, yv in zip(x, series)
        ]
        if len(coords) > 1:
            parts.append(f'<polyline points="{" ".join(coords)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for c in coords:
            cx, cy = c.split(",")
            parts.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>')

    mid_x = (px0 + px1) / 2
    parts.append(f'<text x="{mid_x:.2f}" y="{_SVG_H - 34}" text-anchor="middle">{x_label}</text>')
    parts.append(f'<text x="{mid_x - 130:.2f}" y="{_SVG_H - 14}" fill="#1f77b4">&#9632; {left_label}</text>')
    parts.append(f'<text x="{mid_x + 30:.2f}" y="{_SVG_H - 14}" fill="#d62728">&#9632; {right_label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- report rendering ----------------------------------------------------------

@dataclass
class Report:
    trace_csv: str
    trace_svg: str | None
    table: str


def render_report(trace=None, rd_results=None, param_counts=None,
                  times=None) -> Report:
    """Assemble the run report.  Output is byte-deterministic for
    identical inputs.

    ``trace`` is a PruneTrace (empty trace yields a header-only CSV and
    no SVG); ``rd_results`` maps a condition label to a BDResult;
    ``param_counts`` and ``times`` map a component label to
    (before, after) pairs.
    """
    if trace is not None:
        trace_csv = trace.to_csv()
        trace_svg = trace.to_svg() if trace.records else None
    else:
        trace_csv = "iteration,params,psnr_db,infer_time_s,removed_channels,accepted\n"
        trace_svg = None

    lines = []
    if param_counts:
        before = "; ".join(f"{k}: {v[0]:,}" for k, v in sorted(param_counts.items()))
        after = "; ".join(f"{k}: {v[1]:,}" for k, v in sorted(param_counts.items()))
        lines.append(f"{'#Par':<14}{before:<28}{after}")
    if times:
        before = "; ".join(f"{k}: {v[0]:.3f}" for k, v in sorted(times.items()))
        after = "; ".join(f"{k}: {v[1]:.3f}" for k, v in sorted(times.items()))
        lines.append(f"{'Time [s]':<14}{before:<28}{after}")
    if rd_results:
        for label, bd in sorted(rd_results.items()):
            lines.append(f"{'BD-rate [%]':<14}{label}: {bd.bd_rate:+.4f}")
            lines.append(f"{'BD-PSNR [dB]':<14}{label}: {bd.bd_psnr:+.4f}")
    if lines:
        header = f"{'metric':<14}{'before':<28}after"
        table = "\n".join([header] + lines) + "\n"
    else:
        table = ""
    return Report(trace_csv, trace_svg, table)
