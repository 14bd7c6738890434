"""Hand-emitted SVG figures.

Everything here is built from three primitives — polyline, circle, text —
so the output needs no plotting library and contains nothing
non-deterministic (no timestamps, no generated ids). Two figure types:
few-shot regression samples (true curve, train points, sampled model
curves) and box plots of positive value distributions on a log axis.
"""

import math

__all__ = ["regression_figure", "box_plot"]

_HEADER = ('<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
           'viewBox="0 0 %d %d" font-family="monospace" font-size="11">')

# frame insets: left, top, right, bottom
_MARGINS = (52, 34, 16, 40)


def _num(value):
    """Compact fixed-point coordinate formatting, stable across runs."""
    text = "%.2f" % (value,)
    return "0.00" if text == "-0.00" else text


def _polyline(points, stroke, width=1.0, dash=None):
    attrs = 'fill="none" stroke="%s" stroke-width="%s"' % (stroke, _num(width))
    if dash:
        attrs += ' stroke-dasharray="%s"' % (dash,)
    coords = " ".join("%s,%s" % (_num(x), _num(y)) for x, y in points)
    return '<polyline %s points="%s"/>' % (attrs, coords)


def _circle(x, y, radius, stroke, fill="none"):
    return '<circle cx="%s" cy="%s" r="%s" stroke="%s" fill="%s"/>' % (
        _num(x), _num(y), _num(radius), stroke, fill)


def _text(x, y, content, anchor="middle", fill="#333333"):
    return '<text x="%s" y="%s" text-anchor="%s" fill="%s">%s</text>' % (
        _num(x), _num(y), anchor, fill, content)


class _Frame:
    """Maps data coordinates into the pixel rectangle inside the margins."""

    def __init__(self, width, height, x_lo, x_hi, y_lo, y_hi):
        left, top, right, bottom = _MARGINS
        self.px_lo = left
        self.px_hi = width - right
        self.py_lo = top
        self.py_hi = height - bottom
        if x_hi <= x_lo:
            x_hi = x_lo + 1.0
        if y_hi <= y_lo:
            y_hi = y_lo + 1.0
        self.x_lo, self.x_hi = x_lo, x_hi
        self.y_lo, self.y_hi = y_lo, y_hi

    def x(self, value):
        frac = (value - self.x_lo) / (self.x_hi - self.x_lo)
        return self.px_lo + frac * (self.px_hi - self.px_lo)

    def y(self, value):
        frac = (value - self.y_lo) / (self.y_hi - self.y_lo)
        return self.py_hi - frac * (self.py_hi - self.py_lo)

    def border(self):
        return _polyline(
            [(self.px_lo, self.py_lo), (self.px_hi, self.py_lo),
             (self.px_hi, self.py_hi), (self.px_lo, self.py_hi),
             (self.px_lo, self.py_lo)],
            stroke="#888888")

    def ticks(self, x_values, y_values, x_fmt="%g", y_fmt="%g"):
        parts = []
        for value in x_values:
            px = self.x(value)
            parts.append(_polyline([(px, self.py_hi), (px, self.py_hi + 4)],
                                   stroke="#888888"))
            parts.append(_text(px, self.py_hi + 16, x_fmt % (value,)))
        for value in y_values:
            py = self.y(value)
            parts.append(_polyline([(self.px_lo - 4, py), (self.px_lo, py)],
                                   stroke="#888888"))
            parts.append(_text(self.px_lo - 7, py + 4, y_fmt % (value,),
                               anchor="end"))
        return parts


def regression_figure(grid_x, true_y, train_x, train_y, sample_curves,
                      title="", width=640, height=420):
    """Few-shot regression episode figure.

    The true function is a solid line, train points are open circles with a
    dashed drop line to the bottom axis, and each sampled model curve is
    dotted. Returns the SVG document as a string.
    """
    grid_x = [float(v) for v in grid_x]
    true_y = [float(v) for v in true_y]
    train_x = [float(v) for v in train_x]
    train_y = [float(v) for v in train_y]
    curves = [[float(v) for v in curve] for curve in sample_curves]
    if len(grid_x) != len(true_y):
        raise ValueError("grid and true curve lengths differ")
    for curve in curves:
        if len(curve) != len(grid_x):
            raise ValueError("sampled curve length differs from grid")

    all_y = true_y + train_y + [v for curve in curves for v in curve]
    y_lo, y_hi = min(all_y), max(all_y)
    pad = 0.05 * (y_hi - y_lo or 1.0)
    frame = _Frame(width, height, min(grid_x), max(grid_x),
                   y_lo - pad, y_hi + pad)

    parts = [_HEADER % (width, height, width, height)]
    if title:
        parts.append(_text((frame.px_lo + frame.px_hi) / 2, 20, title))
    parts.append(frame.border())
    parts.extend(frame.ticks(
        sorted({round(v) for v in (frame.x_lo, 0.0, frame.x_hi)}),
        [frame.y_lo + pad, (frame.y_lo + frame.y_hi) / 2, frame.y_hi - pad],
        y_fmt="%.2f"))

    for curve in curves:
        parts.append(_polyline(
            [(frame.x(x), frame.y(y)) for x, y in zip(grid_x, curve)],
            stroke="#c01c28", dash="1,3"))
    parts.append(_polyline(
        [(frame.x(x), frame.y(y)) for x, y in zip(grid_x, true_y)],
        stroke="#1a5fb4", width=1.5))
    for x, y in zip(train_x, train_y):
        px, py = frame.x(x), frame.y(y)
        parts.append(_polyline([(px, py), (px, frame.py_hi)],
                               stroke="#999999", dash="5,4"))
        parts.append(_circle(px, py, 3.5, stroke="#000000", fill="#ffffff"))

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _quantile(ordered, q):
    """Linear-interpolation quantile of an ascending list."""
    if len(ordered) == 1:
        return ordered[0]
    pos = q * (len(ordered) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] * (1.0 - frac) + ordered[hi] * frac


def box_plot(groups, title="", width=640, height=420, floor=1e-14):
    """Box plot of positive value distributions on a log10 axis.

    groups: sequence of (label, values). Boxes span the 25th-75th
    percentiles with a median bar; whiskers reach the 5th and 95th
    percentiles. Values below `floor` are clamped so zeros stay plottable.
    """
    if not groups:
        raise ValueError("need at least one group")
    cleaned = []
    for label, values in groups:
        values = sorted(max(float(v), floor) for v in values)
        if not values:
            raise ValueError("group %r has no values" % (label,))
        cleaned.append((str(label), values))

    logs = [math.log10(v) for _, values in cleaned for v in values]
    lo, hi = min(logs), max(logs)
    pad = 0.08 * (hi - lo or 1.0)
    frame = _Frame(width, height, 0.0, float(len(cleaned)),
                   lo - pad, hi + pad)

    parts = [_HEADER % (width, height, width, height)]
    if title:
        parts.append(_text((frame.px_lo + frame.px_hi) / 2, 20, title))
    parts.append(frame.border())
    tick_lo = int(math.ceil(lo))
    tick_hi = int(math.floor(hi))
    step = max(1, (tick_hi - tick_lo) // 6 + 1) if tick_hi > tick_lo else 1
    for power in range(tick_lo, tick_hi + 1, step):
        py = frame.y(power)
        parts.append(_polyline([(frame.px_lo - 4, py), (frame.px_lo, py)],
                               stroke="#888888"))
        parts.append(_text(frame.px_lo - 7, py + 4, "1e%d" % (power,),
                           anchor="end"))

    slot = (frame.px_hi - frame.px_lo) / len(cleaned)
    half = 0.28 * slot
    for index, (label, values) in enumerate(cleaned):
        center = frame.px_lo + (index + 0.5) * slot
        p5, p25, p50, p75, p95 = (
            frame.y(math.log10(_quantile(values, q)))
            for q in (0.05, 0.25, 0.50, 0.75, 0.95))
        stroke = "#1a5fb4"
        parts.append(_polyline([(center, p95), (center, p75)], stroke=stroke))
        parts.append(_polyline([(center, p25), (center, p5)], stroke=stroke))
        parts.append(_polyline([(center - half / 2, p95),
                                (center + half / 2, p95)], stroke=stroke))
        parts.append(_polyline([(center - half / 2, p5),
                                (center + half / 2, p5)], stroke=stroke))
        parts.append(_polyline(
            [(center - half, p75), (center + half, p75),
             (center + half, p25), (center - half, p25),
             (center - half, p75)], stroke=stroke))
        parts.append(_polyline([(center - half, p50), (center + half, p50)],
                               stroke="#c01c28", width=1.5))
        parts.append(_text(center, frame.py_hi + 16, label))

    parts.append("</svg>")
    return "\n".join(parts) + "\n"
