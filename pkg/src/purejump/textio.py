"""Number formatting shared by every CSV writer."""

from __future__ import annotations

import math


def fmt_float(x) -> str:
    """Seventeen significant digits, enough to round-trip any double."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")
