"""Matched-pairs significance test on per-utterance error counts."""
from __future__ import annotations

import numpy as np
from scipy import stats

EXACT_MAX_PAIRS = 20


def matched_pairs_test(errors_a, errors_b, exact_max: int = EXACT_MAX_PAIRS) -> float:
    """Two-sided p-value for "no difference in mean per-utterance errors".

    With at most ``exact_max`` pairs the p-value is the exact sign-flip
    permutation probability of a summed difference at least as extreme as
    the observed one. Larger samples use the normal approximation to the
    mean difference.
    """
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired error vectors must have equal length, got {a.shape} and {b.shape}")
    d = a - b
    n = d.size
    if n == 0 or not np.any(d):
        return 1.0
    if n <= exact_max:
        observed = abs(d.sum())
        # tolerate float rounding in the comparison
        threshold = observed - 1e-9 * max(1.0, observed)
        hits = 0
        block = 1 << min(n, 14)
        bits = np.arange(n)
        for start in range(0, 2**n, block):
            codes = np.arange(start, start + block)[:, None]
            signs = ((codes >> bits) & 1) * 2 - 1
            hits += int(np.count_nonzero(np.abs(signs @ d) >= threshold))
        return hits / 2**n
    sd = d.std(ddof=1)
    if sd == 0:
        return 0.0
    z = d.mean() / (sd / np.sqrt(n))
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
