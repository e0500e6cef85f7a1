"""Monte Carlo summaries with a reproducible reduction order."""

from dataclasses import asdict, dataclass
import math

import numpy as np


class SampleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class McStats:
    mean: float
    se: float
    n: int
    lo: float
    hi: float
    target: float
    z: float

    def within(self, k=3.0, slack=0.0):
        """|mean - target| <= k SE + slack."""
        return abs(self.mean - self.target) <= k * self.se + slack

    def to_dict(self):
        return asdict(self)


def _z(diff, se):
    if se == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / se


def mc_summarize(samples, target=0.0):
    """Mean, SE = std(ddof=1)/sqrt(N), 3 SE interval and z-score against ``target``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise SampleSizeError(f"need at least 2 samples, got {x.size}")
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(x.size))
    return McStats(mean, se, int(x.size), mean - 3 * se, mean + 3 * se, float(target),
                   _z(mean - target, se))


def paired_summary(a, b):
    """Summary of the per-sample difference a - b against 0.

    Both estimators use the same paths, so the SE of the difference comes from
    the paired sample rather than from the two marginal SEs.
    """
    return mc_summarize(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 0.0)


def combine_chunks(chunks):
    """Concatenate per-chunk sample arrays in chunk order (the fixed reduction order)."""
    return np.concatenate([np.asarray(c, dtype=float) for c in chunks], axis=0)
