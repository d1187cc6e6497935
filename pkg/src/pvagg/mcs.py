"""Monte Carlo study of the error made by evaluating g at fleet-averaged inputs.

Each trial draws hyper-parameters from uniform ranges, then ``samples``
(P_r, dV_PV, S) triples from normals with those means and spreads, and
compares the rating-weighted mean of g with g at the rating-weighted mean
inputs.

Every trial owns a Philox stream keyed by ``(seed, trial)``, so results do
not depend on how trials are split across workers.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .panel import PanelLut, lut_forward

_RANGES = ("mu_p", "sigma_p", "mu_v", "sigma_v", "mu_s", "sigma_s")
_MAX_REDRAWS = 16


@dataclass(frozen=True)
class McsConfig:
    trials: int = 100_000
    samples: int = 50
    seed: int = 2020
    mu_p: tuple = (150_000.0, 250_000.0)
    sigma_p: tuple = (10.0, 30.0)
    mu_v: tuple = (-30.0, -7.5)
    sigma_v: tuple = (2.0, 7.0)
    mu_s: tuple = (40.0, 70.0)
    sigma_s: tuple = (1.0, 10.0)
    chunk: int = 10_000

    def __post_init__(self):
        for name in ("trials", "samples", "chunk"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"mcs.{name} must be a positive integer")
        if self.seed < 0:
            raise ValueError("mcs.seed must be non-negative")
        for name in _RANGES:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"mcs.{name} bounds must be ordered, got [{lo}, {hi}]")
            if name.startswith("sigma") and lo < 0:
                raise ValueError(f"mcs.{name} must be non-negative")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @classmethod
    def from_dict(cls, d: dict) -> "McsConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown mcs key(s): {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def shrink_spread(self, factor: float) -> "McsConfig":
        """Copy with every sigma range divided by ``factor``."""
        d = asdict(self)
        for name in ("sigma_p", "sigma_v", "sigma_s"):
            d[name] = tuple(x / factor for x in d[name])
        return McsConfig(**d)


def approximation_error(p_r, dv, s, lut: PanelLut):
    """Absolute percentage error of g at averaged inputs, over the last axis.

    Inputs broadcast; a leading batch shape gives one error per batch entry.
    """
    p_r, dv, s = (np.asarray(a, dtype=float) for a in (p_r, dv, s))
    if p_r.shape[-1] == 0:
        raise ValueError("at least one sample is required")
    w = p_r / p_r.sum(axis=-1, keepdims=True)
    lhs = np.sum(w * lut_forward(lut, dv, s), axis=-1)
    rhs = lut_forward(lut, np.sum(w * dv, axis=-1), np.sum(w * s, axis=-1))
    if np.any(lhs == 0):
        raise ZeroDivisionError("weighted table value is zero; approximation error undefined")
    return 100.0 * np.abs(lhs - rhs) / np.abs(lhs)


def _draw_trial(cfg: McsConfig, lut: PanelLut, trial: int, attempt: int = 0):
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, trial | (attempt << 48)]))
    lo = np.array([getattr(cfg, k)[0] for k in _RANGES])
    hi = np.array([getattr(cfg, k)[1] for k in _RANGES])
    mp, sp, mv, sv, ms, ss = rng.uniform(lo, hi)
    n = cfg.samples
    p = rng.normal(mp, sp, n)
    v = rng.normal(mv, sv, n)
    s = rng.normal(ms, ss, n)
    # truncate to the table hull; ratings must stay positive
    p = np.maximum(p, 1.0)
    v = np.clip(v, lut.dv[0], lut.dv[-1])
    s = np.clip(s, lut.s[0], lut.s[-1])
    return p, v, s


def _trial_block(cfg: McsConfig, lut: PanelLut, start: int, stop: int) -> np.ndarray:
    n = stop - start
    P = np.empty((n, cfg.samples))
    V = np.empty_like(P)
    S = np.empty_like(P)
    for k in range(n):
        P[k], V[k], S[k] = _draw_trial(cfg, lut, start + k)
    w = P / P.sum(axis=1, keepdims=True)
    lhs = np.sum(w * lut_forward(lut, V, S), axis=1)
    # undefined error: redraw that trial from a fresh sub-stream
    for k in np.flatnonzero(lhs == 0):
        for attempt in range(1, _MAX_REDRAWS + 1):
            P[k], V[k], S[k] = _draw_trial(cfg, lut, start + k, attempt)
            if np.dot(P[k], lut_forward(lut, V[k], S[k])) != 0:
                break
        else:
            raise RuntimeError(f"trial {start + k}: table value stayed zero after {_MAX_REDRAWS} redraws")
    return approximation_error(P, V, S, lut)


@dataclass
class ErrorStats:
    errors: np.ndarray

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=float)

    def __len__(self):
        return self.errors.size

    def fraction_below(self, threshold: float = 5.0) -> float:
        return float(np.count_nonzero(self.errors < threshold) / self.errors.size)

    def histogram(self, bin_width: float = 1.0, upper: float | None = None):
        """Bin edges, probability per bin and cumulative probability."""
        top = float(np.max(self.errors)) if upper is None else upper
        edges = np.arange(0.0, top + bin_width, bin_width)
        if edges.size < 2:
            edges = np.array([0.0, bin_width])
        counts, _ = np.histogram(np.minimum(self.errors, edges[-1]), bins=edges)
        prob = counts / self.errors.size
        return edges, prob, np.cumsum(prob)

    def cdf(self, x):
        srt = np.sort(self.errors)
        return np.searchsorted(srt, np.asarray(x, dtype=float), side="right") / srt.size

    def merge(self, other: "ErrorStats") -> "ErrorStats":
        return ErrorStats(np.concatenate([self.errors, other.errors]))

    def to_csv(self, path=None, bin_width: float = 1.0) -> str:
        edges, prob, cum = self.histogram(bin_width)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo_pct", "bin_hi_pct", "probability", "cumulative"])
        for lo, hi, p, c in zip(edges[:-1], edges[1:], prob, cum):
            w.writerow([format(lo, ".9g"), format(hi, ".9g"), format(p, ".9g"), format(c, ".9g")])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {
            "trials": int(self.errors.size),
            "fraction_below_5pct": self.fraction_below(5.0),
            "median_pct": float(np.median(self.errors)),
            "mean_pct": float(np.mean(self.errors)),
            "p95_pct": float(np.percentile(self.errors, 95)),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())


def ks_distance(a: ErrorStats, b: ErrorStats) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    grid = np.union1d(a.errors, b.errors)
    return float(np.max(np.abs(a.cdf(grid) - b.cdf(grid))))


def run_mcs(cfg: McsConfig, lut: PanelLut, parallel: int = 1) -> ErrorStats:
    """Run every trial; ``parallel > 1`` spreads chunks over processes."""
    bounds = [(a, min(a + cfg.chunk, cfg.trials)) for a in range(0, cfg.trials, cfg.chunk)]
    if parallel > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            parts = list(pool.map(_trial_block, [cfg] * len(bounds), [lut] * len(bounds),
                                  [b[0] for b in bounds], [b[1] for b in bounds]))
    else:
        parts = [_trial_block(cfg, lut, a, b) for a, b in bounds]
    return ErrorStats(np.concatenate(parts))
