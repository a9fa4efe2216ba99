"""Per-sample, per-channel feature moments and cohort-level summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

DEFAULT_EPS = 1e-6
Z_95 = 1.96


@dataclass
class ChannelStats:
    """Moments of shape (B, C), always stored as float64 tensors."""

    mu: torch.Tensor
    sigma: torch.Tensor
    gamma: torch.Tensor
    kappa: torch.Tensor
    eps: float = DEFAULT_EPS

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mu.shape)

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).detach().cpu().numpy()
                for k in ("mu", "sigma", "gamma", "kappa")}

    def aggregated(self) -> tuple[np.ndarray, np.ndarray]:
        """Channel-mean skewness and kurtosis, one value per sample."""
        g = self.gamma.detach().cpu().numpy().mean(axis=1)
        k = self.kappa.detach().cpu().numpy().mean(axis=1)
        return g, k


@dataclass
class CohortMomentSummary:
    cohort: str
    mean_skew: float
    ci_skew: float
    mean_kurt: float
    ci_kurt: float
    n: int


def _as_float64_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float64)
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _validate(x: torch.Tensor, eps: float) -> torch.Tensor:
    if x.dim() != 5:
        raise ValueError(f"expected a (B, C, D, H, W) batch, got shape {tuple(x.shape)}")
    B, C = x.shape[:2]
    if B < 1 or C < 1:
        raise ValueError(f"batch and channel counts must be >= 1, got B={B}, C={C}")
    flat = x.reshape(B, C, -1)
    if flat.shape[-1] < 2:
        raise ValueError(f"need at least 2 spatial positions per channel, got N={flat.shape[-1]}")
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    finite = torch.isfinite(flat).all(dim=-1)
    if not bool(finite.all()):
        b, c = (int(i) for i in torch.nonzero(~finite)[0])
        raise ValueError(f"non-finite activation in sample b={b}, channel c={c}")
    return flat


def compute_channel_stats(x, eps: float = DEFAULT_EPS) -> ChannelStats:
    """Spatial mean, std, skewness and excess kurtosis for every (b, c).

    Population (divide-by-N) moments; ``eps`` enters only under the square
    root of the std, and skewness/kurtosis are standardized by that std.
    The result is detached from any autograd graph.
    """
    flat = _validate(_as_float64_tensor(x), eps)
    mu = flat.mean(dim=-1)
    dev = flat - mu.unsqueeze(-1)
    var = dev.square().mean(dim=-1)
    if eps == 0 and bool((var == 0).any()):
        b, c = (int(i) for i in torch.nonzero(var == 0)[0])
        raise ValueError(f"zero-variance channel b={b}, c={c} requires eps > 0")
    sigma = torch.sqrt(var + eps)
    z = dev / sigma.unsqueeze(-1)
    z2 = z * z
    gamma = (z2 * z).mean(dim=-1)
    kappa = (z2 * z2).mean(dim=-1) - 3.0
    return ChannelStats(mu=mu, sigma=sigma, gamma=gamma, kappa=kappa, eps=float(eps))


def oracle_channel_stats(x, eps: float = DEFAULT_EPS) -> ChannelStats:
    """Reference moments via two-pass extended-precision central sums.

    Kept deliberately unlike :func:`compute_channel_stats`: raw central
    moment sums in ``np.longdouble`` with an exactly-rounded mean, per
    channel, then standardized at the end. Used as ground truth in tests.
    """
    flat = _validate(_as_float64_tensor(x), eps).numpy()
    B, C, N = flat.shape
    out = {k: np.empty((B, C), dtype=np.float64) for k in ("mu", "sigma", "gamma", "kappa")}
    n = np.longdouble(N)
    for b in range(B):
        for c in range(C):
            vals = flat[b, c]
            mean = np.longdouble(math.fsum(vals.tolist())) / n
            dev = vals.astype(np.longdouble) - mean
            # second pass correction for residual error in the mean
            mean = mean + dev.sum() / n
            dev = vals.astype(np.longdouble) - mean
            d2 = dev * dev
            m2 = d2.sum() / n
            m3 = (d2 * dev).sum() / n
            m4 = (d2 * d2).sum() / n
            if eps == 0 and m2 == 0:
                raise ValueError(f"zero-variance channel b={b}, c={c} requires eps > 0")
            var = m2 + np.longdouble(eps)
            sd = np.sqrt(var)
            out["mu"][b, c] = float(mean)
            out["sigma"][b, c] = float(sd)
            out["gamma"][b, c] = float(m3 / (var * sd))
            out["kappa"][b, c] = float(m4 / (var * var) - 3)
    return ChannelStats(**{k: torch.from_numpy(v) for k, v in out.items()}, eps=float(eps))


def summarize_cohort_moments(stats_per_sample: Sequence[ChannelStats],
                             grouping: Sequence[str]) -> list[CohortMomentSummary]:
    """Mean channel-aggregated skewness/kurtosis per cohort with 95% CIs.

    ``grouping[i]`` is the cohort id of every sample in ``stats_per_sample[i]``.
    Rows come out in first-seen cohort order.
    """
    if len(stats_per_sample) != len(grouping):
        raise ValueError("stats_per_sample and grouping must have equal length")
    skews: dict[str, list[float]] = {}
    kurts: dict[str, list[float]] = {}
    for st, cohort in zip(stats_per_sample, grouping):
        g, k = st.aggregated()
        skews.setdefault(cohort, []).extend(g.tolist())
        kurts.setdefault(cohort, []).extend(k.tolist())

    rows = []
    for cohort in skews:
        g = np.asarray(skews[cohort])
        k = np.asarray(kurts[cohort])
        n = g.size
        if n < 2:
            raise ValueError(f"cohort {cohort!r} has {n} sample(s); need at least 2 for a CI")
        rows.append(CohortMomentSummary(
            cohort=cohort,
            mean_skew=float(g.mean()),
            ci_skew=float(Z_95 * g.std(ddof=1) / math.sqrt(n)),
            mean_kurt=float(k.mean()),
            ci_kurt=float(Z_95 * k.std(ddof=1) / math.sqrt(n)),
            n=n,
        ))
    return rows


def intervals_overlap(center_a: float, half_a: float, center_b: float, half_b: float) -> bool:
    return abs(center_a - center_b) <= half_a + half_b


SUMMARY_HEADER = ["cohort", "mean_skew", "ci_skew", "mean_kurt", "ci_kurt", "n"]


def write_summary_csv(rows: Iterable[CohortMomentSummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.cohort, f"{r.mean_skew:.6f}", f"{r.ci_skew:.6f}",
                        f"{r.mean_kurt:.6f}", f"{r.ci_kurt:.6f}", r.n])


def read_summary_csv(path) -> list[CohortMomentSummary]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        return [CohortMomentSummary(r["cohort"], float(r["mean_skew"]), float(r["ci_skew"]),
                                    float(r["mean_kurt"]), float(r["ci_kurt"]), int(r["n"]))
                for r in reader]
