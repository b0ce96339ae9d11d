"""Spacing-increasing discretization (SID) of depth and ordinal label coding."""

from dataclasses import dataclass, field

import numpy as np


class DiscretizationError(ValueError):
    pass


@dataclass(frozen=True)
class SidBins:
    alpha: float = 1.0
    beta: float = 80.0
    K: int = 80
    thresholds: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (self.alpha > 0):
            raise DiscretizationError(f"alpha must be > 0, got {self.alpha}")
        if not (self.beta > self.alpha):
            raise DiscretizationError(f"beta must exceed alpha, got alpha={self.alpha}, beta={self.beta}")
        if int(self.K) != self.K or self.K < 2:
            raise DiscretizationError(f"K must be an integer >= 2, got {self.K}")
        object.__setattr__(self, "K", int(self.K))
        if self.thresholds is None:
            object.__setattr__(self, "thresholds", _sid(self.alpha, self.beta, self.K))
        else:
            t = np.asarray(self.thresholds, dtype=np.float64)
            if t.shape != (self.K + 1,) or t[0] != self.alpha or t[-1] != self.beta or np.any(np.diff(t) <= 0):
                raise DiscretizationError("thresholds inconsistent with (alpha, beta, K)")
            object.__setattr__(self, "thresholds", t)
        self.thresholds.setflags(write=False)

    def midpoints(self):
        t = self.thresholds
        return 0.5 * (t[:-1] + t[1:])

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta, "K": self.K}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["alpha"]), float(d["beta"]), int(d["K"]))


def _sid(alpha, beta, K):
    i = np.arange(K + 1, dtype=np.float64)
    t = np.exp(np.log(alpha) + i * np.log(beta / alpha) / K)
    t[0], t[-1] = alpha, beta
    return t


def sid_thresholds(alpha, beta, K):
    """Log-uniform bin edges t_i = exp(log(alpha) + i * log(beta / alpha) / K)."""
    return SidBins(alpha, beta, K)


@dataclass
class OrdinalLabels:
    labels: np.ndarray  # int64, bin index; 0 where mask is False
    mask: np.ndarray  # bool


def encode_depth(gt, bins, out_of_range="clamp"):
    """Map metric depth to bin indices; zero depth means no supervision.

    ``out_of_range`` is ``"clamp"`` (depths outside [alpha, beta] are clamped
    into the end bins) or ``"mask"`` (they are dropped from supervision).
    """
    gt = np.asarray(gt, dtype=np.float64)
    mask = gt > 0
    if out_of_range == "mask":
        mask &= (gt >= bins.alpha) & (gt <= bins.beta)
    elif out_of_range != "clamp":
        raise DiscretizationError(f"out_of_range must be 'clamp' or 'mask', got {out_of_range!r}")
    d = np.clip(gt, bins.alpha, bins.beta)
    labels = np.searchsorted(bins.thresholds, d, side="right") - 1
    labels = np.clip(labels, 0, bins.K - 1)
    labels[~mask] = 0
    return OrdinalLabels(labels.astype(np.int64), mask)


def ordinal_targets(labels, K):
    """Perfect ordinal probability vector: P_k = 1 iff k < label. Shape (..., K, H, W)."""
    labels = np.asarray(labels)
    k = np.arange(K).reshape((K,) + (1,) * 2)
    return (k < labels[..., None, :, :]).astype(np.float64)


def decode_ordinal(probs, bins):
    """Count thresholds with P_k >= 0.5 and return the bin midpoint depth.

    ``probs`` is K x H x W or B x K x H x W.
    """
    p = np.asarray(probs)
    if p.shape[-3] != bins.K:
        raise DiscretizationError(f"probability map has {p.shape[-3]} bins, expected {bins.K}")
    count = (p >= 0.5).sum(axis=-3)
    idx = np.minimum(count, bins.K - 1)
    return bins.midpoints()[idx]
