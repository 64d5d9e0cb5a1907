"""Ranking, adversarial, image-space and feature-space objectives.

Every term is a sum over the batch.  Inputs may be plain arrays or
:class:`~gandisco.tensor.Tensor` objects; outputs are scalar tensors so the
same code serves training and closed-form checks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, as_tensor

NORM_EPS = 1e-12
LOG_CLAMP = 1e-7


class LossDomainError(ValueError):
    """A probability fed to a log-loss lies outside (0, 1)."""


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    rank: float = 0.05
    img: float = 1e-6
    feat: float = 1e-5
    adv: float = 100.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise LossConfigError(f"loss coefficient {k} must be non-negative, got {v}")


# -- distances --------------------------------------------------------------

def _rows(x) -> Tensor:
    x = as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


def cosine_distance_with_flag(a, b) -> tuple[Tensor, np.ndarray]:
    """Row-wise 1 - cos(a, b) and a mask of rows where a norm fell below 1e-12.

    Degenerate rows get distance 1.0 and no gradient.
    """
    a, b = _rows(a), _rows(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine distance needs equal shapes, got {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    degenerate = (na < NORM_EPS) | (nb < NORM_EPS)
    dot = (a * b).sum(axis=1)
    na_t = T.sqrt((a * a).sum(axis=1) + degenerate * 1.0)
    nb_t = T.sqrt((b * b).sum(axis=1) + degenerate * 1.0)
    cos = dot / (na_t * nb_t)
    keep = Tensor((~degenerate).astype(float))
    return 1.0 - cos * keep, degenerate


def cosine_distance(a, b) -> Tensor:
    """1 - a.b / (|a||b|); a single value for vectors, one per row for matrices."""
    d, _ = cosine_distance_with_flag(a, b)
    a = as_tensor(a)
    return d.reshape(()) if a.ndim == 1 else d


# -- objectives ---------------------------------------------------------------

def ranking_loss(f_s, f_pos, f_neg, margin: float = 0.0) -> Tensor:
    """Hinge max{0, Dist(S, x+) - Dist(S, x-) + margin}, summed over rows."""
    d_pos, _ = cosine_distance_with_flag(f_s, f_pos)
    d_neg, _ = cosine_distance_with_flag(f_s, f_neg)
    return T.maximum(d_pos - d_neg + margin, 0.0).sum()


def _check_probs(p: Tensor) -> Tensor:
    if not np.all(np.isfinite(p.data)) or np.any(p.data <= 0.0) or np.any(p.data >= 1.0):
        raise LossDomainError("discriminator scores must lie strictly inside (0, 1)")
    return p


def _clamped_log(p: Tensor) -> Tensor:
    return T.log(T.clip(p, LOG_CLAMP, 1.0))


def discriminator_loss(real_scores, fake_scores) -> Tensor:
    """-sum(log D(x+) + log(1 - D(S)))."""
    real = _check_probs(as_tensor(real_scores))
    fake = _check_probs(as_tensor(fake_scores))
    return -(_clamped_log(real).sum() + _clamped_log(1.0 - fake).sum())


def adversarial_loss(fake_scores) -> Tensor:
    """-sum(log D(S)); small when the discriminator is fooled."""
    fake = _check_probs(as_tensor(fake_scores))
    return -_clamped_log(fake).sum()


def discriminator_loss_logp(real_logp: Tensor, fake_logp: Tensor) -> Tensor:
    """Same objective from [N, 2] log-probabilities (column 1 = real); saturation safe."""
    lo = math.log(LOG_CLAMP)
    return -(T.maximum(real_logp[:, 1], lo).sum() + T.maximum(fake_logp[:, 0], lo).sum())


def adversarial_loss_logp(fake_logp: Tensor) -> Tensor:
    return -T.maximum(fake_logp[:, 1], math.log(LOG_CLAMP)).sum()


def image_loss(s, x_pos) -> Tensor:
    """Sum of squared pixel differences."""
    s, x_pos = as_tensor(s), as_tensor(x_pos)
    if s.shape != x_pos.shape:
        raise DimensionError(f"image loss needs equal shapes, got {s.shape} and {x_pos.shape}")
    diff = s - x_pos
    return (diff * diff).sum()


def average_box_features(box_features) -> Tensor:
    """Mean over the K box features; [K, D] -> [D] or [N, K, D] -> [N, D]."""
    if isinstance(box_features, (list, tuple)):
        if len(box_features) == 0:
            raise LossConfigError("feature loss needs at least one box feature (K >= 1)")
        box_features = T.stack([as_tensor(f) for f in box_features], axis=0)
    bf = as_tensor(box_features)
    if bf.shape[-2] == 0:
        raise LossConfigError("feature loss needs at least one box feature (K >= 1)")
    return bf.mean(axis=-2)


def feature_loss(f_s, box_features) -> Tensor:
    """sum ||f(S) - mean_k f(box_k)||^2."""
    f_avg = average_box_features(box_features)
    f_s = as_tensor(f_s)
    if f_s.shape != f_avg.shape:
        raise DimensionError(f"feature loss shapes differ: {f_s.shape} vs {f_avg.shape}")
    diff = f_s - f_avg
    return (diff * diff).sum()


# -- combination -----------------------------------------------------------------

TERM_ORDER = ("rank", "img", "feat", "adv")


def active_terms(mode: str, use_rank: bool = True, use_recon: bool = True, use_adv: bool = True) -> tuple[str, ...]:
    if mode not in ("supervised", "weak"):
        raise LossConfigError(f"mode must be 'supervised' or 'weak', got {mode!r}")
    recon = "img" if mode == "supervised" else "feat"
    chosen = {"rank": use_rank, recon: use_recon, "adv": use_adv}
    return tuple(t for t in TERM_ORDER if chosen.get(t, False))


def weighted_sum(values: dict, weights: LossWeights, terms: Sequence[str]):
    total = 0.0
    for t in terms:
        total = total + getattr(weights, t) * values[t]
    return total


@dataclass
class LossReport:
    mode: str
    terms: tuple[str, ...]
    weights: LossWeights
    rank: float = 0.0
    adv: float = 0.0
    disc: float = 0.0
    img: float = 0.0
    feat: float = 0.0
    total: float = 0.0
    step: int | None = None
    extras: dict = field(default_factory=dict)

    def recompute_total(self) -> float:
        return float(weighted_sum({t: getattr(self, t) for t in TERM_ORDER}, self.weights, self.terms))

    def as_record(self) -> dict:
        rec = {"step": self.step, "mode": self.mode, "terms": "+".join(self.terms)}
        rec.update({k: getattr(self, k) for k in ("rank", "adv", "disc", "img", "feat", "total")})
        rec.update({f"alpha_{k}": v for k, v in asdict(self.weights).items()})
        rec.update(self.extras)
        return rec


def total_loss(values: dict, mode: str, weights: LossWeights = LossWeights(),
               terms: Sequence[str] | None = None) -> tuple[Tensor | float, LossReport]:
    """Coefficient-weighted sum of the active terms.

    ``values`` maps term names to scalar tensors or floats.  Supervised mode
    combines (rank, img, adv); weak mode swaps img for feat.  Terms outside
    the active set are ignored but still recorded in the report.
    """
    if terms is None:
        terms = active_terms(mode)
    recon_banned = "feat" if mode == "supervised" else "img"
    if recon_banned in terms:
        raise LossConfigError(f"term {recon_banned!r} is not used in {mode} mode")
    missing = [t for t in terms if t not in values]
    if missing:
        raise LossConfigError(f"missing values for active terms {missing}")
    floats = {t: float(as_tensor(values[t]).data) if t in values else 0.0 for t in TERM_ORDER}
    floats["disc"] = float(as_tensor(values["disc"]).data) if "disc" in values else 0.0
    total = weighted_sum({t: values[t] for t in terms}, weights, terms)
    report = LossReport(mode=mode, terms=tuple(terms), weights=weights, **floats)
    report.total = float(weighted_sum(floats, weights, terms))
    return total, report
