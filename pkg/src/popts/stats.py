"""Cross-correlation, multi-bandwidth MMD, the population loss, and histogram KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_BANDWIDTHS = (0.005, 0.01, 0.05, 0.1, 0.5, 1.0)

# variance floor below which a series counts as constant
_VAR_EPS = 1e-12


class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class CCVector:
    values: np.ndarray
    pair_index: list[tuple[int, int]]
    degenerate: np.ndarray


def pair_index(features: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(features) for j in range(i + 1, features)]


def pearson(x, y) -> float:
    """Zero-lag Pearson coefficient of two equal-length series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two 1-D series of equal length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = np.mean(xc * xc)
    vy = np.mean(yc * yc)
    if vx <= _VAR_EPS or vy <= _VAR_EPS:
        raise UndefinedCorrelation("undefined correlation: zero-variance input")
    r = np.mean(xc * yc) / np.sqrt(vx * vy)
    return float(np.clip(r, -1.0, 1.0))


def cc_matrix(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample Pearson values for every dimension pair.

    Returns ``(values [N, M], degenerate [N, M])``; degenerate entries
    (a zero-variance dimension in that sample) are set to 0.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    n, _, f = x.shape
    if f < 2:
        raise ValueError("no pairs: need at least 2 features")
    xc = x - x.mean(axis=1, keepdims=True)
    cov = np.einsum("nli,nlj->nij", xc, xc) / x.shape[1]
    var = np.diagonal(cov, axis1=1, axis2=2)
    iu, ju = np.triu_indices(f, k=1)
    num = cov[:, iu, ju]
    den2 = var[:, iu] * var[:, ju]
    degenerate = (var[:, iu] <= _VAR_EPS) | (var[:, ju] <= _VAR_EPS)
    vals = np.where(degenerate, 0.0, num / np.sqrt(np.where(degenerate, 1.0, den2)))
    return np.clip(vals, -1.0, 1.0), degenerate


def cc_vector(sample: np.ndarray) -> CCVector:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2:
        raise ValueError("cc_vector takes a single [L, F] sample")
    vals, deg = cc_matrix(sample)
    return CCVector(vals[0], pair_index(sample.shape[1]), deg[0])


def cc_torch(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable per-sample Pearson values, shape ``[b, M]``, plus degeneracy mask."""
    b, _, f = x.shape
    if f < 2:
        raise ValueError("no pairs: need at least 2 features")
    xc = x - x.mean(dim=1, keepdim=True)
    cov = torch.einsum("bli,blj->bij", xc, xc) / x.shape[1]
    var = torch.diagonal(cov, dim1=1, dim2=2)
    iu, ju = torch.triu_indices(f, f, offset=1)
    degenerate = (var[:, iu] <= _VAR_EPS) | (var[:, ju] <= _VAR_EPS)
    den = torch.sqrt(torch.where(degenerate, torch.ones_like(var[:, iu]), var[:, iu] * var[:, ju]))
    vals = torch.where(degenerate, torch.zeros_like(den), cov[:, iu, ju] / den)
    return vals, degenerate


def _as_points(a) -> torch.Tensor:
    t = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))
    if t.ndim == 1:
        t = t[:, None]
    return t


def _kernel_mean(a: torch.Tensor, b: torch.Tensor, bandwidths) -> torch.Tensor:
    # a: [..., n, d], b: [..., m, d] -> [...]
    d2 = ((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1)
    return sum(torch.exp(-d2 / w).mean(dim=(-2, -1)) for w in bandwidths)


def mmd_batched(p: torch.Tensor, q: torch.Tensor, bandwidths=DEFAULT_BANDWIDTHS) -> torch.Tensor:
    """Squared-MMD V-statistic over leading batch axes: ``p [..., n, d]``, ``q [..., m, d]``."""
    if p.shape[-2] < 1 or q.shape[-2] < 1:
        raise ValueError("empty sample set")
    if not bandwidths or min(bandwidths) <= 0:
        raise ValueError("bandwidths must be a nonempty set of positive reals")
    out = _kernel_mean(p, p, bandwidths) - 2.0 * _kernel_mean(p, q, bandwidths) + _kernel_mean(q, q, bandwidths)
    return out.clamp_min(0.0)


def mmd(p, q, bandwidths=DEFAULT_BANDWIDTHS):
    """Multi-bandwidth RBF MMD, ``k_w(a, b) = exp(-|a - b|^2 / w)``.

    Returns a tensor when either input is a tensor, otherwise a float.
    """
    as_tensor = isinstance(p, torch.Tensor) or isinstance(q, torch.Tensor)
    pt, qt = _as_points(p), _as_points(q)
    if len(pt) == 0 or len(qt) == 0:
        raise ValueError("empty sample set")
    if pt.dtype != qt.dtype:
        qt = qt.to(pt.dtype)
    val = mmd_batched(pt, qt, bandwidths)
    return val if as_tensor else float(val)


def l_pop(x0: torch.Tensor, x0_hat: torch.Tensor, bandwidths=DEFAULT_BANDWIDTHS) -> torch.Tensor:
    """Mean over dimension pairs of MMD between real and predicted CC distributions.

    Pairs whose real values are degenerate in every sample are dropped from
    the average; individual degenerate values enter as 0.
    """
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    if x0.shape[0] < 2:
        raise ValueError("insufficient batch for distribution comparison")
    with torch.no_grad():
        p, p_deg = cc_torch(x0.detach().to(x0_hat.dtype))
    q, _ = cc_torch(x0_hat)
    keep = ~p_deg.all(dim=0)
    if not bool(keep.any()):
        return x0_hat.sum() * 0.0
    # [M, b, 1] point sets per pair
    per_pair = mmd_batched(p.T[keep][..., None], q.T[keep][..., None], bandwidths)
    return per_pair.mean()


def hist_divergence(p_samples, q_samples, bins: int = 50, value_range=None, smoothing: float = 1e-8) -> float:
    """Discrete KL(P || Q) between equal-width histograms on a shared range.

    The range defaults to the union of both sample sets. ``smoothing`` is
    added to each bin's relative frequency before renormalizing.
    """
    p = np.asarray(p_samples, dtype=np.float64).ravel()
    q = np.asarray(q_samples, dtype=np.float64).ravel()
    if p.size == 0 or q.size == 0:
        raise ValueError("empty sample set")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if value_range is None:
        value_range = (min(p.min(), q.min()), max(p.max(), q.max()))
    hp = _smoothed_hist(p, bins, value_range, smoothing)
    hq = _smoothed_hist(q, bins, value_range, smoothing)
    return float(max(np.sum(hp * np.log(hp / hq)), 0.0))


def _smoothed_hist(x, bins, value_range, smoothing):
    counts, _ = np.histogram(x, bins=bins, range=value_range)
    freq = counts / x.size + smoothing
    return freq / freq.sum()
