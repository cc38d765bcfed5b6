"""Real-vs-synthetic metrics: distribution shift scores, post-hoc models, feature distances."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from scipy import stats as sps

from .data import Dataset
from .stats import DEFAULT_BANDWIDTHS, cc_matrix, hist_divergence, pair_index

DEFAULT_BINS = 50


class EvaluationError(ValueError):
    pass


def _samples(ds) -> np.ndarray:
    return np.asarray(ds.samples if isinstance(ds, Dataset) else ds, dtype=np.float64)


def _same_shape(real: np.ndarray, syn: np.ndarray) -> None:
    if real.ndim != 3 or syn.ndim != 3 or real.shape[1:] != syn.shape[1:]:
        raise EvaluationError(f"shape mismatch: real {real.shape[1:]} vs synthetic {syn.shape[1:]}")


def vds(real, syn, bins: int = DEFAULT_BINS) -> float:
    """Mean over dimensions of the KL between pooled value histograms."""
    r, s = _samples(real), _samples(syn)
    _same_shape(r, s)
    return float(np.mean([hist_divergence(r[..., k], s[..., k], bins) for k in range(r.shape[2])]))


def fdds(real, syn, bins: int = DEFAULT_BINS) -> float:
    """Mean over dimension pairs of the KL between per-sample Pearson histograms on [-1, 1].

    Degenerate (zero-variance) values are dropped; a pair with no valid
    value on either side is left out of the mean.
    """
    r, s = _samples(real), _samples(syn)
    _same_shape(r, s)
    if r.shape[2] < 2:
        raise EvaluationError("FDDS needs at least 2 features")
    cr, dr = cc_matrix(r)
    cs, ds_ = cc_matrix(s)
    scores = []
    for m in range(cr.shape[1]):
        p = cr[~dr[:, m], m]
        q = cs[~ds_[:, m], m]
        if p.size == 0 or q.size == 0:
            continue
        scores.append(hist_divergence(p, q, bins, value_range=(-1.0, 1.0)))
    if not scores:
        raise EvaluationError("FDDS undefined: every dimension pair is degenerate")
    return float(np.mean(scores))


class _GRUHead(nn.Module):
    def __init__(self, in_dim, hidden, layers, out_dim, per_step: bool):
        super().__init__()
        self.rnn = nn.GRU(in_dim, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, out_dim)
        self.per_step = per_step

    def forward(self, x):
        out, h = self.rnn(x)
        return self.head(out if self.per_step else h[-1])


def _fit(model, x, y, loss_fn, iterations, batch, gen, lr=1e-3):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(x)
    for _ in range(iterations):
        idx = torch.randint(0, n, (min(batch, n),), generator=gen)
        loss = loss_fn(model(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def _split(n, rng, frac=0.8):
    perm = rng.permutation(n)
    cut = int(round(frac * n))
    return perm[:cut], perm[cut:]


def discriminative_accuracy(real, syn, repeats: int = 5, seed: int = 0, iterations: int = 2000,
                            batch: int = 128) -> tuple[float, float]:
    """Post-hoc GRU real/synthetic classifier; returns mean and std of |acc - 0.5|.

    Each repeat draws a fresh 80/20 split of both sides and a fresh
    classifier. The test set is balanced by truncating to the smaller side.
    """
    r, s = _samples(real), _samples(syn)
    _same_shape(r, s)
    if len(r) < 10 or len(s) < 10:
        raise EvaluationError("insufficient data for DA: need at least 10 samples per side")
    f = r.shape[2]
    hidden = max(1, math.ceil(2 * f))
    scores = []
    for rep in range(repeats):
        rng = np.random.default_rng([seed, rep])
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        r_tr, r_te = _split(len(r), rng)
        s_tr, s_te = _split(len(s), rng)
        x_tr = torch.as_tensor(np.concatenate([r[r_tr], s[s_tr]]), dtype=torch.float32)
        y_tr = torch.cat([torch.ones(len(r_tr)), torch.zeros(len(s_tr))])[:, None]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(rng.integers(2**31)))
            clf = _GRUHead(f, hidden, 2, 1, per_step=False)
        _fit(clf, x_tr, y_tr, nn.BCEWithLogitsLoss(), iterations, batch, gen)
        k = min(len(r_te), len(s_te))
        with torch.no_grad():
            pr = clf(torch.as_tensor(r[r_te[:k]], dtype=torch.float32)).squeeze(-1) > 0
            ps = clf(torch.as_tensor(s[s_te[:k]], dtype=torch.float32)).squeeze(-1) > 0
        acc = (pr.sum().item() + (~ps).sum().item()) / (2 * k)
        scores.append(abs(acc - 0.5))
    return float(np.mean(scores)), float(np.std(scores))


def predictive_score(real, syn, repeats: int = 5, seed: int = 0, iterations: int = 2000,
                     batch: int = 128) -> tuple[float, float]:
    """Train-on-synthetic, test-on-real next-step regression of the last feature.

    Inputs are the other features at steps ``0..L-2``; targets are the last
    feature at steps ``1..L-1``. With a single feature the model reads the
    last feature itself. Returns mean and std of the real-data MAE.
    """
    r, s = _samples(real), _samples(syn)
    _same_shape(r, s)
    if r.shape[1] < 2:
        raise EvaluationError("predictive score needs sequence length >= 2")
    if len(s) < 2 or len(r) < 1:
        raise EvaluationError("insufficient data for predictive score")
    f = r.shape[2]
    cols = slice(0, f - 1) if f > 1 else slice(0, 1)
    in_dim = max(f - 1, 1)

    def xy(a):
        return (torch.as_tensor(a[:, :-1, cols], dtype=torch.float32),
                torch.as_tensor(a[:, 1:, f - 1:], dtype=torch.float32))

    xs, ys = xy(s)
    xr, yr = xy(r)
    scores = []
    for rep in range(repeats):
        rng = np.random.default_rng([seed, rep, 1])
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(rng.integers(2**31)))
            reg = _GRUHead(in_dim, max(1, math.ceil(f / 2)), 1, 1, per_step=True)
        _fit(reg, xs, ys, nn.L1Loss(), iterations, batch, gen)
        with torch.no_grad():
            scores.append(float((reg(xr) - yr).abs().mean()))
    return float(np.mean(scores)), float(np.std(scores))


def _autocorr(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Per-sample autocorrelation at lags 1..max_lag for ``x [N, L]``; constant series give 0."""
    xc = x - x.mean(axis=1, keepdims=True)
    var = (xc * xc).sum(axis=1)
    out = np.zeros((x.shape[0], max_lag))
    ok = var > 1e-12
    for lag in range(1, max_lag + 1):
        num = (xc[:, :-lag] * xc[:, lag:]).sum(axis=1)
        out[ok, lag - 1] = num[ok] / var[ok]
    return out


def _moment(x, fn):
    x = x.ravel()
    if np.ptp(x) == 0:
        return 0.0
    return float(fn(x))


def dtw_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Classic DTW with absolute-difference cost along the last axis.

    ``x`` and ``y`` are ``[..., L]`` (matching leading shape); the DP is
    vectorized over the leading axes.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = x.shape[-1], y.shape[-1]
    cost = np.abs(x[..., :, None] - y[..., None, :])
    acc = np.full(x.shape[:-1] + (n + 1, m + 1), np.inf)
    acc[..., 0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = np.minimum(np.minimum(acc[..., i - 1, j], acc[..., i, j - 1]), acc[..., i - 1, j - 1])
            acc[..., i, j] = cost[..., i - 1, j - 1] + best
    return acc[..., n, m]


def pairing(n_real: int, n_syn: int, seed: int, limit: int = 1000, identity: bool = False):
    """Index arrays pairing real and synthetic samples one-to-one."""
    k = min(n_real, n_syn, limit)
    if identity:
        return np.arange(k), np.arange(k)
    rng = np.random.default_rng([seed, 2])
    return rng.choice(n_real, k, replace=False), rng.choice(n_syn, k, replace=False)


def feature_distance_report(real, syn, seed: int = 0, bins: int = DEFAULT_BINS,
                            identity_pairing: bool = False) -> dict[str, float]:
    """MDD, ACD, SD, KD, ED and DTW between two datasets.

    MDD is the mean |density difference| over ``bins`` shared histogram
    bins, averaged over dimensions. ACD compares sample-averaged
    autocorrelations at lags 1..L//2. SD/KD compare pooled skewness and
    excess kurtosis. ED/DTW average per-pair distances over a seeded
    one-to-one pairing; DTW sums per-dimension DTW.
    """
    r, s = _samples(real), _samples(syn)
    _same_shape(r, s)
    _, length, f = r.shape
    mdd, sd, kd = [], [], []
    for k in range(f):
        a, b = r[..., k].ravel(), s[..., k].ravel()
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        ha, _ = np.histogram(a, bins=bins, range=(lo, hi), density=True)
        hb, _ = np.histogram(b, bins=bins, range=(lo, hi), density=True)
        mdd.append(np.mean(np.abs(ha - hb)))
        sd.append(abs(_moment(a, sps.skew) - _moment(b, sps.skew)))
        kd.append(abs(_moment(a, sps.kurtosis) - _moment(b, sps.kurtosis)))
    max_lag = max(1, length // 2)
    acd = np.mean([
        np.abs(_autocorr(r[..., k], max_lag).mean(0) - _autocorr(s[..., k], max_lag).mean(0)).mean()
        for k in range(f)
    ]) if length > 1 else 0.0
    ri, si = pairing(len(r), len(s), seed, identity=identity_pairing)
    diff = r[ri] - s[si]
    ed = np.sqrt((diff ** 2).sum(axis=(1, 2))).mean()
    dtw = dtw_distance(r[ri].transpose(0, 2, 1), s[si].transpose(0, 2, 1)).sum(axis=1).mean()
    return {
        "mdd": float(np.mean(mdd)),
        "acd": float(acd),
        "sd": float(np.mean(sd)),
        "kd": float(np.mean(kd)),
        "ed": float(ed),
        "dtw": float(dtw),
    }


@dataclass
class MetricReport:
    vds: float
    fdds: float
    da_mean: float
    da_std: float
    pred_mean: float
    pred_std: float
    mdd: float
    acd: float
    sd: float
    kd: float
    ed: float
    dtw: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, outdir: str | os.PathLike) -> None:
        os.makedirs(outdir, exist_ok=True)
        d = self.to_dict()
        with open(os.path.join(outdir, "report.json"), "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(outdir, "report.txt"), "w") as fh:
            for key, val in d.items():
                if key == "config":
                    for ck, cv in sorted(val.items()):
                        fh.write(f"config.{ck} = {json.dumps(cv)}\n")
                else:
                    fh.write(f"{key} = {val!r}\n")

    @classmethod
    def read(cls, outdir: str | os.PathLike) -> "MetricReport":
        with open(os.path.join(outdir, "report.json")) as fh:
            return cls(**json.load(fh))


def evaluate(real, syn, seed: int = 0, bins: int = DEFAULT_BINS, repeats: int = 5,
             iterations: int = 2000, bandwidths=DEFAULT_BANDWIDTHS, identity_pairing: bool = False) -> MetricReport:
    r, s = _samples(real), _samples(syn)
    _same_shape(r, s)
    da = discriminative_accuracy(r, s, repeats, seed, iterations)
    pred = predictive_score(r, s, repeats, seed, iterations)
    fd = feature_distance_report(r, s, seed, bins, identity_pairing)
    config = {
        "bins": bins,
        "bandwidths": list(bandwidths),
        "seed": seed,
        "repeats": repeats,
        "classifier_iterations": iterations,
        "divergence": "KL(real||synthetic), equal-width histograms, smoothing 1e-8",
        "fdds_range": [-1.0, 1.0],
        "pairing": "identity" if identity_pairing else "seeded-random",
        "n_real": int(len(r)),
        "n_syn": int(len(s)),
        "pairs": [list(p) for p in pair_index(r.shape[2])],
    }
    return MetricReport(
        vds=vds(r, s, bins),
        fdds=fdds(r, s, bins),
        da_mean=da[0],
        da_std=da[1],
        pred_mean=pred[0],
        pred_std=pred[1],
        config=config,
        **fd,
    )
