"""Plot-data export: CC histograms, value densities and 2-D sample embeddings."""

from __future__ import annotations

import csv
import json
import os
from typing import Callable

import numpy as np

from .evaluation import _same_shape, _samples
from .stats import cc_matrix, pair_index

Embedding = Callable[[np.ndarray, int], np.ndarray]

EMBED_LIMIT = 1000


def pca_embedding(features: np.ndarray, seed: int = 0) -> np.ndarray:
    from sklearn.decomposition import PCA

    x = np.asarray(features, dtype=np.float64)
    k = min(2, x.shape[1], x.shape[0])
    out = np.zeros((len(x), 2))
    out[:, :k] = PCA(n_components=k, random_state=seed).fit_transform(x)
    return out


def tsne_embedding(features: np.ndarray, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    """Exact t-SNE up to ``EMBED_LIMIT`` points, PCA beyond that or for tiny inputs."""
    from sklearn.manifold import TSNE

    x = np.asarray(features, dtype=np.float64)
    if len(x) > EMBED_LIMIT or len(x) < 5:
        return pca_embedding(x, seed)
    perp = min(perplexity, (len(x) - 1) / 3.0)
    return TSNE(n_components=2, perplexity=perp, method="exact", init="pca",
                random_state=seed).fit_transform(x)


EMBEDDINGS: dict[str, Embedding] = {"tsne": tsne_embedding, "pca": pca_embedding}


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _hist_rows(a, b, bins, value_range):
    ha, edges = np.histogram(a, bins=bins, range=value_range)
    hb, _ = np.histogram(b, bins=bins, range=value_range)
    fa = ha / max(a.size, 1)
    fb = hb / max(b.size, 1)
    return [(edges[i], edges[i + 1], fa[i], fb[i]) for i in range(bins)]


def export_plots(real, syn, outdir: str | os.PathLike, seed: int = 0, bins: int = 50,
                 embedding: str | Embedding = "tsne", images: bool = True) -> list[str]:
    """Write histogram/density/embedding tables (and PNGs); returns the written paths.

    Per-sample features for the embeddings are the CC vector and the
    per-dimension time average. At most ``EMBED_LIMIT // 2`` samples per
    side are embedded, chosen with a seeded permutation.
    """
    r, s = _samples(real), _samples(syn)
    _same_shape(r, s)
    os.makedirs(outdir, exist_ok=True)
    written = []
    f = r.shape[2]

    def out(name):
        path = os.path.join(outdir, name)
        written.append(path)
        return path

    header = ["bin_lo", "bin_hi", "real_freq", "syn_freq"]
    cc_tables = {}
    if f >= 2:
        cr, dr = cc_matrix(r)
        cs, ds_ = cc_matrix(s)
        for m, (i, j) in enumerate(pair_index(f)):
            rows = _hist_rows(cr[~dr[:, m], m], cs[~ds_[:, m], m], bins, (-1.0, 1.0))
            cc_tables[(i, j)] = rows
            _write_csv(out(f"cc_hist_{i}_{j}.csv"), header, rows)
    value_tables = {}
    for k in range(f):
        a, b = r[..., k].ravel(), s[..., k].ravel()
        rng_k = (min(a.min(), b.min()), max(a.max(), b.max()))
        rows = _hist_rows(a, b, bins, rng_k)
        value_tables[k] = rows
        _write_csv(out(f"value_density_{k}.csv"), header, rows)

    embed_fn = EMBEDDINGS[embedding] if isinstance(embedding, str) else embedding
    rng = np.random.default_rng([seed, 3])
    per_side = EMBED_LIMIT // 2
    ri = np.sort(rng.permutation(len(r))[:per_side])
    si = np.sort(rng.permutation(len(s))[:per_side])
    feats = {"mean": (r[ri].mean(axis=1), s[si].mean(axis=1))}
    if f >= 2:
        feats["cc"] = (cc_matrix(r[ri])[0], cc_matrix(s[si])[0])
    coords = {}
    for name, (fr, fs) in feats.items():
        z = embed_fn(np.concatenate([fr, fs]), seed)
        coords[name] = (z[:len(fr)], z[len(fr):])
        rows = [(x, y, "real") for x, y in z[:len(fr)]] + [(x, y, "syn") for x, y in z[len(fr):]]
        _write_csv(out(f"embedding_{name}.csv"), ["x", "y", "source"], rows)

    meta = {
        "bins": bins,
        "embedding": embedding if isinstance(embedding, str) else getattr(embed_fn, "__name__", "custom"),
        "embedding_limit": EMBED_LIMIT,
        "perplexity": 30.0,
        "seed": seed,
        "n_real": int(len(r)),
        "n_syn": int(len(s)),
    }
    with open(out("plots_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if images:
        _render(outdir, cc_tables, value_tables, coords, out)
    return written


def _render(outdir, cc_tables, value_tables, coords, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def hist_grid(tables, title, fname):
        n = len(tables)
        cols = min(n, 5)
        rows = -(-n // cols)
        fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.4 * rows), squeeze=False)
        for ax, (key, tab) in zip(axes.ravel(), tables.items()):
            tab = np.asarray(tab, dtype=np.float64)
            centers = (tab[:, 0] + tab[:, 1]) / 2
            width = tab[0, 1] - tab[0, 0]
            ax.bar(centers, tab[:, 2], width=width, alpha=0.5, color="tab:red", label="real")
            ax.bar(centers, tab[:, 3], width=width, alpha=0.5, color="tab:blue", label="synthetic")
            ax.set_title(str(key), fontsize=8)
        for ax in axes.ravel()[n:]:
            ax.axis("off")
        axes[0, 0].legend(fontsize=7)
        fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(out(fname), dpi=80)
        plt.close(fig)

    if cc_tables:
        hist_grid(cc_tables, "cross-correlation histograms", "cc_hist.png")
    hist_grid(value_tables, "value distributions", "value_density.png")
    for name, (zr, zs) in coords.items():
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(zr[:, 0], zr[:, 1], s=4, c="tab:red", alpha=0.5, label="real")
        ax.scatter(zs[:, 0], zs[:, 1], s=4, c="tab:blue", alpha=0.5, label="synthetic")
        ax.legend(fontsize=7)
        ax.set_title(f"embedding of per-sample {name} features")
        fig.tight_layout()
        fig.savefig(out(f"embedding_{name}.png"), dpi=80)
        plt.close(fig)
