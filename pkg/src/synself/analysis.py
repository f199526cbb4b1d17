"""Embedding extraction and quantitative structure analysis.

Embeds every synapse with the trained encoder (penultimate h by default),
projects to 2D with deflated power-iteration PCA, clusters with k-means, and
scores agreement against labels (NMI/ARI) and supervoxel concordance. All
routines are deterministic: seeded k-means with fixed tie rules, fixed-start
power iteration, and a stable SVG emitter.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import sampler as sp
from .volume_io import EmbeddingMatrix, IntensityVolume, SynapseRecord

POWER_TOL = 1e-12
POWER_MAX_ITER = 10_000
KMEANS_MAX_ITER = 300
CONCORDANCE_SAMPLE = 10_000


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# embedding extraction


def embed_all(
    checkpoint_path,
    volume: IntensityVolume,
    synapses: list[SynapseRecord],
    patch_side: int,
    layer: str = "h",
    threads: int = 1,
) -> EmbeddingMatrix:
    """One embedding row per synapse, in table order, without augmentation."""
    params, cfg = enc.load(checkpoint_path)
    return embed_with_params(params, cfg, volume, synapses, patch_side, layer, threads)


def embed_with_params(
    params,
    cfg: enc.EncoderConfig,
    volume: IntensityVolume,
    synapses: list[SynapseRecord],
    patch_side: int | None = None,
    layer: str = "h",
    threads: int = 1,
) -> EmbeddingMatrix:
    if patch_side is not None and patch_side != cfg.patch_side:
        raise AnalysisError(
            f"requested patch_side {patch_side} != checkpoint patch_side {cfg.patch_side}"
        )
    if layer not in ("h", "z"):
        raise AnalysisError(f"layer must be 'h' or 'z', got {layer!r}")
    if not synapses:
        raise AnalysisError("no synapses to embed")
    side = cfg.patch_side

    def one(rec: SynapseRecord) -> np.ndarray:
        patch = sp.extract_patch(volume, rec.pos, side)
        h, z, _ = enc.forward(params, patch[None, :, :, :], cfg)
        return h if layer == "h" else z

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, synapses))
    else:
        rows = [one(rec) for rec in synapses]
    kind = "penultimate" if layer == "h" else "projected"
    return EmbeddingMatrix([r.id for r in synapses], np.stack(rows), kind)


# ---------------------------------------------------------------------------
# PCA via deflated power iteration


@dataclass
class PCAResult:
    coords: np.ndarray  # (M, out_dim)
    components: np.ndarray  # (out_dim, D) orthonormal rows
    explained_variance: np.ndarray  # fractions of total variance, non-increasing
    n_positive: int  # how many requested components had positive eigenvalues


def _power_start(dim: int, component: int) -> np.ndarray:
    v = np.random.default_rng(1000 + component).normal(size=dim)
    return v / np.linalg.norm(v)


def pca_project(emb: EmbeddingMatrix, out_dim: int = 2) -> PCAResult:
    x = emb.values
    m, d = x.shape
    if m <= out_dim:
        raise AnalysisError(f"need more rows ({m}) than components ({out_dim})")
    centered = x - x.mean(axis=0)
    cov = (centered.T @ centered) / (m - 1)
    total_var = float(np.trace(cov))
    components = np.zeros((out_dim, d))
    eigenvalues = np.zeros(out_dim)
    n_positive = 0
    work = cov.copy()
    for ci in range(out_dim):
        v = _power_start(d, ci)
        lam = 0.0
        for _ in range(POWER_MAX_ITER):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm < POWER_TOL:
                break
            w /= norm
            if np.linalg.norm(w - v) < POWER_TOL:
                v = w
                break
            v = w
        lam = float(v @ work @ v)
        if lam <= max(POWER_TOL * max(total_var, 1.0), 0.0):
            break  # rank deficient: remaining components stay zero
        peak = np.argmax(np.abs(v))
        if v[peak] < 0:
            v = -v
        components[ci] = v
        eigenvalues[ci] = lam
        n_positive += 1
        work = work - lam * np.outer(v, v)
    coords = centered @ components.T
    fractions = eigenvalues / total_var if total_var > 0 else eigenvalues
    return PCAResult(coords, components, fractions, n_positive)


# ---------------------------------------------------------------------------
# k-means with k-means++ seeding


@dataclass
class KMeansResult:
    labels: np.ndarray  # (M,) cluster index per row
    inertia: float
    centroids: np.ndarray  # (k, D)
    inertia_history: list[float]  # winning init, one value per Lloyd iteration


def _kmeans_pp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(m))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for ci in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            idx = int(rng.choice(m, p=probs))
        else:
            idx = int(rng.integers(m))
        centers[ci] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[ci]) ** 2, axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float]:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)  # ties -> lowest centroid index
    return labels, float(d2[np.arange(x.shape[0]), labels].sum())


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_init: int = 10) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise AnalysisError(f"kmeans expects (M,D) data, got shape {x.shape}")
    m = x.shape[0]
    if k < 1 or k > m:
        raise AnalysisError(f"k must lie in [1, {m}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp_centers(x, k, rng)
        labels, inertia = _assign(x, centers)
        history = [inertia]
        for _ in range(KMEANS_MAX_ITER):
            for ci in range(k):  # empty clusters keep their previous centroid
                member = labels == ci
                if member.any():
                    centers[ci] = x[member].mean(axis=0)
            new_labels, inertia = _assign(x, centers)
            history.append(inertia)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        if best is None or history[-1] < best.inertia:
            best = KMeansResult(labels.copy(), history[-1], centers.copy(), history)
    return best


# ---------------------------------------------------------------------------
# label agreement metrics


def _contingency(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise AnalysisError(f"labelings must be equal-length vectors, got {a.shape} vs {b.shape}")
    if a.size == 0:
        raise AnalysisError("empty labelings")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Normalized mutual information, arithmetic-mean normalization, natural logs.

    MI is computed as H(a) + H(b) - H(a,b) from one entropy routine, which
    makes the identical-labeling case exactly 1.
    """
    table = _contingency(a, b)
    ha = _entropy(table.sum(axis=1))
    hb = _entropy(table.sum(axis=0))
    hab = _entropy(table.reshape(-1))
    mi = ha + hb - hab
    denom = (ha + hb) / 2.0
    if denom <= 0.0 or mi <= 0.0:
        return 0.0
    return min(mi / denom, 1.0)


def ari(a, b) -> float:
    """Adjusted Rand index by the standard pair-counting formula."""
    table = _contingency(a, b)
    n = int(table.sum())

    def comb2(v):
        return v * (v - 1) / 2.0

    sum_ij = float(comb2(table.astype(np.float64)).sum())
    sum_a = float(comb2(table.sum(axis=1).astype(np.float64)).sum())
    sum_b = float(comb2(table.sum(axis=0).astype(np.float64)).sum())
    total = comb2(float(n))
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:  # both partitions trivial: identical by construction
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


# ---------------------------------------------------------------------------
# supervoxel concordance


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    # sqrt of the product keeps cos(u, u) == 1 exactly
    denom = max(float(np.sqrt((u @ u) * (v @ v))), 1e-300)
    return float(u @ v) / denom


def concordance(
    emb: EmbeddingMatrix,
    synapses: list[SynapseRecord],
    sample: int = CONCORDANCE_SAMPLE,
    seed: int = 0,
) -> tuple[float, float]:
    """(intra, inter): mean cosine within supervoxels vs across supervoxels.

    Intra enumerates every within-supervoxel pair; inter uses a seeded sample
    of `sample` cross-supervoxel pairs (all of them when fewer exist).
    """
    by_id = {rec.id: rec.supervoxel_id for rec in synapses}
    try:
        sv = np.array([by_id[i] for i in emb.synapse_ids])
    except KeyError as e:
        raise AnalysisError(f"embedding id {e.args[0]} missing from synapse table") from None
    x = emb.values
    m = x.shape[0]
    intra_vals = []
    for label in np.unique(sv):
        rows = np.nonzero(sv == label)[0]
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                intra_vals.append(_cosine(x[rows[i]], x[rows[j]]))
    if not intra_vals:
        raise AnalysisError("no supervoxel has two embedded synapses; intra undefined")

    cross_total = m * (m - 1) // 2 - len(intra_vals)
    if cross_total == 0:
        raise AnalysisError("no cross-supervoxel pairs; inter undefined")
    inter_vals = []
    if cross_total <= sample:
        for i in range(m):
            for j in range(i + 1, m):
                if sv[i] != sv[j]:
                    inter_vals.append(_cosine(x[i], x[j]))
    else:
        rng = np.random.default_rng(seed)
        while len(inter_vals) < sample:
            i, j = rng.integers(m, size=2)
            if i != j and sv[i] != sv[j]:
                inter_vals.append(_cosine(x[i], x[j]))
    return float(np.mean(intra_vals)), float(np.mean(inter_vals))


# ---------------------------------------------------------------------------
# scatter figure

PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
    "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1170aa", "#a3acb9",
)

SVG_SIZE = (640, 480)
SVG_MARGIN_FRAC = 0.05
POINT_RADIUS = 3.0


def emit_scatter(coords: np.ndarray, labels, path) -> None:
    """Deterministic standalone SVG: one circle per point, legend per label."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise AnalysisError(f"coords must be (M,2), got {coords.shape}")
    labels = ["?" if v is None else str(v) for v in labels]
    if len(labels) != coords.shape[0]:
        raise AnalysisError(f"{len(labels)} labels for {coords.shape[0]} points")
    uniq = sorted(set(labels))
    color = {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(uniq)}

    width, height = SVG_SIZE
    plot_w = width - 120  # room for the legend column
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo = lo - SVG_MARGIN_FRAC * span
    hi = hi + SVG_MARGIN_FRAC * span
    span = hi - lo

    def sx(v):
        return (v - lo[0]) / span[0] * plot_w

    def sy(v):
        return height - (v - lo[1]) / span[1] * height  # svg y grows downward

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for (px, py), lab in zip(coords, labels):
        parts.append(
            f'<circle cx="{sx(px):.3f}" cy="{sy(py):.3f}" r="{POINT_RADIUS}" '
            f'fill="{color[lab]}" fill-opacity="0.8"/>'
        )
    for i, lab in enumerate(uniq):
        ly = 20 + 18 * i
        parts.append(
            f'<g class="legend"><circle cx="{plot_w + 16}" cy="{ly}" r="5" fill="{color[lab]}"/>'
            f'<text x="{plot_w + 28}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="12">{lab}</text></g>'
        )
    parts.append("</svg>")

    from .volume_io import _atomic_write

    _atomic_write(path, lambda f: f.write("\n".join(parts).encode("utf-8")))
