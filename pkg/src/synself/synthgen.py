"""Synthetic phantom volumes with per-supervoxel latent classes.

Supervoxel territories are disjoint cells of a jittered grid partition, each
assigned one class; every synapse site renders that class's morphology (core
sphere, rim shell, dark bar), so same-supervoxel synapses share a class by
construction and class is recoverable from local appearance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .volume_io import (
    IntensityVolume,
    SegmentationVolume,
    SynapseRecord,
    VolumeFormatError,
    VolumeHeader,
    _atomic_write,
    write_synapse_table,
    write_volume,
)

BAR_INTENSITY = 12.0
BAR_PERP_RADIUS_VOX = 1.0
MIN_CELL_SPAN = 4
PLACEMENT_ATTEMPTS_PER_SITE = 200
PLACEMENT_RESTARTS = 20


class GenerationError(ValueError):
    """Invalid generator config or infeasible synapse placement."""


@dataclass(frozen=True)
class ClassParams:
    blob_radius_vox: float
    rim_thickness_vox: float
    bar_half_length_vox: float
    core_intensity: float
    rim_intensity: float

    def __post_init__(self):
        if self.blob_radius_vox <= 0 or self.rim_thickness_vox <= 0 or self.bar_half_length_vox <= 0:
            raise GenerationError(f"class morphology extents must be > 0: {self}")
        for v in (self.core_intensity, self.rim_intensity):
            if not 0 <= v <= 255:
                raise GenerationError(f"intensities must lie in [0,255]: {self}")

    @property
    def extent_vox(self) -> float:
        return max(self.blob_radius_vox + self.rim_thickness_vox,
                   self.bar_half_length_vox + BAR_PERP_RADIUS_VOX)


# Default three-class morphology set: roughly matched integrated intensity so
# classes differ by structure more than by raw patch brightness.
DEFAULT_CLASS_PARAMS = (
    ClassParams(2.0, 1.5, 3.0, 220.0, 110.0),
    ClassParams(3.0, 1.5, 4.0, 130.0, 75.0),
    ClassParams(4.0, 1.5, 5.0, 90.0, 55.0),
)


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (180, 144, 108)
    n_supervoxels: int = 60
    synapses_per_supervoxel: int = 8
    n_classes: int = 3
    noise_sigma: float = 10.0
    class_params: tuple[ClassParams, ...] = DEFAULT_CLASS_PARAMS
    background_intensity: float = 40.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "class_params", tuple(self.class_params))
        if self.n_classes < 1:
            raise GenerationError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.n_supervoxels < self.n_classes:
            raise GenerationError(
                f"n_supervoxels {self.n_supervoxels} must be >= n_classes {self.n_classes}"
            )
        if self.synapses_per_supervoxel < 1:
            raise GenerationError("synapses_per_supervoxel must be >= 1")
        if len(self.class_params) != self.n_classes:
            raise GenerationError(
                f"{len(self.class_params)} class_params for n_classes={self.n_classes}"
            )
        if self.noise_sigma < 0:
            raise GenerationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.background_intensity <= 255:
            raise GenerationError("background_intensity must lie in [0,255]")

    @property
    def max_blob_radius(self) -> float:
        return max(p.blob_radius_vox for p in self.class_params)


@dataclass
class Phantom:
    intensity: IntensityVolume
    segmentation: SegmentationVolume
    synapses: list[SynapseRecord]
    class_of_supervoxel: dict[int, int]
    merged_from: dict[int, int] = field(default_factory=dict)  # absorbed id -> surviving id


def _factor_triples(v: int):
    for a in range(1, v + 1):
        if v % a:
            continue
        for b in range(1, v // a + 1):
            if (v // a) % b:
                continue
            yield a, b, (v // a) // b


def grid_shape(n_cells: int, dims: tuple[int, int, int]) -> tuple[int, int, int]:
    """Factor n_cells into (gx,gy,gz) giving the most cube-like cells for dims."""
    best, best_score = None, None
    for g in _factor_triples(n_cells):
        spans = [d / gi for d, gi in zip(dims, g)]
        if min(d // gi for d, gi in zip(dims, g)) < MIN_CELL_SPAN:
            continue
        score = max(spans) / min(spans)
        if best_score is None or score < best_score or (score == best_score and g < best):
            best, best_score = g, score
    if best is None:
        raise GenerationError(
            f"cannot partition dims {dims} into {n_cells} cells of span >= {MIN_CELL_SPAN}"
        )
    return best


def _jittered_cuts(n: int, g: int, rng: np.random.Generator) -> np.ndarray:
    cuts = np.array([round(i * n / g) for i in range(g + 1)], dtype=np.int64)
    j = (n // g) // 6
    if j > 0 and g > 1:
        cuts[1:-1] += rng.integers(-j, j + 1, size=g - 1)
    for i in range(1, g + 1):  # re-impose monotonicity with minimum span
        cuts[i] = max(cuts[i], cuts[i - 1] + MIN_CELL_SPAN)
    cuts[g] = n
    for i in range(g - 1, 0, -1):
        cuts[i] = min(cuts[i], cuts[i + 1] - MIN_CELL_SPAN)
    if cuts[0] != 0 or np.any(np.diff(cuts) < MIN_CELL_SPAN):
        raise GenerationError(f"axis of {n} voxels cannot hold {g} cells of span >= {MIN_CELL_SPAN}")
    return cuts


def _place_sites(lo, hi, margin, n_sites, min_sep, rng, sv_label):
    """Rejection-sample n_sites integer positions in the cell interior."""
    los = [l + margin for l in lo]
    his = [h - margin for h in hi]  # exclusive
    if any(a >= b for a, b in zip(los, his)):
        raise GenerationError(
            f"supervoxel {sv_label}: cell {lo}..{hi} too small for morphology margin {margin}"
        )
    min_sep2 = min_sep * min_sep
    for _ in range(PLACEMENT_RESTARTS):
        sites: list[tuple[int, int, int]] = []
        attempts = 0
        while len(sites) < n_sites and attempts < PLACEMENT_ATTEMPTS_PER_SITE * n_sites:
            attempts += 1
            cand = tuple(int(rng.integers(a, b)) for a, b in zip(los, his))
            if all(sum((c - s) ** 2 for c, s in zip(cand, st)) >= min_sep2 for st in sites):
                sites.append(cand)
        if len(sites) == n_sites:
            return sites
    raise GenerationError(
        f"supervoxel {sv_label}: placement infeasible after "
        f"{PLACEMENT_RESTARTS}x{PLACEMENT_ATTEMPTS_PER_SITE * n_sites} rejection-sampling attempts"
    )


def _render_site(canvas: np.ndarray, center, params: ClassParams, bar_axis: int) -> None:
    nx = canvas.shape[2]
    ny = canvas.shape[1]
    nz = canvas.shape[0]
    cx, cy, cz = center
    r = params.blob_radius_vox
    shell = r + params.rim_thickness_vox
    box = int(math.ceil(params.extent_vox)) + 1
    x0, x1 = max(cx - box, 0), min(cx + box + 1, nx)
    y0, y1 = max(cy - box, 0), min(cy + box + 1, ny)
    z0, z1 = max(cz - box, 0), min(cz + box + 1, nz)
    dz, dy, dx = np.ogrid[z0 - cz:z1 - cz, y0 - cy:y1 - cy, x0 - cx:x1 - cx]
    d2 = dx * dx + dy * dy + dz * dz
    sub = canvas[z0:z1, y0:y1, x0:x1]
    # order matters: the bar crosses the rim but the core caps the center,
    # so the synapse-center voxel always reads core_intensity
    sub[(d2 > r * r) & (d2 <= shell * shell)] = params.rim_intensity
    along = (dx, dy, dz)[bar_axis]
    perp2 = d2 - along * along
    bar = (np.abs(along) <= params.bar_half_length_vox) & (
        perp2 <= BAR_PERP_RADIUS_VOX * BAR_PERP_RADIUS_VOX
    )
    sub[np.broadcast_to(bar, sub.shape)] = BAR_INTENSITY
    sub[d2 <= r * r] = params.core_intensity


def generate(cfg: GenConfig) -> Phantom:
    """Deterministically build a phantom from the config; Dale holds by construction."""
    rng = np.random.default_rng(cfg.seed)
    nx, ny, nz = cfg.dims
    gx, gy, gz = grid_shape(cfg.n_supervoxels, cfg.dims)
    cuts_x = _jittered_cuts(nx, gx, rng)
    cuts_y = _jittered_cuts(ny, gy, rng)
    cuts_z = _jittered_cuts(nz, gz, rng)

    seg = np.zeros((nz, ny, nx), dtype=np.uint64)
    cells = {}  # label -> (lo_xyz, hi_xyz)
    for iz in range(gz):
        for iy in range(gy):
            for ix in range(gx):
                label = 1 + ix + gx * (iy + gy * iz)
                lo = (cuts_x[ix], cuts_y[iy], cuts_z[iz])
                hi = (cuts_x[ix + 1], cuts_y[iy + 1], cuts_z[iz + 1])
                cells[label] = (lo, hi)
                seg[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]] = label

    classes = np.array([1 + (i % cfg.n_classes) for i in range(cfg.n_supervoxels)])
    rng.shuffle(classes)
    class_of_supervoxel = {label: int(classes[label - 1]) for label in range(1, cfg.n_supervoxels + 1)}

    min_sep = 2.0 * cfg.max_blob_radius
    canvas = np.full((nz, ny, nx), float(cfg.background_intensity))
    records = []
    next_id = 0
    for label in range(1, cfg.n_supervoxels + 1):
        params = cfg.class_params[class_of_supervoxel[label] - 1]
        margin = int(math.ceil(params.extent_vox)) + 1
        lo, hi = cells[label]
        sites = _place_sites(lo, hi, margin, cfg.synapses_per_supervoxel, min_sep, rng, label)
        for site in sites:
            bar_axis = int(rng.integers(3))
            _render_site(canvas, site, params, bar_axis)
            records.append(
                SynapseRecord(next_id, site, label, class_of_supervoxel[label])
            )
            next_id += 1

    if cfg.noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, cfg.noise_sigma, size=canvas.shape)
    voxels = np.rint(np.clip(canvas, 0.0, 255.0)).astype(np.uint8)

    header_u8 = VolumeHeader(cfg.dims, "u8")
    header_u64 = VolumeHeader(cfg.dims, "u64")
    return Phantom(
        IntensityVolume(header_u8, voxels),
        SegmentationVolume(header_u64, seg),
        records,
        class_of_supervoxel,
    )


def validate_phantom(ph: Phantom) -> None:
    """Check the Dale invariant and synapse/segmentation consistency."""
    for rec in ph.synapses:
        want = ph.class_of_supervoxel.get(rec.supervoxel_id)
        if rec.class_label != want:
            raise GenerationError(
                f"synapse {rec.id}: class {rec.class_label} != supervoxel {rec.supervoxel_id} class {want}"
            )
        x, y, z = rec.pos
        got = int(ph.segmentation.voxels[z, y, x])
        if got != rec.supervoxel_id:
            raise GenerationError(
                f"synapse {rec.id} at {rec.pos}: segmentation says {got}, record says {rec.supervoxel_id}"
            )


def inject_false_merge(ph: Phantom, sv_a: int, sv_b: int):
    """Relabel sv_b into sv_a, keeping class labels; returns the Dale-violating phantom.

    Returns (merged phantom, surviving supervoxel id, ground-truth boundary
    midpoint = midpoint of the closest cross-fragment synapse pair, in voxel
    coordinates).
    """
    known = set(ph.class_of_supervoxel)
    for sv in (sv_a, sv_b):
        if sv not in known:
            raise GenerationError(f"unknown supervoxel id {sv}")
    if sv_a == sv_b:
        raise GenerationError(f"cannot merge supervoxel {sv_a} with itself")
    if ph.class_of_supervoxel[sv_a] == ph.class_of_supervoxel[sv_b]:
        raise GenerationError(
            f"supervoxels {sv_a} and {sv_b} share class {ph.class_of_supervoxel[sv_a]}; "
            "a same-class merge is undetectable and rejected"
        )

    a_pos = [r.pos for r in ph.synapses if r.supervoxel_id == sv_a]
    b_pos = [r.pos for r in ph.synapses if r.supervoxel_id == sv_b]
    if not a_pos or not b_pos:
        raise GenerationError(f"supervoxels {sv_a}/{sv_b} must both carry synapses")
    sx, sy, sz = ph.intensity.header.voxel_size_nm
    best = None
    for pa in a_pos:
        for pb in b_pos:
            d2 = (((pa[0] - pb[0]) * sx) ** 2 + ((pa[1] - pb[1]) * sy) ** 2
                  + ((pa[2] - pb[2]) * sz) ** 2)
            if best is None or d2 < best[0]:
                best = (d2, pa, pb)
    _, pa, pb = best
    midpoint = tuple((ca + cb) / 2.0 for ca, cb in zip(pa, pb))

    seg = ph.segmentation.voxels.copy()
    seg[seg == np.uint64(sv_b)] = np.uint64(sv_a)
    records = [
        SynapseRecord(r.id, r.pos, sv_a if r.supervoxel_id == sv_b else r.supervoxel_id, r.class_label)
        for r in ph.synapses
    ]
    class_map = {k: v for k, v in ph.class_of_supervoxel.items() if k != sv_b}
    merged_from = dict(ph.merged_from)
    merged_from[sv_b] = sv_a
    merged = Phantom(
        ph.intensity,
        SegmentationVolume(ph.segmentation.header, seg),
        records,
        class_map,
        merged_from,
    )
    return merged, sv_a, midpoint


# ---------------------------------------------------------------------------
# on-disk layout


def write_classes(class_of_supervoxel: dict[int, int], path) -> None:
    def body(f):
        import io

        text = io.TextIOWrapper(f, encoding="utf-8", newline="")
        w = csv.writer(text, lineterminator="\n")
        w.writerow(["supervoxel_id", "class"])
        for sv in sorted(class_of_supervoxel):
            w.writerow([sv, class_of_supervoxel[sv]])
        text.flush()
        text.detach()

    _atomic_write(path, body)


def read_classes(path) -> dict[int, int]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["supervoxel_id", "class"]:
            raise VolumeFormatError(f"{path}: bad classes header {header}")
        out = {}
        for row_i, row in enumerate(reader):
            if len(row) != 2:
                raise VolumeFormatError(f"{path}: row {row_i} has {len(row)} fields, expected 2")
            try:
                out[int(row[0])] = int(row[1])
            except ValueError:
                raise VolumeFormatError(f"{path}: non-integer entry at row {row_i}") from None
    return out


def save_phantom(ph: Phantom, out_dir) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    write_volume(ph.intensity, os.path.join(out_dir, "intensity.vol"))
    write_volume(ph.segmentation, os.path.join(out_dir, "segmentation.vol"))
    write_synapse_table(ph.synapses, os.path.join(out_dir, "synapses.csv"))
    write_classes(ph.class_of_supervoxel, os.path.join(out_dir, "classes.csv"))
