"""Synapse-centered patch extraction, augmentation, and positive-pair batches.

Positive pairs come from one supervoxel; every batch draws its supervoxels
without replacement, so cross-pair negatives are always cross-neuron
comparisons. Patches are float64 cubes scaled to [0,1]; shift and noise
amplitudes in :class:`AugmentConfig` are in raw u8 intensity units and are
divided by 255 when applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .volume_io import IntensityVolume, SegmentationVolume, SynapseRecord


class SamplingError(ValueError):
    """Batch cannot be assembled under the configured eligibility rules."""


@dataclass(frozen=True)
class AugmentConfig:
    use_octahedral: bool = True
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: tuple[float, float] = (-10.0, 10.0)  # u8 intensity units
    noise_sigma: float = 5.0  # u8 intensity units
    max_jitter_vox: int = 1

    def __post_init__(self):
        if self.intensity_scale_range[0] > self.intensity_scale_range[1]:
            raise ValueError(f"scale range lo > hi: {self.intensity_scale_range}")
        if self.intensity_shift_range[0] > self.intensity_shift_range[1]:
            raise ValueError(f"shift range lo > hi: {self.intensity_shift_range}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.max_jitter_vox < 0:
            raise ValueError(f"max_jitter_vox must be >= 0, got {self.max_jitter_vox}")


IDENTITY_AUGMENT = AugmentConfig(False, (1.0, 1.0), (0.0, 0.0), 0.0, 0)

PAIR_MODES = ("distinct_synapses", "augment_same")


@dataclass(frozen=True)
class SamplerConfig:
    patch_side: int = 16  # 80 reproduces the full-scale receptive field
    pair_mode: str = "distinct_synapses"
    max_pair_dist_nm: float | None = None
    batch_pairs: int = 16
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.patch_side < 4:
            raise ValueError(f"patch_side must be >= 4, got {self.patch_side}")
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"pair_mode must be one of {PAIR_MODES}, got {self.pair_mode!r}")
        if self.batch_pairs < 2:
            raise ValueError(f"batch_pairs must be >= 2, got {self.batch_pairs}")
        if self.max_pair_dist_nm is not None and not self.max_pair_dist_nm > 0:
            raise ValueError(f"max_pair_dist_nm must be > 0, got {self.max_pair_dist_nm}")


@dataclass
class PairBatch:
    views_a: np.ndarray  # (N, s, s, s) float64 in [0,1]
    views_b: np.ndarray
    supervoxel_ids: np.ndarray  # (N,) pairwise distinct


@dataclass
class Dataset:
    """Minimal sampling source: an intensity volume plus its synapse table."""

    intensity: IntensityVolume
    synapses: list[SynapseRecord]
    segmentation: SegmentationVolume | None = None


# ---------------------------------------------------------------------------
# patch extraction


def extract_patch(vol: IntensityVolume, center: tuple[int, int, int], side: int) -> np.ndarray:
    """Centered cube of the volume, scaled by 1/255; out-of-bounds voxels are 0.

    Patch axes are (z, y, x); for even sides the center voxel sits at index
    side//2 on each axis.
    """
    nz, ny, nx = vol.voxels.shape
    cx, cy, cz = (int(c) for c in center)
    half = side // 2
    patch = np.zeros((side, side, side))
    lo = (cz - half, cy - half, cx - half)
    src = []
    dst = []
    for axis, (l, n) in enumerate(zip(lo, (nz, ny, nx))):
        s0, s1 = max(l, 0), min(l + side, n)
        if s0 >= s1:
            return patch
        src.append(slice(s0, s1))
        dst.append(slice(s0 - l, s1 - l))
    patch[tuple(dst)] = vol.voxels[tuple(src)] / 255.0
    return patch


# ---------------------------------------------------------------------------
# octahedral symmetry group (48 axis permutations x axis flips)

OCTAHEDRAL_GROUP: list[tuple[tuple[int, int, int], tuple[bool, bool, bool]]] = [
    (perm, flips)
    for perm in permutations((0, 1, 2))
    for flips in ((a, b, c) for a in (False, True) for b in (False, True) for c in (False, True))
]


def apply_octahedral(patch: np.ndarray, element: int) -> np.ndarray:
    perm, flips = OCTAHEDRAL_GROUP[element]
    out = np.transpose(patch, perm)
    axes = tuple(i for i, f in enumerate(flips) if f)
    if axes:
        out = np.flip(out, axis=axes)
    return np.ascontiguousarray(out)


def _octahedral_inverse_table() -> list[int]:
    probe = np.arange(27.0).reshape(3, 3, 3)
    table = []
    for g in range(len(OCTAHEDRAL_GROUP)):
        fwd = apply_octahedral(probe, g)
        inv = next(
            h for h in range(len(OCTAHEDRAL_GROUP))
            if np.array_equal(apply_octahedral(fwd, h), probe)
        )
        table.append(inv)
    return table


OCTAHEDRAL_INVERSE = _octahedral_inverse_table()


def augment(patch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Octahedral symmetry, then x*a+b, then Gaussian noise, then clamp to [0,1].

    Translation jitter is applied upstream by shifting the extraction center.
    """
    if patch.ndim != 3 or len(set(patch.shape)) != 1:
        raise ValueError(f"augment expects a cubic patch, got shape {patch.shape}")
    out = patch
    if cfg.use_octahedral:
        out = apply_octahedral(out, int(rng.integers(len(OCTAHEDRAL_GROUP))))
    scale = float(rng.uniform(*cfg.intensity_scale_range))
    shift = float(rng.uniform(*cfg.intensity_shift_range)) / 255.0
    out = out * scale + shift
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma / 255.0, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _jittered_center(pos, max_jitter, rng):
    if max_jitter <= 0:
        return pos
    off = rng.integers(-max_jitter, max_jitter + 1, size=3)
    return (pos[0] + int(off[0]), pos[1] + int(off[1]), pos[2] + int(off[2]))


# ---------------------------------------------------------------------------
# batch assembly


def _pair_dist_nm(a: SynapseRecord, b: SynapseRecord, voxel_size) -> float:
    return float(
        np.sqrt(sum(((pa - pb) * s) ** 2 for pa, pb, s in zip(a.pos, b.pos, voxel_size)))
    )


def eligible_supervoxels(dataset, cfg: SamplerConfig) -> dict[int, list]:
    """Map supervoxel id -> candidate positive pairs (or singleton views).

    In "distinct_synapses" mode the candidates are synapse pairs within the
    optional nanometer cap; in "augment_same" mode they are single synapses.
    """
    by_sv: dict[int, list[SynapseRecord]] = {}
    for rec in dataset.synapses:
        by_sv.setdefault(rec.supervoxel_id, []).append(rec)
    voxel_size = dataset.intensity.header.voxel_size_nm
    out: dict[int, list] = {}
    for sv in sorted(by_sv):
        recs = by_sv[sv]
        if cfg.pair_mode == "augment_same":
            out[sv] = [(r, r) for r in recs]
            continue
        pairs = [
            (a, b)
            for i, a in enumerate(recs)
            for b in recs[i + 1:]
            if cfg.max_pair_dist_nm is None
            or _pair_dist_nm(a, b, voxel_size) <= cfg.max_pair_dist_nm
        ]
        if pairs:
            out[sv] = pairs
    return out


def sample_batch(dataset, cfg: SamplerConfig, rng: np.random.Generator) -> PairBatch:
    """Draw batch_pairs supervoxels without replacement and one positive pair each."""
    eligible = eligible_supervoxels(dataset, cfg)
    n = cfg.batch_pairs
    if len(eligible) < n:
        raise SamplingError(
            f"need {n} eligible supervoxels, found {len(eligible)} "
            f"(mode={cfg.pair_mode}, max_pair_dist_nm={cfg.max_pair_dist_nm})"
        )
    sv_ids = sorted(eligible)
    chosen = rng.choice(len(sv_ids), size=n, replace=False)
    s = cfg.patch_side
    views_a = np.empty((n, s, s, s))
    views_b = np.empty((n, s, s, s))
    out_ids = np.empty(n, dtype=np.int64)
    for row, idx in enumerate(chosen):
        sv = sv_ids[int(idx)]
        pairs = eligible[sv]
        rec_a, rec_b = pairs[int(rng.integers(len(pairs)))]
        for rec, dest in ((rec_a, views_a), (rec_b, views_b)):
            center = _jittered_center(rec.pos, cfg.augment.max_jitter_vox, rng)
            patch = extract_patch(dataset.intensity, center, s)
            dest[row] = augment(patch, cfg.augment, rng)
        out_ids[row] = sv
    return PairBatch(views_a, views_b, out_ids)


def worker_rng(seed: int, worker_index: int) -> np.random.Generator:
    """Stream-splitting rule for parallel samplers: seed XOR worker_index."""
    return np.random.default_rng(seed ^ worker_index)
