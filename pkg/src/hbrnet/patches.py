"""Patch extraction, labeling, and augmentation on corrected volumes.

Patches are (3, 6, S, S) windows: three adjacent slices of all six
channels, centered on a stride grid inside the dilated prostate mask.
Training patches carry a voxel-count label; windows on cancerous
patients whose cancer coverage falls below the label threshold are
excluded from training but still scored at inference.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream
from .volume_io import CHANNELS, BiomarkerVolume, dilate_mask, read_volume, write_volume

__all__ = [
    "AugmentConfig",
    "PatchConfig",
    "PatchTensor",
    "PatchDataset",
    "dilate_mask",
    "extract_patches",
    "label_patch",
    "hist_eq",
    "augment_patch",
    "build_dataset",
    "save_patches",
    "load_patches",
]

_V_EP = CHANNELS.index("v_ep")
_V_LU = CHANNELS.index("v_lu")


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    presets: tuple = ((0.10, 0.90), (0.15, 0.85), (0.20, 0.80))

    def __post_init__(self) -> None:
        for name in ("p_hflip", "p_vflip", "p_rot90"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for pair in self.presets:
            t_d, t_u = pair
            if not 0.0 <= t_d < t_u <= 1.0:
                raise ValueError(f"preset thresholds must satisfy 0 <= T_d < T_u <= 1, got {pair}")


@dataclass
class PatchConfig:
    patch_size: int = 11
    stride: int = 2
    label_threshold: float = 0.7
    dilate_radius: int = 2
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    max_per_patient: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError(f"patch size must be odd and >= 3, got {self.patch_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if not 0.0 < self.label_threshold <= 1.0:
            raise ValueError(f"label threshold must lie in (0, 1], got {self.label_threshold}")
        if self.dilate_radius < 0:
            raise ValueError(f"dilate radius must be nonnegative, got {self.dilate_radius}")
        if self.max_per_patient is not None and self.max_per_patient < 1:
            raise ValueError(f"per-patient cap must be positive, got {self.max_per_patient}")


@dataclass
class PatchTensor:
    """One (3, 6, S, S) window; label is None when undefined (window on a
    cancerous patient below the coverage threshold)."""

    data: np.ndarray
    label: int | None
    patient_id: str
    slice_index: int
    center: tuple

    def __post_init__(self) -> None:
        d = self.data
        if d.ndim != 4 or d.shape[:2] != (3, len(CHANNELS)) or d.shape[2] != d.shape[3]:
            raise ValueError(f"patch data must be (3, 6, S, S), got {d.shape}")
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0, 1, or None, got {self.label!r}")


def extract_patches(volume, mask: np.ndarray, patch_size: int = 11, stride: int = 2,
                    patient_id: str = "") -> list[PatchTensor]:
    """Unlabeled patches from one patient volume.

    Window origins run on the stride grid anchored at the mask bounding
    box origin; a patch is emitted iff the window fits inside the image
    and its center voxel is masked.  The neighbor slices N-1 and N+1 are
    replicated at the volume boundary.  Output is sorted by
    (slice, row, col).
    """
    data = volume.data if isinstance(volume, BiomarkerVolume) else np.asarray(volume)
    if data.ndim != 4 or data.shape[0] != len(CHANNELS):
        raise ValueError(f"expected a (6, Z, H, W) volume, got {data.shape}")
    s = patch_size
    if s < 3 or s % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 3, got {s}")
    mask = np.asarray(mask)
    if mask.shape != data.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match volume {data.shape[1:]}")
    _, z, h, w = data.shape
    if not mask.any() or h < s or w < s:
        return []
    rows_any = np.flatnonzero(mask.any(axis=(0, 2)))
    cols_any = np.flatnonzero(mask.any(axis=(0, 1)))
    half = s // 2
    row_centers = np.arange(rows_any[0], h - s + 1, stride) + half
    col_centers = np.arange(cols_any[0], w - s + 1, stride) + half
    if row_centers.size == 0 or col_centers.size == 0:
        return []
    out = []
    for zi in range(z):
        picked = mask[zi][np.ix_(row_centers, col_centers)] > 0
        if not picked.any():
            continue
        planes = [data[:, max(zi - 1, 0)], data[:, zi], data[:, min(zi + 1, z - 1)]]
        windows = np.stack([sliding_window_view(p, (s, s), axis=(1, 2)) for p in planes])
        ri, ci = np.nonzero(picked)
        for r, c in zip(row_centers[ri], col_centers[ci]):
            patch = np.ascontiguousarray(windows[:, :, r - half, c - half])
            out.append(PatchTensor(patch, None, patient_id, zi, (int(r), int(c))))
    return out


def label_patch(cancer_window: np.ndarray, threshold: float = 0.7, *,
                patient_has_cancer: bool) -> int | None:
    """Patch label from the center-slice cancer coverage.

    Cancer-free patients yield 0.  Cancerous patients yield 1 when at
    least ceil(threshold * S^2) voxels of the window are cancerous and
    None (excluded from training) otherwise.
    """
    window = np.asarray(cancer_window)
    if window.ndim != 2 or window.shape[0] != window.shape[1]:
        raise ValueError(f"label window must be square, got {window.shape}")
    count = int((window > 0).sum())
    if not patient_has_cancer:
        if count:
            raise ValueError("cancer voxels in a window of a cancer-free patient")
        return 0
    needed = int(np.ceil(threshold * window.size))
    return 1 if count >= needed else None


def hist_eq(x, t_d: float, t_u: float):
    """Piecewise channel equalization: values below t_d are scaled by 0.1,
    values at or above t_u saturate at 1, the band between maps linearly."""
    if not t_d < t_u:
        raise ValueError(f"thresholds must satisfy t_d < t_u, got ({t_d}, {t_u})")
    x = np.asarray(x)
    return np.where(x < t_d, 0.1 * x, np.where(x >= t_u, 1.0, (x - t_d) / (t_u - t_d)))


def _geometric(data: np.ndarray, flip_h: bool, flip_v: bool, rot: bool) -> np.ndarray:
    out = data
    if flip_h:
        out = out[..., ::-1]
    if flip_v:
        out = out[..., ::-1, :]
    if rot:
        out = np.rot90(out, axes=(-2, -1))
    return np.ascontiguousarray(out)


def _equalized(data: np.ndarray, t_d: float, t_u: float) -> np.ndarray:
    out = data.copy()
    v_ep = np.clip(data[:, _V_EP], 0.0, 1.0)
    v_lu = np.clip(data[:, _V_LU], 0.0, 1.0)
    out[:, _V_EP] = hist_eq(v_ep, t_d, t_u)
    out[:, _V_LU] = 1.0 - hist_eq(1.0 - v_lu, t_d, t_u)
    return out.astype(np.float32)


def augment_patch(data: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> list:
    """Additional training copies of one patch: one geometric transform
    (flips and quarter rotation drawn independently, applied identically
    to all planes) plus one equalized copy per threshold preset.  The
    volume-fraction channels are equalized; the luminal channel gets the
    complement transform so the pair stays comparable.  Labels are
    unchanged by every copy."""
    flips = rng.random(3)
    copies = [_geometric(data, flips[0] < config.p_hflip, flips[1] < config.p_vflip,
                         flips[2] < config.p_rot90)]
    for t_d, t_u in config.presets:
        copies.append(_equalized(data, t_d, t_u))
    return copies


@dataclass
class PatchDataset:
    """Materialized patch set: data (M, 3, 6, S, S) float32, labels int8
    with -1 marking unlabeled windows, plus per-patch provenance."""

    data: np.ndarray
    labels: np.ndarray
    patients: list
    slices: np.ndarray
    centers: np.ndarray
    manifest: dict

    def __len__(self) -> int:
        return self.data.shape[0]


def _checksum(data, labels, patients, slices, centers) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    h.update("|".join(patients).encode())
    h.update(np.ascontiguousarray(slices).tobytes())
    h.update(np.ascontiguousarray(centers).tobytes())
    return h.hexdigest()


def _config_dict(config: PatchConfig) -> dict:
    return {
        "patch_size": config.patch_size,
        "stride": config.stride,
        "label_threshold": config.label_threshold,
        "dilate_radius": config.dilate_radius,
        "max_per_patient": config.max_per_patient,
        "seed": config.seed,
        "augment": {
            "p_hflip": config.augment.p_hflip,
            "p_vflip": config.augment.p_vflip,
            "p_rot90": config.augment.p_rot90,
            "presets": [list(p) for p in config.augment.presets],
        },
    }


def _subsample(items: list, cap: int) -> list:
    if len(items) <= cap:
        return items
    idx = np.linspace(0, len(items) - 1, cap).round().astype(int)
    return [items[i] for i in idx]


def build_dataset(records, corrector, config: PatchConfig, split: str = "train") -> PatchDataset:
    """Patch dataset for a cohort split.

    Per patient: stage-1 correction (skipped when corrector is None),
    mask dilation, extraction, labeling; training additionally drops
    unlabeled windows, caps the per-patient count, and appends augmented
    copies.  Training sets without a single negative patch are rejected.
    """
    if split not in ("train", "eval"):
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    if not records:
        raise ValueError("empty cohort")
    s = config.patch_size
    half = s // 2
    rows = []
    for rec in records:
        if corrector is not None:
            corrected = corrector.correct_volume(rec.observed)
        else:
            corrected = rec.observed.data
        region = dilate_mask(rec.prostate_mask, config.dilate_radius)
        patches = extract_patches(corrected, region.values, s, config.stride, rec.patient_id)
        cancer = rec.cancer_mask.values
        labeled = []
        for p in patches:
            r, c = p.center
            window = cancer[p.slice_index, r - half : r + half + 1, c - half : c + half + 1]
            p.label = label_patch(window, config.label_threshold,
                                  patient_has_cancer=rec.has_cancer)
            labeled.append(p)
        if split == "train":
            labeled = [p for p in labeled if p.label is not None]
            if config.max_per_patient is not None:
                labeled = _subsample(labeled, config.max_per_patient)
            stream = RngStream(config.seed).derive(f"augment/{rec.patient_id}").draw()
            augmented = []
            for p in labeled:
                for copy in augment_patch(p.data, config.augment, stream):
                    augmented.append(
                        PatchTensor(copy, p.label, p.patient_id, p.slice_index, p.center)
                    )
            labeled = labeled + augmented
        rows.extend(labeled)
    if not rows:
        raise ValueError("no patches were extracted for this split")
    labels = np.array([-1 if p.label is None else p.label for p in rows], dtype=np.int8)
    if split == "train" and not (labels == 0).any():
        raise ValueError("training split holds no negative patches; add cancer-free patients")
    data = np.stack([p.data for p in rows]).astype(np.float32)
    patients = [p.patient_id for p in rows]
    slices = np.array([p.slice_index for p in rows], dtype=np.int32)
    centers = np.array([p.center for p in rows], dtype=np.int32)
    manifest = {
        "split": split,
        "n_patches": len(rows),
        "count_by_label": {
            "positive": int((labels == 1).sum()),
            "negative": int((labels == 0).sum()),
            "unlabeled": int((labels == -1).sum()),
        },
        "patients": sorted(set(patients)),
        "config": _config_dict(config),
        "checksum": _checksum(data, labels, patients, slices, centers),
    }
    if corrector is not None and hasattr(corrector, "hash"):
        manifest["stage1_hash"] = corrector.hash
    return PatchDataset(data, labels, patients, slices, centers, manifest)


def save_patches(dataset: PatchDataset, prefix) -> Path:
    """Patch store: <prefix>.hmv holds the stacked windows, <prefix>.json
    the labels, provenance, config, and checksum; returns the JSON path."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_volume(prefix.with_suffix(".hmv"), dataset.data, "f32")
    sidecar = dict(dataset.manifest)
    sidecar["labels"] = dataset.labels.tolist()
    sidecar["patient_ids"] = dataset.patients
    sidecar["slices"] = dataset.slices.tolist()
    sidecar["centers"] = dataset.centers.tolist()
    path = prefix.with_suffix(".json")
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_patches(prefix) -> PatchDataset:
    prefix = Path(prefix)
    data = read_volume(prefix.with_suffix(".hmv"))
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    labels = np.array(sidecar.pop("labels"), dtype=np.int8)
    patients = sidecar.pop("patient_ids")
    slices = np.array(sidecar.pop("slices"), dtype=np.int32)
    centers = np.array(sidecar.pop("centers"), dtype=np.int32)
    stored = sidecar["checksum"]
    actual = _checksum(data, labels, patients, slices, centers)
    if actual != stored:
        raise ValueError(f"patch store checksum mismatch: {actual[:12]} != {stored[:12]}")
    return PatchDataset(data, labels, patients, slices, centers, sidecar)
