"""Synthetic six-channel biomarker cohorts with planted lesions.

Each phantom is an ellipsoidal two-zone prostate with smooth multiplicative
texture per channel; cancerous phantoms embed one to three ellipsoidal
lesions whose profile shifts toward higher epithelium, lower lumen, lower
diffusivity, and shorter relaxation.  The unbiased ground truth is kept
alongside the observed volume (bias field times truth, plus noise) so
correction quality can be scored against a known field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .biasfield import (
    BiasField,
    BiasSpec,
    NoiseSpec,
    _lowpass_sequency,
    _pad_reflect_pow2,
    apply_bias,
    synth_bias_field,
)
from .rng import RngStream
from .volume_io import (
    CHANNELS,
    BiomarkerVolume,
    MaskVolume,
    clamp_physical,
    read_volume,
    write_volume,
)

# Simulator tissue profiles (config-overridable, never used as test oracles).
BENIGN_PROFILE = {
    "v_ep": 0.30,
    "v_lu": 0.25,
    "d_ep": 1.8,
    "d_st": 1.6,
    "t2_ep": 120.0,
    "t2_st": 90.0,
}
LESION_PROFILE = {
    "v_ep": 0.55,
    "v_lu": 0.10,
    "d_ep": 1.0,
    "d_st": 1.1,
    "t2_ep": 70.0,
    "t2_st": 60.0,
}
# Benign anatomy must stay identifiable from a smooth multiplicative field:
# zone contrast is kept to ~1% and the micro-texture is built high-band
# (its lowest sequencies are removed), so only lesions carry sharp contrast.
ZONE_MULTIPLIER = {
    "v_ep": 0.99,
    "v_lu": 1.01,
    "d_ep": 1.01,
    "d_st": 0.99,
    "t2_ep": 1.01,
    "t2_st": 0.99,
}
BACKGROUND_PROFILE = {
    "v_ep": 0.05,
    "v_lu": 0.03,
    "d_ep": 2.2,
    "d_st": 2.0,
    "t2_ep": 250.0,
    "t2_st": 180.0,
}
TEXTURE_SIGMA = (0.6, 0.8, 0.8)
TEXTURE_STOP_SEQUENCY = 4

VOLUME_FILES = ("observed", "truth", "prostate_mask", "cancer_mask", "bias")


@dataclass
class CohortSpec:
    """Cohort generation parameters; all randomness derives from `seed`."""

    n_patients: int = 24
    cancer_fraction: float = 0.5
    dims: tuple = (20, 64, 64)
    z_range: tuple | None = (16, 24)
    lesion_size_range: tuple = (150, 600)
    lesion_count_range: tuple = (1, 3)
    lesion_z_drift: float = 0.0
    texture_log_std: float = 0.02
    bias: BiasSpec = field(default_factory=lambda: BiasSpec(amplitude=0.1, max_sequency=4, seed=0))
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(sigma=0.01, seed=0))
    seed: int = 0
    profile_overrides: dict | None = None

    def __post_init__(self) -> None:
        if self.n_patients < 2:
            raise ValueError(f"cohort needs at least 2 patients, got {self.n_patients}")
        if not 0.0 <= self.cancer_fraction <= 1.0:
            raise ValueError(f"cancer fraction must lie in [0, 1], got {self.cancer_fraction}")
        z, h, w = self.dims
        if h > 256 or w > 256:
            raise ValueError(f"in-plane dims must be <= 256, got {h}x{w}")
        if not 4 <= z <= 64:
            raise ValueError(f"slice count {z} outside [4, 64]")
        if self.z_range is not None:
            zmin, zmax = self.z_range
            if not 4 <= zmin <= zmax <= 64:
                raise ValueError(f"z range {self.z_range} outside [4, 64]")
        vmin, vmax = self.lesion_size_range
        if not 0 < vmin <= vmax:
            raise ValueError(f"bad lesion size range {self.lesion_size_range}")
        cmin, cmax = self.lesion_count_range
        if not 1 <= cmin <= cmax:
            raise ValueError(f"bad lesion count range {self.lesion_count_range}")

    def profiles(self) -> tuple[dict, dict]:
        benign = dict(BENIGN_PROFILE)
        lesion = dict(LESION_PROFILE)
        for key, value in (self.profile_overrides or {}).items():
            group, _, channel = key.partition(".")
            table = {"benign": benign, "lesion": lesion}.get(group)
            if table is None or channel not in CHANNELS:
                raise ValueError(f"unknown profile override {key!r}")
            table[channel] = float(value)
        return benign, lesion


@dataclass
class PatientRecord:
    patient_id: str
    observed: BiomarkerVolume
    truth: BiomarkerVolume | None
    prostate_mask: MaskVolume
    cancer_mask: MaskVolume
    has_cancer: bool
    bias: BiasField | None = None

    def __post_init__(self) -> None:
        if self.has_cancer != (self.cancer_mask.count > 0):
            raise ValueError(
                f"{self.patient_id}: has_cancer={self.has_cancer} but cancer mask "
                f"has {self.cancer_mask.count} voxels"
            )
        if not self.cancer_mask.is_subset_of(self.prostate_mask):
            raise ValueError(f"{self.patient_id}: cancer mask leaves the prostate mask")


def _texture_field(gen, z: int, h: int, w: int) -> np.ndarray:
    """Unit-std smooth noise with its lowest sequencies removed per slice."""
    tex = gaussian_filter(gen.standard_normal((z, h, w)), TEXTURE_SIGMA)
    padded, (hh, ww) = _pad_reflect_pow2(tex)
    tex = tex - _lowpass_sequency(padded, TEXTURE_STOP_SEQUENCY)[:, :hh, :ww]
    return tex / max(tex.std(), 1e-12)


def _ellipsoid(z: int, h: int, w: int, center, radii, xy_shift=None) -> np.ndarray:
    """Boolean ellipsoid; xy_shift, when given, moves the in-plane center
    per slice (an array of (dy, dx) rows, one per slice)."""
    cz, cy, cx = center
    rz, ry, rx = radii
    zs = np.arange(z, dtype=np.float64)[:, None, None]
    ys = np.arange(h, dtype=np.float64)[None, :, None]
    xs = np.arange(w, dtype=np.float64)[None, None, :]
    if xy_shift is None:
        dy = np.zeros(z)
        dx = np.zeros(z)
    else:
        dy, dx = xy_shift[:, 0], xy_shift[:, 1]
    q = (
        ((zs - cz) / rz) ** 2
        + ((ys - cy - dy[:, None, None]) / ry) ** 2
        + ((xs - cx - dx[:, None, None]) / rx) ** 2
    )
    return q <= 1.0


def _place_lesions(gen, prostate: np.ndarray, spec: CohortSpec) -> np.ndarray:
    z, h, w = prostate.shape
    vmin, vmax = spec.lesion_size_range
    lesions = np.zeros_like(prostate, dtype=bool)
    interior = np.argwhere(prostate)
    n_lesions = int(gen.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    for li in range(n_lesions):
        for _ in range(100):
            target = gen.uniform(vmin + 0.1 * (vmax - vmin), vmax - 0.1 * (vmax - vmin))
            rz = gen.uniform(1.3, 2.4)
            inplane = 3.0 * target / (4.0 * np.pi * rz)
            aspect = gen.uniform(0.75, 1.33)
            ry = float(np.sqrt(inplane * aspect))
            rx = float(np.sqrt(inplane / aspect))
            center = interior[int(gen.integers(len(interior)))].astype(np.float64)
            angle = gen.uniform(0.0, 2.0 * np.pi)
            offsets = (np.arange(z) - center[0]) * spec.lesion_z_drift
            xy_shift = np.stack([offsets * np.sin(angle), offsets * np.cos(angle)], axis=1)
            candidate = _ellipsoid(z, h, w, center, (rz, ry, rx), xy_shift)
            count = int(candidate.sum())
            if not vmin <= count <= vmax:
                continue
            if np.any(candidate & ~prostate):
                continue
            if np.any(candidate & lesions):
                continue
            lesions |= candidate
            break
        else:
            raise RuntimeError(f"could not place lesion {li + 1} inside the mask after 100 attempts")
    return lesions


def generate_phantom(
    spec: CohortSpec, patient_seed: int, has_cancer: bool, patient_id: str
) -> PatientRecord:
    """One synthetic patient; every random choice comes from patient_seed."""
    stream = RngStream(patient_seed)
    geo = stream.derive("geometry").draw()
    _, h, w = spec.dims
    if spec.z_range is None:
        z = spec.dims[0]
    else:
        z = int(geo.integers(spec.z_range[0], spec.z_range[1] + 1))

    cz, cy, cx = (z - 1) / 2.0, h / 2.0 + geo.uniform(-3, 3), w / 2.0 + geo.uniform(-3, 3)
    area = 0.40 * h * w * geo.uniform(0.9, 1.1)
    ab = area / np.pi
    aspect = geo.uniform(0.85, 1.18)
    ay, ax = float(np.sqrt(ab * aspect)), float(np.sqrt(ab / aspect))
    az = 0.52 * z
    prostate = _ellipsoid(z, h, w, (cz, cy, cx), (az, ay, ax))
    central = _ellipsoid(z, h, w, (cz, cy, cx), (0.55 * az, 0.55 * ay, 0.55 * ax))

    if has_cancer:
        lesions = _place_lesions(stream.derive("lesion").draw(), prostate, spec)
    else:
        lesions = np.zeros_like(prostate)
    blend = np.clip(1.6 * gaussian_filter(lesions.astype(np.float64), (0.8, 1.2, 1.2)), 0.0, 1.0)

    benign, lesion = spec.profiles()
    tex_gen = stream.derive("texture").draw()
    data = np.empty((len(CHANNELS), z, h, w), dtype=np.float32)
    for ci, ch in enumerate(CHANNELS):
        base = np.where(
            prostate,
            benign[ch] * np.where(central, ZONE_MULTIPLIER[ch], 1.0),
            BACKGROUND_PROFILE[ch],
        )
        tex = _texture_field(tex_gen, z, h, w)
        factor = np.exp(spec.texture_log_std * np.clip(tex, -4.0, 4.0))
        values = base * factor
        if has_cancer:
            values = values * (1.0 - blend) + lesion[ch] * factor * blend
        data[ci] = values
    clamp_physical(data)
    truth = BiomarkerVolume(data)
    truth.validate()

    bias = synth_bias_field(
        BiasSpec(spec.bias.amplitude, spec.bias.max_sequency, seed=stream.derive("bias").seed),
        (z, h, w),
    )
    observed = apply_bias(
        truth, bias, NoiseSpec(spec.noise.sigma, seed=stream.derive("noise").seed)
    )
    return PatientRecord(
        patient_id=patient_id,
        observed=observed,
        truth=truth,
        prostate_mask=MaskVolume(prostate.astype(np.uint8)),
        cancer_mask=MaskVolume(lesions.astype(np.uint8)),
        has_cancer=has_cancer,
        bias=bias,
    )


def generate_cohort(spec: CohortSpec) -> tuple[list[PatientRecord], dict]:
    """All patients of a cohort plus its manifest (canonical relative paths)."""
    n_cancer = int(round(spec.n_patients * spec.cancer_fraction))
    stream = RngStream(spec.seed)
    records = []
    for i in range(spec.n_patients):
        records.append(
            generate_phantom(
                spec,
                patient_seed=stream.derive(f"patient/{i}").seed,
                has_cancer=i < n_cancer,
                patient_id=f"P{i:03d}",
            )
        )
    return records, cohort_manifest(records)


def cohort_manifest(records: list[PatientRecord]) -> dict:
    patients = []
    for rec in records:
        patients.append(
            {
                "patient_id": rec.patient_id,
                "has_cancer": rec.has_cancer,
                "paths": {name: f"{rec.patient_id}/{name}.hmv" for name in VOLUME_FILES},
            }
        )
    return {"patients": patients}


def write_cohort(records: list[PatientRecord], outdir) -> Path:
    """Write every volume as HMV plus a manifest.json; returns its path."""
    outdir = Path(outdir)
    manifest = cohort_manifest(records)
    for rec, entry in zip(records, manifest["patients"]):
        pdir = outdir / rec.patient_id
        pdir.mkdir(parents=True, exist_ok=True)
        write_volume(outdir / entry["paths"]["observed"], rec.observed.data, "f32")
        write_volume(outdir / entry["paths"]["truth"], rec.truth.data, "f32")
        write_volume(outdir / entry["paths"]["prostate_mask"], rec.prostate_mask.values, "u8")
        write_volume(outdir / entry["paths"]["cancer_mask"], rec.cancer_mask.values, "u8")
        write_volume(outdir / entry["paths"]["bias"], rec.bias.values, "f32")
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_cohort(manifest_path) -> list[PatientRecord]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    records = []
    for entry in manifest["patients"]:
        paths = entry["paths"]
        records.append(
            PatientRecord(
                patient_id=entry["patient_id"],
                observed=BiomarkerVolume(read_volume(root / paths["observed"])),
                truth=BiomarkerVolume(read_volume(root / paths["truth"])),
                prostate_mask=MaskVolume(read_volume(root / paths["prostate_mask"])),
                cancer_mask=MaskVolume(read_volume(root / paths["cancer_mask"])),
                has_cancer=bool(entry["has_cancer"]),
                bias=BiasField(read_volume(root / paths["bias"])),
            )
        )
    return records
