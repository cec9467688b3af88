"""Evaluation protocol: confusion metrics, patient-wise cross-validation,
patient-level aggregation, and probability heatmaps.

Metrics are reported at three levels.  Patch level scores every labeled
patch prediction; voxel level thresholds the rendered probability heatmap
against the cancer mask inside the prostate; patient level aggregates a
patient's patch probabilities into one binary call.  Cross-validation is
strictly patient-wise: a patient whose data reaches any training step of
a fold can never appear in that fold's validation set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .detector import ResNetConfig, Stage2Hyper, predict_patches, train_stage2
from .hunet import HUNetConfig, Stage1Hyper, freeze, train_stage1
from .patches import PatchConfig, build_dataset
from .rng import RngStream
from .volume_io import dilate_mask

# -- confusion counts and metrics --------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


@dataclass(frozen=True)
class MetricsReport:
    level: str
    sensitivity: float | None
    specificity: float | None
    accuracy: float
    counts: ConfusionCounts


def compute_metrics(counts: ConfusionCounts, level: str = "patch") -> MetricsReport:
    """Sensitivity tp/(tp+fn), specificity tn/(tn+fp), accuracy
    (tp+tn)/total.  A metric whose denominator is zero is reported as
    None (undefined), never as a silent 0."""
    if level not in ("patch", "voxel", "patient"):
        raise ValueError(f"level must be patch, voxel or patient, got {level!r}")
    if counts.total == 0:
        raise ValueError("cannot compute metrics over zero predictions")
    sens = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    spec = counts.tn / (counts.tn + counts.fp) if counts.tn + counts.fp else None
    acc = (counts.tp + counts.tn) / counts.total
    return MetricsReport(level, sens, spec, acc, counts)


# -- folds -------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignment: dict

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        bad = {p: f for p, f in self.assignment.items() if not 0 <= f < self.k}
        if bad:
            raise ValueError(f"fold indices outside [0, {self.k}): {bad}")

    def validation(self, fold: int) -> list:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def train(self, fold: int) -> list:
        return sorted(p for p, f in self.assignment.items() if f != fold)


def make_folds(patients, k: int = 5, seed: int = 0) -> FoldSplit:
    """Class-stratified fold assignment: shuffle each class with the
    seeded generator, then deal all patients round-robin with a single
    rolling cursor so total fold sizes also differ by at most one."""
    patients = list(patients)
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(patients):
        raise ValueError(f"cannot split {len(patients)} patients into {k} folds")
    ids = [p for p, _ in patients]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    gen = RngStream(seed).derive("folds").draw()
    assignment = {}
    cursor = 0
    for wanted in (True, False):
        members = sorted(p for p, flag in patients if bool(flag) == wanted)
        order = gen.permutation(len(members))
        for i in order:
            assignment[members[i]] = cursor % k
            cursor += 1
    return FoldSplit(k, assignment)


# -- patient aggregation -----------------------------------------------


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    positive_patch_fraction: float
    predicted: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.positive_patch_fraction <= 1.0:
            raise ValueError(
                f"fraction must lie in [0, 1], got {self.positive_patch_fraction}"
            )
        if self.predicted not in (0, 1):
            raise ValueError(f"predicted label must be 0 or 1, got {self.predicted}")


def aggregate_patient(
    patient_id: str, probabilities, rho: float = 0.02, p_threshold: float = 0.5
) -> PatientPrediction:
    """A patient is called positive when the fraction of patches with
    p >= p_threshold reaches rho.  Monotone: raising any probability can
    only raise the fraction."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise ValueError(f"no patch predictions for patient {patient_id}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    fraction = float(np.mean(p >= p_threshold))
    return PatientPrediction(patient_id, fraction, int(fraction >= rho))


# -- heatmaps ----------------------------------------------------------


def render_heatmap(
    probabilities,
    slices,
    centers,
    dims: tuple,
    mask,
    patch_size: int = 11,
    dilate_radius: int = 2,
) -> np.ndarray:
    """Per-voxel mean probability over every patch window covering the
    voxel on its center slice; voxels outside the dilated mask are 0.

    Returns a float64 (Z, H, W) volume with values in [0, 1].
    """
    p = np.asarray(probabilities, dtype=np.float64)
    slices = np.asarray(slices, dtype=np.intp)
    centers = np.asarray(centers, dtype=np.intp)
    z, h, w = dims
    if p.ndim != 1 or slices.shape != p.shape or centers.shape != (p.size, 2):
        raise ValueError("need parallel arrays of probabilities, slices and centers")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    half = patch_size // 2
    acc = np.zeros((z, h, w), dtype=np.float64)
    cnt = np.zeros((z, h, w), dtype=np.int64)
    for pi, zi, (r, c) in zip(p, slices, centers):
        r0, c0 = r - half, c - half
        r1, c1 = r0 + patch_size, c0 + patch_size
        if zi < 0 or zi >= z or r0 < 0 or c0 < 0 or r1 > h or c1 > w:
            raise ValueError(f"patch window at slice {zi}, center ({r}, {c}) leaves the volume")
        acc[zi, r0:r1, c0:c1] += pi
        cnt[zi, r0:r1, c0:c1] += 1
    heat = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    region = dilate_mask(mask, dilate_radius).values
    heat[region == 0] = 0.0
    return heat


def write_heatmap_pgm(heat: np.ndarray, out_dir, patient_id: str) -> list:
    """Export one binary PGM (maxval 255) per slice, [0,1] -> [0,255]."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for zi, plane in enumerate(heat):
        gray = np.rint(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
        path = out_dir / f"{patient_id}_{zi:03d}.pgm"
        header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + gray.tobytes())
        paths.append(path)
    return paths


# -- cross-validation --------------------------------------------------


@dataclass
class CVConfig:
    k: int = 5
    seed: int = 0
    rho: float = 0.02
    p_threshold: float = 0.5
    heatmap_threshold: float = 0.5
    use_stage1: bool = True
    two_d_only: bool = False
    hunet: HUNetConfig = field(default_factory=HUNetConfig)
    stage1: Stage1Hyper = field(default_factory=Stage1Hyper)
    patch: PatchConfig = field(default_factory=PatchConfig)
    resnet: ResNetConfig = field(default_factory=ResNetConfig)
    stage2: Stage2Hyper = field(default_factory=Stage2Hyper)

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError(f"cross-validation needs k >= 2, got {self.k}")
        for name in ("rho", "p_threshold", "heatmap_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _flatten_2d(data: np.ndarray) -> np.ndarray:
    # drop through-plane context: every patch sees its center slice thrice
    return data[:, [1, 1, 1]]


def _metrics_json(report: MetricsReport) -> dict:
    c = report.counts
    rounded = lambda v: None if v is None else round(v, 6)
    return {
        "tp": c.tp,
        "fn": c.fn,
        "tn": c.tn,
        "fp": c.fp,
        "sensitivity": rounded(report.sensitivity),
        "specificity": rounded(report.specificity),
        "accuracy": rounded(report.accuracy),
    }


def _mean_std_json(values: list) -> tuple:
    mean, std = {}, {}
    for key in ("sensitivity", "specificity", "accuracy"):
        defined = [v[key] for v in values if v[key] is not None]
        if defined:
            mean[key] = round(float(np.mean(defined)), 6)
            std[key] = round(float(np.std(defined)), 6)
        else:
            mean[key] = None
            std[key] = None
    return mean, std


def _counts_from_pairs(truth: np.ndarray, pred: np.ndarray) -> ConfusionCounts:
    truth = np.asarray(truth, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def _evaluate_fold(train_records, val_records, config: CVConfig, fold: int) -> dict:
    stage1 = dataclasses.replace(config.stage1, seed=config.stage1.seed + fold)
    stage2 = dataclasses.replace(config.stage2, seed=config.stage2.seed + fold)
    patch_cfg = dataclasses.replace(config.patch, seed=config.patch.seed + fold)

    frozen = None
    if config.use_stage1:
        net, _ = train_stage1(train_records, config.hunet, stage1)
        frozen = freeze(net)
    train_ds = build_dataset(train_records, frozen, patch_cfg, split="train")
    val_ds = build_dataset(val_records, frozen, patch_cfg, split="eval")
    if config.two_d_only:
        train_ds.data[...] = _flatten_2d(train_ds.data)
        val_ds.data[...] = _flatten_2d(val_ds.data)

    det, _ = train_stage2(train_ds, frozen, stage2, config.resnet)
    probs = predict_patches(val_ds.data, det)
    scored = score_predictions(val_records, val_ds, probs, config, patch_cfg)
    scored["fold"] = fold
    return scored


def score_predictions(val_records, val_ds, probs: np.ndarray, config: CVConfig,
                      patch_cfg: PatchConfig | None = None) -> dict:
    """Patch, voxel, and patient metrics for one validation split.

    `probs` holds per-patch probabilities aligned with `val_ds` rows; voxel
    counts compare thresholded heatmaps against cancer masks inside the
    prostate, patient calls use the rho aggregation rule."""
    if patch_cfg is None:
        patch_cfg = config.patch
    labeled = val_ds.labels >= 0
    patch_counts = _counts_from_pairs(
        val_ds.labels[labeled] == 1, probs[labeled] >= config.p_threshold
    )

    voxel_counts = ConfusionCounts()
    patient_truth, patient_pred = [], []
    ids = np.array(val_ds.patients)
    for rec in val_records:
        sel = ids == rec.patient_id
        if not sel.any():
            continue
        heat = render_heatmap(
            probs[sel],
            val_ds.slices[sel],
            val_ds.centers[sel],
            rec.observed.data.shape[1:],
            rec.prostate_mask,
            patch_size=patch_cfg.patch_size,
            dilate_radius=patch_cfg.dilate_radius,
        )
        inside = rec.prostate_mask.values > 0
        voxel_counts = voxel_counts + _counts_from_pairs(
            rec.cancer_mask.values[inside] > 0,
            heat[inside] >= config.heatmap_threshold,
        )
        call = aggregate_patient(rec.patient_id, probs[sel], config.rho, config.p_threshold)
        patient_truth.append(rec.has_cancer)
        patient_pred.append(call.predicted == 1)
    patient_counts = _counts_from_pairs(patient_truth, patient_pred)

    return {
        "patch": _metrics_json(compute_metrics(patch_counts, "patch")),
        "voxel": _metrics_json(compute_metrics(voxel_counts, "voxel")),
        "patient": _metrics_json(compute_metrics(patient_counts, "patient")),
    }


def cross_validate(records, config: CVConfig, folds: FoldSplit | None = None) -> dict:
    """Patient-wise k-fold evaluation of the full two-stage pipeline.

    Per fold, Stage 1 and Stage 2 are trained on the training patients
    only and scored on the validation patients at patch, voxel and
    patient level.  The report carries per-fold metrics, their mean and
    population standard deviation, and pooled-count metrics.
    """
    records = list(records)
    if folds is None:
        folds = make_folds([(r.patient_id, r.has_cancer) for r in records], config.k, config.seed)
    by_id = {r.patient_id: r for r in records}
    if len(by_id) != len(records):
        raise ValueError("duplicate patient ids in cohort")
    missing = sorted(set(folds.assignment) - set(by_id))
    if missing or len(folds.assignment) != len(records):
        raise ValueError("fold assignment does not match the cohort")

    fold_entries = []
    pooled = {"patch": ConfusionCounts(), "voxel": ConfusionCounts(), "patient": ConfusionCounts()}
    for fold in range(folds.k):
        val_ids = folds.validation(fold)
        train_ids = folds.train(fold)
        overlap = set(val_ids) & set(train_ids)
        if overlap:
            raise RuntimeError(
                f"data leakage: patients {sorted(overlap)} appear in both train and "
                f"validation of fold {fold}"
            )
        entry = _evaluate_fold(
            [by_id[p] for p in train_ids], [by_id[p] for p in val_ids], config, fold
        )
        fold_entries.append(entry)
        for level in pooled:
            e = entry[level]
            pooled[level] = pooled[level] + ConfusionCounts(e["tp"], e["tn"], e["fp"], e["fn"])

    mean, std = {}, {}
    for level in ("patch", "voxel", "patient"):
        mean[level], std[level] = _mean_std_json([e[level] for e in fold_entries])
    report = {
        "config": _config_json(config),
        "folds": fold_entries,
        "mean": mean,
        "std": std,
        "pooled": {
            level: _metrics_json(compute_metrics(pooled[level], level))
            for level in ("patch", "voxel", "patient")
        },
    }
    return report


def _config_json(config: CVConfig) -> dict:
    def clean(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {k: clean(v) for k, v in dataclasses.asdict(value).items()}
        if isinstance(value, tuple):
            return [clean(v) for v in value]
        if isinstance(value, (np.integer,)):
            return int(value)
        if isinstance(value, (np.floating,)):
            return float(value)
        return value

    return clean(config)
