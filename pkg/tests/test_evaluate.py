"""Metrics, folds, aggregation, heatmaps, and cross-validation."""

import itertools

import numpy as np
import pytest

from hbrnet.detector import ResNetConfig, Stage2Hyper
from hbrnet.evaluate import (
    ConfusionCounts,
    CVConfig,
    FoldSplit,
    MetricsReport,
    PatientPrediction,
    aggregate_patient,
    compute_metrics,
    cross_validate,
    make_folds,
    render_heatmap,
    write_heatmap_pgm,
)
from hbrnet.hunet import HUNetConfig, Stage1Hyper
from hbrnet.patches import PatchConfig
from hbrnet.phantom import BiasSpec, CohortSpec, NoiseSpec, generate_cohort
from hbrnet.volume_io import MaskVolume

# -- confusion metrics -------------------------------------------------


def test_counts_reject_negative():
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)


def test_metrics_oracle():
    r = compute_metrics(ConfusionCounts(tp=47, fn=3, tn=42, fp=8))
    assert abs(r.sensitivity - 0.94) < 1e-12
    assert abs(r.specificity - 0.84) < 1e-12
    assert abs(r.accuracy - 0.89) < 1e-12


def test_metrics_perfect_and_degenerate():
    r = compute_metrics(ConfusionCounts(tp=1, tn=1))
    assert (r.sensitivity, r.specificity, r.accuracy) == (1.0, 1.0, 1.0)
    r = compute_metrics(ConfusionCounts(tp=0, fn=5, tn=3))
    assert r.sensitivity == 0.0


def test_zero_denominators_become_none_not_zero():
    r = compute_metrics(ConfusionCounts(tn=4, fp=1))
    assert r.sensitivity is None and r.specificity == 0.8
    r = compute_metrics(ConfusionCounts(tp=4, fn=1))
    assert r.specificity is None and r.sensitivity == 0.8
    with pytest.raises(ValueError):
        compute_metrics(ConfusionCounts())


def test_metrics_identities_exhaustive():
    for tp, tn, fp, fn in itertools.product(range(11), repeat=4):
        total = tp + tn + fp + fn
        if total == 0 or total > 20:
            continue
        r = compute_metrics(ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn))
        assert r.accuracy == (tp + tn) / total
        assert r.sensitivity == (tp / (tp + fn) if tp + fn else None)
        assert r.specificity == (tn / (tn + fp) if tn + fp else None)
        assert r.counts.total == total


def test_metrics_level_validation():
    with pytest.raises(ValueError):
        compute_metrics(ConfusionCounts(tp=1), level="study")


# -- folds -------------------------------------------------------------


def _cohort_ids(n_pos, n_neg):
    return [(f"C{i:02d}", True) for i in range(n_pos)] + [
        (f"F{i:02d}", False) for i in range(n_neg)
    ]


def test_fold_sizes_for_24_patients():
    split = make_folds(_cohort_ids(12, 12), k=5, seed=0)
    sizes = sorted(len(split.validation(f)) for f in range(5))
    assert sizes == [4, 5, 5, 5, 5]
    cancer = [sum(1 for p in split.validation(f) if p.startswith("C")) for f in range(5)]
    assert max(cancer) - min(cancer) <= 1


def test_folds_partition_patients():
    ids = _cohort_ids(7, 6)
    split = make_folds(ids, k=4, seed=3)
    seen = [p for f in range(4) for p in split.validation(f)]
    assert sorted(seen) == sorted(p for p, _ in ids)
    for f in range(4):
        assert not set(split.validation(f)) & set(split.train(f))


def test_folds_deterministic_and_seed_sensitive():
    ids = _cohort_ids(10, 10)
    a = make_folds(ids, k=5, seed=7)
    b = make_folds(ids, k=5, seed=7)
    c = make_folds(ids, k=5, seed=8)
    assert a.assignment == b.assignment
    assert a.assignment != c.assignment


@pytest.mark.parametrize("n_pos,n_neg,k", [(5, 9, 3), (3, 3, 2), (11, 4, 5), (8, 0, 4)])
def test_folds_stratification_balance(n_pos, n_neg, k):
    split = make_folds(_cohort_ids(n_pos, n_neg), k=k, seed=1)
    for prefix, count in (("C", n_pos), ("F", n_neg)):
        per_fold = [
            sum(1 for p in split.validation(f) if p.startswith(prefix)) for f in range(k)
        ]
        assert sum(per_fold) == count
        assert max(per_fold) - min(per_fold) <= 1
    sizes = [len(split.validation(f)) for f in range(k)]
    assert max(sizes) - min(sizes) <= 1


def test_folds_validation():
    with pytest.raises(ValueError):
        make_folds(_cohort_ids(2, 1), k=4)
    with pytest.raises(ValueError):
        make_folds(_cohort_ids(3, 3), k=0)
    with pytest.raises(ValueError):
        make_folds([("P0", True), ("P0", False)], k=2)
    with pytest.raises(ValueError):
        FoldSplit(2, {"P0": 5})


# -- patient aggregation -----------------------------------------------


def test_aggregate_extremes():
    assert aggregate_patient("P0", [0.99] * 10).predicted == 1
    assert aggregate_patient("P0", [0.01] * 10).predicted == 0


def test_aggregate_threshold_boundary():
    probs = [0.9] * 2 + [0.1] * 98
    assert aggregate_patient("P0", probs, rho=0.02).predicted == 1
    probs = [0.9] * 1 + [0.1] * 99
    assert aggregate_patient("P0", probs, rho=0.02).predicted == 0


def test_aggregate_counts_exact_half():
    pred = aggregate_patient("P0", [0.5, 0.1, 0.1], rho=0.3)
    assert pred.positive_patch_fraction == pytest.approx(1 / 3)
    assert pred.predicted == 1


def test_aggregate_monotone():
    gen = np.random.default_rng(4)
    for _ in range(50):
        probs = gen.random(30)
        base = aggregate_patient("P0", probs, rho=0.1)
        i = int(gen.integers(30))
        raised = probs.copy()
        raised[i] = min(1.0, raised[i] + gen.random())
        lifted = aggregate_patient("P0", raised, rho=0.1)
        assert lifted.predicted >= base.predicted


def test_aggregate_validation():
    with pytest.raises(ValueError):
        aggregate_patient("P0", [])
    with pytest.raises(ValueError):
        aggregate_patient("P0", [0.5], rho=1.5)
    with pytest.raises(ValueError):
        PatientPrediction("P0", 1.2, 1)
    with pytest.raises(ValueError):
        PatientPrediction("P0", 0.5, 2)


# -- heatmaps ----------------------------------------------------------


def _full_mask(z, h, w):
    return MaskVolume(np.ones((z, h, w), dtype=np.uint8))


def test_heatmap_single_patch_footprint():
    heat = render_heatmap(
        [1.0], [1], [(10, 12)], (3, 24, 24), _full_mask(3, 24, 24), patch_size=11
    )
    assert heat.shape == (3, 24, 24)
    assert np.all(heat[1, 5:16, 7:18] == 1.0)
    heat[1, 5:16, 7:18] = 0.0
    assert np.all(heat == 0.0)


def test_heatmap_overlap_mean():
    heat = render_heatmap(
        [0.2, 0.8], [0, 0], [(8, 8), (8, 8)], (1, 17, 17), _full_mask(1, 17, 17), patch_size=11
    )
    footprint = heat[0, 3:14, 3:14]
    assert np.allclose(footprint, 0.5)


def test_heatmap_values_in_unit_interval():
    gen = np.random.default_rng(0)
    n = 40
    centers = np.stack([gen.integers(5, 26, n), gen.integers(5, 26, n)], axis=1)
    heat = render_heatmap(
        gen.random(n), gen.integers(0, 4, n), centers, (4, 32, 32), _full_mask(4, 32, 32)
    )
    assert np.all(heat >= 0.0) and np.all(heat <= 1.0)


def test_heatmap_matches_brute_force():
    gen = np.random.default_rng(5)
    for _ in range(10):
        z, h, w, s = 3, 20, 22, 7
        n = int(gen.integers(1, 25))
        probs = gen.random(n)
        slices = gen.integers(0, z, n)
        centers = np.stack([gen.integers(3, h - 3, n), gen.integers(3, w - 3, n)], axis=1)
        heat = render_heatmap(probs, slices, centers, (z, h, w), _full_mask(z, h, w), patch_size=s)
        half = s // 2
        for zi in range(z):
            for r in range(h):
                for c in range(w):
                    covering = [
                        probs[i]
                        for i in range(n)
                        if slices[i] == zi
                        and abs(int(centers[i, 0]) - r) <= half
                        and abs(int(centers[i, 1]) - c) <= half
                    ]
                    want = float(np.mean(covering)) if covering else 0.0
                    assert abs(heat[zi, r, c] - want) < 1e-12


def test_heatmap_zeroed_outside_dilated_mask():
    mask = np.zeros((1, 24, 24), dtype=np.uint8)
    mask[0, 10:14, 10:14] = 1
    heat = render_heatmap(
        [1.0], [0], [(11, 11)], (1, 24, 24), MaskVolume(mask), patch_size=11, dilate_radius=2
    )
    assert heat[0, 11, 11] == 1.0
    assert heat[0, 8, 11] == 1.0  # inside the radius-2 dilation
    assert heat[0, 7, 11] == 0.0  # covered by the window but outside it


def test_heatmap_validation():
    mask = _full_mask(2, 16, 16)
    with pytest.raises(ValueError, match="leaves the volume"):
        render_heatmap([0.5], [0], [(2, 8)], (2, 16, 16), mask, patch_size=11)
    with pytest.raises(ValueError, match="leaves the volume"):
        render_heatmap([0.5], [2], [(8, 8)], (2, 16, 16), mask, patch_size=11)
    with pytest.raises(ValueError):
        render_heatmap([1.5], [0], [(8, 8)], (2, 16, 16), mask, patch_size=11)
    with pytest.raises(ValueError):
        render_heatmap([0.5, 0.5], [0], [(8, 8)], (2, 16, 16), mask, patch_size=11)


def test_heatmap_pgm_export(tmp_path):
    gen = np.random.default_rng(1)
    heat = gen.random((2, 9, 13))
    paths = write_heatmap_pgm(heat, tmp_path, "P007")
    assert [p.name for p in paths] == ["P007_000.pgm", "P007_001.pgm"]
    for zi, path in enumerate(paths):
        blob = path.read_bytes()
        header = f"P5\n13 9\n255\n".encode()
        assert blob.startswith(header)
        gray = np.frombuffer(blob[len(header):], dtype=np.uint8).reshape(9, 13)
        assert np.array_equal(gray, np.rint(heat[zi] * 255).astype(np.uint8))


# -- cross-validation --------------------------------------------------


@pytest.fixture(scope="module")
def small_cohort():
    spec = CohortSpec(
        n_patients=6,
        dims=(6, 32, 32),
        z_range=None,
        lesion_size_range=(60, 200),
        bias=BiasSpec(0.2, 4, 0),
        noise=NoiseSpec(0.01, 0),
        seed=2,
    )
    records, _ = generate_cohort(spec)
    return records


def _cv_config(**kwargs):
    base = dict(
        k=3,
        seed=0,
        use_stage1=False,
        hunet=HUNetConfig(levels=2, widths=(8, 10), coeff_dropout_rate=0.1, pad_target=32),
        stage1=Stage1Hyper(epochs=2),
        patch=PatchConfig(patch_size=7, stride=2, dilate_radius=1, max_per_patient=12),
        resnet=ResNetConfig(base_width=4),
        stage2=Stage2Hyper(lr=1e-3, epochs=2, batch=32),
    )
    base.update(kwargs)
    return CVConfig(**base)


@pytest.fixture(scope="module")
def cv_report(small_cohort):
    return cross_validate(small_cohort, _cv_config())


def test_cv_report_structure(cv_report):
    report = cv_report
    assert len(report["folds"]) == 3
    assert [e["fold"] for e in report["folds"]] == [0, 1, 2]
    for entry in report["folds"]:
        for level in ("patch", "voxel", "patient"):
            block = entry[level]
            assert set(block) == {"tp", "fn", "tn", "fp", "sensitivity", "specificity", "accuracy"}
            assert block["tp"] + block["fn"] + block["tn"] + block["fp"] > 0
    for level in ("patch", "voxel", "patient"):
        assert "accuracy" in report["mean"][level]
        assert "accuracy" in report["std"][level]
        assert report["pooled"][level]["tp"] == sum(e[level]["tp"] for e in report["folds"])
    assert report["config"]["k"] == 3
    assert report["config"]["patch"]["patch_size"] == 7


def test_cv_patient_counts_cover_cohort(small_cohort, cv_report):
    report = cv_report
    total = sum(
        e["patient"]["tp"] + e["patient"]["fn"] + e["patient"]["tn"] + e["patient"]["fp"]
        for e in report["folds"]
    )
    assert total == len(small_cohort)


def test_cv_with_stage1_runs(small_cohort):
    mixed = [small_cohort[i] for i in (1, 2, 4, 5)]  # two cancerous, two free
    report = cross_validate(mixed, _cv_config(k=2, use_stage1=True))
    assert len(report["folds"]) == 2


def test_cv_two_d_only_runs(small_cohort):
    report = cross_validate(small_cohort, _cv_config(two_d_only=True))
    assert len(report["folds"]) == 3


def test_cv_leakage_is_hard_failure(small_cohort):
    class LeakySplit(FoldSplit):
        def validation(self, fold):
            ids = sorted(self.assignment)
            return [ids[0], ids[1]]  # ids[1] also sits in some training split

        def train(self, fold):
            ids = sorted(self.assignment)
            return ids[1:]

    ids = [(r.patient_id, r.has_cancer) for r in small_cohort]
    leaky = LeakySplit(3, make_folds(ids, k=3, seed=0).assignment)
    with pytest.raises(RuntimeError, match="leakage"):
        cross_validate(small_cohort, _cv_config(), folds=leaky)


def test_cv_rejects_mismatched_folds(small_cohort):
    folds = FoldSplit(2, {"GHOST": 0, small_cohort[0].patient_id: 1})
    with pytest.raises(ValueError, match="does not match"):
        cross_validate(small_cohort, _cv_config(k=2), folds=folds)


def test_cv_config_validation():
    with pytest.raises(ValueError):
        CVConfig(k=1)
    with pytest.raises(ValueError):
        CVConfig(rho=1.5)
    with pytest.raises(ValueError):
        CVConfig(heatmap_threshold=-0.1)
