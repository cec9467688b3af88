"""Volume I/O, bias-field synthesis, and the reference corrector."""

import numpy as np
import pytest

from hbrnet.biasfield import (
    BiasField,
    BiasSpec,
    NoiseSpec,
    _max_inplane_step,
    _pad_reflect_pow2,
    apply_bias,
    reference_correct,
    synth_bias_field,
)
from hbrnet.volume_io import (
    CHANNELS,
    BiomarkerVolume,
    MaskVolume,
    VolumeDimError,
    VolumeError,
    VolumeMagicError,
    VolumeTruncatedError,
    clamp_physical,
    read_volume,
    write_volume,
)
from hbrnet.wht import fwht2_batch, sequency_reorder


# -- HMV files ---------------------------------------------------------


def test_roundtrip_f32(tmp_path):
    rng = np.random.default_rng(0)
    grid = rng.standard_normal((6, 4, 8, 8)).astype(np.float32)
    path = tmp_path / "v.hmv"
    write_volume(path, grid, "f32")
    back = read_volume(path)
    assert back.dtype == np.float32
    assert back.shape == grid.shape
    assert back.tobytes() == grid.tobytes()


def test_roundtrip_u8(tmp_path):
    mask = (np.arange(60).reshape(3, 4, 5) % 2).astype(np.uint8)
    path = tmp_path / "m.hmv"
    write_volume(path, mask, "u8")
    back = read_volume(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back, mask)


def test_read_returns_writable_copy(tmp_path):
    path = tmp_path / "v.hmv"
    write_volume(path, np.zeros((2, 2), dtype=np.float32), "f32")
    back = read_volume(path)
    back[0, 0] = 5.0  # must not raise


def test_write_rejects_unknown_dtype(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        write_volume(tmp_path / "v.hmv", np.zeros((2, 2)), "f64")


def test_bad_magic(tmp_path):
    path = tmp_path / "v.hmv"
    write_volume(path, np.zeros((2, 2), dtype=np.float32), "f32")
    blob = bytearray(path.read_bytes())
    blob[:4] = b"JUNK"
    path.write_bytes(bytes(blob))
    with pytest.raises(VolumeMagicError, match="magic"):
        read_volume(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "v.hmv"
    write_volume(path, np.zeros((2, 3), dtype=np.float32), "f32")
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(VolumeTruncatedError, match="payload"):
        read_volume(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "v.hmv"
    write_volume(path, np.zeros((2, 3), dtype=np.float32), "f32")
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(VolumeTruncatedError):
        read_volume(path)


def test_truncated_dimension_list(tmp_path):
    path = tmp_path / "v.hmv"
    write_volume(path, np.zeros((2, 3), dtype=np.float32), "f32")
    path.write_bytes(path.read_bytes()[:14])
    with pytest.raises(VolumeTruncatedError, match="dimension"):
        read_volume(path)


def test_implausible_dims(tmp_path):
    import struct

    path = tmp_path / "v.hmv"
    header = b"HMV1" + struct.pack("<BB", 0, 3) + b"\x00" * 6
    dims = struct.pack("<3I", 1 << 20, 1 << 20, 1 << 20)
    path.write_bytes(header + dims)
    with pytest.raises(VolumeDimError, match="implausible"):
        read_volume(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "v.hmv"
    write_volume(path, np.zeros((2, 2), dtype=np.float32), "f32")
    blob = bytearray(path.read_bytes())
    blob[4] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(VolumeError, match="dtype code"):
        read_volume(path)


# -- physical clamping -------------------------------------------------


def test_clamp_clips_fractions():
    data = np.zeros((6, 1, 2, 2), dtype=np.float32)
    data[0] = -0.5
    data[1] = 1.5
    clamp_physical(data)
    assert np.all(data[0] == 0.0)
    assert np.all(data[1] == 1.0)


def test_clamp_rescales_fraction_sum():
    data = np.zeros((6, 1, 1, 1), dtype=np.float32)
    data[0], data[1] = 0.8, 0.6
    clamp_physical(data)
    assert data[0, 0, 0, 0] == pytest.approx(0.8 / 1.4, abs=1e-6)
    assert data[1, 0, 0, 0] == pytest.approx(0.6 / 1.4, abs=1e-6)
    assert data[0, 0, 0, 0] + data[1, 0, 0, 0] <= 1.0 + 1e-7


def test_clamp_floors_quantitative_channels():
    data = np.full((6, 1, 1, 1), 0.5, dtype=np.float32)
    data[2] = -3.0
    data[5] = 0.0
    out = clamp_physical(data)
    assert out is data  # in place
    assert data[2, 0, 0, 0] == pytest.approx(1e-6)
    assert data[5, 0, 0, 0] == pytest.approx(1e-6)


def test_clamped_volume_validates():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((6, 4, 6, 6)).astype(np.float32) * 5
    clamp_physical(data)
    BiomarkerVolume(data).validate()


# -- volume / mask types -----------------------------------------------


def test_volume_shape_validation():
    with pytest.raises(ValueError, match="6, Z, H, W"):
        BiomarkerVolume(np.zeros((3, 4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="slice count"):
        BiomarkerVolume(np.zeros((6, 2, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="slice count"):
        BiomarkerVolume(np.zeros((6, 65, 4, 4), dtype=np.float32))


def test_channel_accessor():
    data = np.zeros((6, 4, 2, 2), dtype=np.float32)
    for i in range(6):
        data[i] = i
    vol = BiomarkerVolume(data)
    for i, name in enumerate(CHANNELS):
        assert np.all(vol.channel(name) == i)


def test_validate_catches_violations():
    good = np.full((6, 4, 2, 2), 0.3, dtype=np.float32)
    BiomarkerVolume(good.copy()).validate()
    bad = good.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        BiomarkerVolume(bad).validate()
    bad = good.copy()
    bad[1] = 1.2
    with pytest.raises(ValueError, match="fractions"):
        BiomarkerVolume(bad).validate()
    bad = good.copy()
    bad[0], bad[1] = 0.7, 0.7
    with pytest.raises(ValueError, match="exceeds 1"):
        BiomarkerVolume(bad).validate()
    bad = good.copy()
    bad[3] = 0.0
    with pytest.raises(ValueError, match="positive"):
        BiomarkerVolume(bad).validate()


def test_mask_type():
    m = MaskVolume(np.array([[[0, 1], [1, 1]]]))
    assert m.values.dtype == np.uint8
    assert m.count == 3
    with pytest.raises(ValueError, match="binary"):
        MaskVolume(np.array([[[0, 2]]]))
    with pytest.raises(ValueError, match="Z, H, W"):
        MaskVolume(np.zeros((2, 2), dtype=np.uint8))
    sub = MaskVolume(np.array([[[0, 1], [0, 1]]]))
    sup = MaskVolume(np.array([[[0, 1], [1, 1]]]))
    assert sub.is_subset_of(sup)
    assert not sup.is_subset_of(sub)


# -- bias synthesis ----------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError, match="amplitude"):
        BiasSpec(-0.1, 4, 0)
    with pytest.raises(ValueError, match="max_sequency"):
        BiasSpec(0.1, 0, 0)
    with pytest.raises(ValueError, match="sigma"):
        NoiseSpec(-1.0, 0)
    with pytest.raises(ValueError, match="positive"):
        BiasField(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError, match="Z, H, W"):
        BiasField(np.ones((4, 4)))


def test_zero_amplitude_gives_ones():
    f = synth_bias_field(BiasSpec(0.0, 4, 9), (5, 16, 16))
    assert f.values.shape == (5, 16, 16)
    assert f.values.dtype == np.float32
    assert np.all(f.values == 1.0)


@pytest.mark.parametrize("dims", [(8, 64, 64), (5, 48, 48), (20, 64, 64)])
def test_log_mean_renormalized(dims):
    f = synth_bias_field(BiasSpec(0.15, 4, 3), dims)
    mean_log = np.log(f.values.astype(np.float64)).mean()
    assert abs(mean_log) < 1e-6


def test_geometric_mean_near_one():
    f = synth_bias_field(BiasSpec(0.2, 4, 11), (8, 64, 64))
    geo = np.exp(np.log(f.values.astype(np.float64)).mean())
    assert 0.99 <= geo <= 1.01


@pytest.mark.parametrize("k", [2, 3, 4])
def test_spectrum_confined_to_band(k):
    f = synth_bias_field(BiasSpec(0.2, k, 5), (6, 64, 64))
    log_b = np.log(f.values.astype(np.float64))
    coeffs = sequency_reorder(fwht2_batch(log_b.copy()), "to_sequency")
    outside = coeffs.copy()
    outside[:, :k, :k] = 0.0
    assert (outside**2).sum() < 1e-9 * (coeffs**2).sum()


def test_field_positive_and_smooth():
    for seed in range(5):
        f = synth_bias_field(BiasSpec(0.1, 4, seed), (10, 64, 64))
        assert f.values.min() > 0
        assert _max_inplane_step(f.values.astype(np.float64)) <= 0.1 + 1e-7


def test_large_amplitude_still_smooth():
    f = synth_bias_field(BiasSpec(0.6, 8, 2), (6, 64, 64))
    assert _max_inplane_step(f.values.astype(np.float64)) <= 0.1 + 1e-7


def test_synthesis_deterministic():
    a = synth_bias_field(BiasSpec(0.2, 4, 7), (8, 32, 32))
    b = synth_bias_field(BiasSpec(0.2, 4, 7), (8, 32, 32))
    c = synth_bias_field(BiasSpec(0.2, 4, 8), (8, 32, 32))
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != c.values.tobytes()


def test_rejects_bad_dims():
    with pytest.raises(ValueError, match="positive"):
        synth_bias_field(BiasSpec(0.1, 4, 0), (0, 16, 16))


# -- applying bias -----------------------------------------------------


def _flat_volume(value: float = 0.3) -> BiomarkerVolume:
    data = np.zeros((6, 4, 8, 8), dtype=np.float32)
    data[0] = value
    data[2:] = value
    return BiomarkerVolume(data)


def test_identity_bias_is_bitexact():
    vol = _flat_volume()
    ones = BiasField(np.ones((4, 8, 8), dtype=np.float32))
    out = apply_bias(vol, ones, NoiseSpec(0.0, 0))
    assert out.data.tobytes() == vol.data.tobytes()


def test_doubling_field():
    vol = _flat_volume(0.3)
    two = BiasField(np.full((4, 8, 8), 2.0, dtype=np.float32))
    out = apply_bias(vol, two, NoiseSpec(0.0, 0))
    assert np.allclose(out.channel("v_ep"), 0.6, atol=1e-7)
    assert np.allclose(out.channel("d_ep"), 0.6, atol=1e-7)


def test_division_recovers_input():
    vol = _flat_volume(0.3)
    field = synth_bias_field(BiasSpec(0.1, 4, 3), (4, 8, 8))
    out = apply_bias(vol, field, NoiseSpec(0.0, 0))
    recovered = out.channel("d_ep") / field.values
    assert np.max(np.abs(recovered - vol.channel("d_ep"))) < 1e-6


def test_channel_subset():
    vol = _flat_volume(0.3)
    two = BiasField(np.full((4, 8, 8), 2.0, dtype=np.float32))
    out = apply_bias(vol, two, NoiseSpec(0.0, 0), channels=("v_ep",))
    assert np.allclose(out.channel("v_ep"), 0.6)
    assert np.all(out.channel("d_ep") == vol.channel("d_ep"))


def test_apply_bias_validation():
    vol = _flat_volume()
    small = BiasField(np.ones((2, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError, match="does not match"):
        apply_bias(vol, small, NoiseSpec(0.0, 0))
    ones = BiasField(np.ones((4, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError, match="unknown channels"):
        apply_bias(vol, ones, NoiseSpec(0.0, 0), channels=("v_ep", "bogus"))


def test_noise_deterministic_and_active():
    vol = _flat_volume()
    ones = BiasField(np.ones((4, 8, 8), dtype=np.float32))
    a = apply_bias(vol, ones, NoiseSpec(0.05, 3))
    b = apply_bias(vol, ones, NoiseSpec(0.05, 3))
    c = apply_bias(vol, ones, NoiseSpec(0.05, 4))
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.tobytes() != c.data.tobytes()
    assert a.data.tobytes() != vol.data.tobytes()
    a.validate()  # clamped back to physical ranges


# -- reference corrector -----------------------------------------------


def _textured_stack(seed: int, dims=(4, 32, 32)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (1.0 + 0.05 * rng.standard_normal(dims)).astype(np.float32)


def _center_mask(dims=(4, 32, 32)) -> MaskVolume:
    m = np.zeros(dims, dtype=np.uint8)
    m[:, 4:-4, 4:-4] = 1
    return MaskVolume(m)


def test_corrector_validation():
    x = _textured_stack(0)
    mask = _center_mask()
    with pytest.raises(ValueError, match="slice stack"):
        reference_correct(x[0], mask)
    with pytest.raises(ValueError, match="mask shape"):
        reference_correct(x[:, :16], mask)
    with pytest.raises(ValueError, match="K must"):
        reference_correct(x, mask, k=0)
    with pytest.raises(ValueError, match="iters"):
        reference_correct(x, mask, iters=0)
    with pytest.raises(ValueError, match="empty mask"):
        reference_correct(x, MaskVolume(np.zeros((4, 32, 32), dtype=np.uint8)))


def test_estimate_positive_geomean_one():
    x = _textured_stack(1)
    mask = _center_mask()
    x_ref, b_est = reference_correct(x, mask)
    inside = mask.values > 0
    assert b_est.values.min() > 0
    mean_log = np.log(b_est.values.astype(np.float64))[inside].mean()
    assert abs(mean_log) < 1e-6
    assert x_ref.dtype == np.float32
    np.testing.assert_allclose(
        x_ref, x.astype(np.float64) / b_est.values.astype(np.float64), rtol=2e-6
    )


def test_reduces_known_field():
    field = synth_bias_field(BiasSpec(0.2, 4, 21), (4, 32, 32))
    x = (_textured_stack(2) * field.values).astype(np.float32)
    mask = _center_mask()
    _, b_est = reference_correct(x, mask)
    inside = mask.values > 0
    bt = field.values.astype(np.float64)
    be = b_est.values.astype(np.float64)
    rmse_est = np.sqrt(((be - bt) ** 2)[inside].mean())
    rmse_unc = np.sqrt(((1.0 - bt) ** 2)[inside].mean())
    assert rmse_est < rmse_unc


def test_near_idempotent():
    field = synth_bias_field(BiasSpec(0.2, 4, 22), (4, 32, 32))
    x = (_textured_stack(3) * field.values).astype(np.float32)
    mask = _center_mask()
    x1, _ = reference_correct(x, mask)
    x2, _ = reference_correct(x1, mask)
    change = np.sqrt(((x2.astype(np.float64) - x1.astype(np.float64)) ** 2).mean())
    scale = np.sqrt((x1.astype(np.float64) ** 2).mean())
    assert change < 0.01 * scale


def _low_energy(arr: np.ndarray, mask: MaskVolume, k: int = 4) -> float:
    """K x K DC-excluded sequency energy of the masked, centered log image."""
    inside = mask.values > 0
    log_x = np.log(np.maximum(np.asarray(arr, dtype=np.float64), 1e-4))
    centered = np.where(inside, log_x - log_x[inside].mean(), 0.0)
    padded, _ = _pad_reflect_pow2(centered)
    coeffs = sequency_reorder(fwht2_batch(padded), "to_sequency")
    block = coeffs[:, :k, :k].copy()
    block[:, 0, 0] = 0.0
    return float((block**2).sum())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_never_increases_low_sequency_energy(seed):
    field = synth_bias_field(BiasSpec(0.15, 4, 30 + seed), (4, 32, 32))
    x = (_textured_stack(40 + seed) * field.values).astype(np.float32)
    mask = _center_mask()
    x_ref, _ = reference_correct(x, mask)
    assert _low_energy(x_ref, mask) <= _low_energy(x, mask) + 1e-12


def test_corrector_deterministic():
    x = _textured_stack(5)
    mask = _center_mask()
    a_ref, a_field = reference_correct(x, mask)
    b_ref, b_field = reference_correct(x, mask)
    assert a_ref.tobytes() == b_ref.tobytes()
    assert a_field.values.tobytes() == b_field.values.tobytes()


def test_values_floored_before_log():
    x = _textured_stack(6)
    x[0, 10, 10] = 0.0  # would be -inf in log without the floor
    x_ref, b_est = reference_correct(x, _center_mask())
    assert np.all(np.isfinite(x_ref))
    assert np.all(np.isfinite(b_est.values))
