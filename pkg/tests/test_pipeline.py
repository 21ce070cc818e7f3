"""Multi-resolution driver and chunked-execution tests."""

import numpy as np
import pytest

from voxelreg import regcore
from voxelreg.pipeline import (
    LevelParams,
    RegistrationConfig,
    chunked_dsv_execution,
    compose_fields,
    register,
)
from voxelreg.synth import make_pair, smooth_random_volume
from voxelreg.volume import (
    DisplacementField,
    VolumeHeader,
    save_volume,
    warp_labels,
    zero_field,
)
from voxelreg.features import normalize_intensity


def single_level(q=1.0, l_max=2.0, patch_radius=1, alpha=0.0, **kw):
    return RegistrationConfig(
        levels=(LevelParams(factor=1, q=q, l_max=l_max, patch_radius=patch_radius, alpha=alpha),),
        **kw,
    )


def mean_jc(a, b):
    """Mean Jaccard over the nonzero labels of either volume, plain loops."""
    labels = sorted((set(np.unique(a)) | set(np.unique(b))) - {0})
    vals = []
    for lab in labels:
        ma, mb = a == lab, b == lab
        union = np.logical_or(ma, mb).sum()
        inter = np.logical_and(ma, mb).sum()
        vals.append(100.0 * inter / union)
    return sum(vals) / len(vals)


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_config_rejects_increasing_factors():
    with pytest.raises(ValueError):
        RegistrationConfig(levels=(LevelParams(factor=1), LevelParams(factor=2)))


def test_config_requires_final_factor_one():
    with pytest.raises(ValueError):
        RegistrationConfig(levels=(LevelParams(factor=2),))


def test_config_requires_divisible_factors():
    with pytest.raises(ValueError):
        RegistrationConfig(
            levels=(LevelParams(factor=3), LevelParams(factor=2), LevelParams(factor=1))
        )


def test_config_external_requires_paths():
    with pytest.raises(ValueError):
        RegistrationConfig(feature="external")


def test_config_roundtrips_via_dict():
    cfg = single_level(q=2.0, l_max=4.0, feature="edge", standardize=True)
    back = RegistrationConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_config_json_loading(tmp_path):
    import json

    cfg = single_level(q=1.0, l_max=2.0, feature="ssc", memory_budget_mb=64)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert RegistrationConfig.from_json(p) == cfg


# ---------------------------------------------------------------------------
# compose_fields
# ---------------------------------------------------------------------------

def test_compose_zero_fields():
    z = zero_field((3, 3, 3))
    out = compose_fields(z, z)
    assert np.all(out.data == 0.0)


def test_compose_constant_fields():
    a = DisplacementField(
        VolumeHeader((2, 2, 2), channels=3),
        np.broadcast_to(np.array([1.0, 0, 0], np.float32), (2, 2, 2, 3)).copy(),
    )
    b = DisplacementField(
        VolumeHeader((2, 2, 2), channels=3),
        np.broadcast_to(np.array([0.0, 2.0, 0], np.float32), (2, 2, 2, 3)).copy(),
    )
    out = compose_fields(a, b)
    assert np.allclose(out.data, [1.0, 2.0, 0.0])


def test_compose_matches_sum_oracle():
    rng = np.random.default_rng(60)
    da = rng.uniform(-2, 2, size=(3, 4, 5, 3)).astype(np.float32)
    db = rng.uniform(-2, 2, size=(3, 4, 5, 3)).astype(np.float32)
    header = VolumeHeader((5, 4, 3), channels=3)
    out = compose_fields(DisplacementField(header, da), DisplacementField(header, db))
    assert np.array_equal(out.data, da + db)


def test_compose_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        compose_fields(zero_field((2, 2, 2)), zero_field((3, 3, 3)))


# ---------------------------------------------------------------------------
# Chunked execution
# ---------------------------------------------------------------------------

def unchunked_field(f_fixed, f_moving, ds, radius, sigma):
    dsv = regcore.build_dsv(f_fixed, f_moving, ds)
    dsv = regcore.aggregate_costs(dsv, radius)
    dsv = regcore.regularize_dsv(dsv, sigma)
    return regcore.winner_takes_all(dsv, ds)


def random_feature_pair(seed, n=8, channels=2):
    rng = np.random.default_rng(seed)
    from scipy import ndimage
    from voxelreg.volume import FeatureVolume

    def mk():
        data = np.stack(
            [ndimage.gaussian_filter(rng.standard_normal((n, n, n)), 1.2) for _ in range(channels)],
            axis=-1,
        ).astype(np.float32)
        return FeatureVolume(VolumeHeader((n, n, n), channels=channels), data)

    return mk(), mk()


def test_chunked_big_budget_matches_unchunked():
    f_fixed, f_moving = random_feature_pair(61)
    ds = regcore.build_displacement_set(1.0, 1.0)
    want = unchunked_field(f_fixed, f_moving, ds, 1, 1.0)
    got = chunked_dsv_execution(f_fixed, f_moving, ds, 1, 1.0, 1 << 30)
    assert np.array_equal(got.data, want.data)


def test_chunked_small_budget_bit_identical():
    f_fixed, f_moving = random_feature_pair(62)
    ds = regcore.build_displacement_set(1.0, 1.0)  # 27 labels
    want = unchunked_field(f_fixed, f_moving, ds, 1, 0.8)
    map_bytes = 8 * 8 * 8 * 8
    budget = 6 * map_bytes  # forces ceil(27 / 6) = 5 batches
    got = chunked_dsv_execution(f_fixed, f_moving, ds, 1, 0.8, budget)
    assert np.array_equal(got.data, want.data)


def test_chunked_budget_below_one_map_errors():
    f_fixed, f_moving = random_feature_pair(63)
    ds = regcore.build_displacement_set(1.0, 1.0)
    with pytest.raises(ValueError):
        chunked_dsv_execution(f_fixed, f_moving, ds, 0, 0.0, 100)


def test_chunked_preserves_tiebreak_on_constant_features():
    # constant features tie every candidate; the zero displacement must win
    from voxelreg.volume import FeatureVolume

    data = np.full((6, 6, 6, 2), 0.5, dtype=np.float32)
    fv = FeatureVolume(VolumeHeader((6, 6, 6), channels=2), data)
    ds = regcore.build_displacement_set(1.0, 2.0)
    got = chunked_dsv_execution(fv, fv, ds, 1, 1.0, 40 * 6 * 6 * 6 * 8)
    assert np.all(got.data == 0.0)


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

def test_register_self_gives_zero_field_every_feature():
    vol = smooth_random_volume((12, 12, 12), seed=64)
    for feature in ("intensity", "edge", "ssc"):
        field, warped = register(vol, vol, single_level(feature=feature))
        assert np.all(field.data == 0.0), feature
        assert np.array_equal(warped.data, vol.data), feature


def test_register_recovers_integer_translation():
    case = make_pair(
        "translation", (32, 32, 32), seed=65, translation=(2.0, 0.0, 0.0), noise_sigma=1.2
    )
    cfg = single_level(q=1.0, l_max=4.0, patch_radius=2, alpha=0.0, feature="intensity")
    field, warped = register(case["fixed"], case["moving"], cfg)
    m = 6  # l_max + patch_radius
    interior = field.data[m:-m, m:-m, m:-m]
    assert np.all(interior == np.array([2.0, 0.0, 0.0], dtype=np.float32))
    # the warped moving image must match the fixed one on the interior
    err = np.abs(warped.data - case["fixed"].data)[m:-m, m:-m, m:-m]
    assert err.max() < 1e-5


def test_register_two_level_translation():
    case = make_pair(
        "translation", (24, 24, 24), seed=66, translation=(2.0, -2.0, 0.0), noise_sigma=1.5
    )
    cfg = RegistrationConfig(
        feature="intensity",
        levels=(
            LevelParams(factor=2, q=1.0, l_max=2.0, patch_radius=1, alpha=0.0),
            LevelParams(factor=1, q=1.0, l_max=1.0, patch_radius=1, alpha=0.0),
        ),
    )
    field, _ = register(case["fixed"], case["moving"], cfg)
    m = 7
    interior = field.data[m:-m, m:-m, m:-m]
    assert np.all(interior == np.array([2.0, -2.0, 0.0], dtype=np.float32))


def test_register_sinusoid_improves_label_overlap():
    case = make_pair(
        "sinusoid",
        (32, 32, 32),
        seed=67,
        amplitude=2.0,
        period=16.0,
        num_blobs=12,
        min_radius=3.0,
        max_radius=5.0,
    )
    cfg = RegistrationConfig(
        feature="ssc",
        levels=(
            LevelParams(factor=2, q=1.0, l_max=2.0, patch_radius=1, alpha=1.0),
            LevelParams(factor=1, q=1.0, l_max=1.0, patch_radius=1, alpha=1.0),
        ),
    )
    field, _ = register(case["fixed"], case["moving"], cfg)
    before = mean_jc(case["fixed_labels"].data, case["moving_labels"].data)
    warped = warp_labels(case["moving_labels"], field)
    after = mean_jc(case["fixed_labels"].data, warped.data)
    assert after > before


def test_register_external_features_match_builtin_intensity(tmp_path):
    case = make_pair("translation", (16, 16, 16), seed=68, translation=(1.0, 0.0, 0.0))
    fixed, moving = case["fixed"], case["moving"]
    save_volume(normalize_intensity(fixed, 1.0, 99.0), tmp_path / "ff")
    save_volume(normalize_intensity(moving, 1.0, 99.0), tmp_path / "fm")
    cfg_ext = single_level(
        q=1.0,
        l_max=2.0,
        feature="external",
        external_fixed=str(tmp_path / "ff"),
        external_moving=str(tmp_path / "fm"),
    )
    cfg_int = single_level(q=1.0, l_max=2.0, feature="intensity")
    field_ext, _ = register(fixed, moving, cfg_ext)
    field_int, _ = register(fixed, moving, cfg_int)
    assert np.array_equal(field_ext.data, field_int.data)


def test_register_external_rejects_dim_mismatch(tmp_path):
    case = make_pair("translation", (16, 16, 16), seed=69)
    bad = smooth_random_volume((12, 12, 12), seed=70)
    save_volume(normalize_intensity(bad, 1.0, 99.0), tmp_path / "bad")
    save_volume(normalize_intensity(case["fixed"], 1.0, 99.0), tmp_path / "ok")
    cfg = single_level(
        feature="external",
        external_fixed=str(tmp_path / "ok"),
        external_moving=str(tmp_path / "bad"),
    )
    with pytest.raises(ValueError):
        register(case["fixed"], case["moving"], cfg)


def test_register_rejects_too_small_volume():
    vol = smooth_random_volume((6, 6, 6), seed=71)
    with pytest.raises(ValueError):
        register(vol, vol, single_level(q=1.0, l_max=4.0))


def test_register_is_deterministic():
    case = make_pair("sinusoid", (16, 16, 16), seed=72, amplitude=1.5, period=12.0)
    cfg = single_level(q=1.0, l_max=2.0, patch_radius=1, alpha=1.0, feature="ssc")
    f1, w1 = register(case["fixed"], case["moving"], cfg)
    f2, w2 = register(case["fixed"], case["moving"], cfg)
    assert np.array_equal(f1.data, f2.data)
    assert np.array_equal(w1.data, w2.data)


def test_register_with_standardization():
    case = make_pair(
        "translation", (32, 32, 32), seed=73, translation=(1.0, 0.0, 0.0), noise_sigma=1.2
    )
    moving_scaled = case["moving"]
    # rescale the moving intensities; standardization should undo this
    from voxelreg.volume import ScalarVolume

    scaled = ScalarVolume(moving_scaled.header, moving_scaled.data * 3.0 + 10.0)
    cfg = single_level(
        q=1.0, l_max=2.0, patch_radius=1, alpha=0.0, feature="intensity", standardize=True
    )
    field, _ = register(case["fixed"], scaled, cfg)
    m = 3
    interior = field.data[m:-m, m:-m, m:-m]
    assert np.all(interior == np.array([1.0, 0.0, 0.0], dtype=np.float32))


def test_memory_budget_env_var(monkeypatch):
    cfg = single_level()
    monkeypatch.setenv("REG_MEMORY_BUDGET_MB", "7")
    assert cfg.budget_bytes() == 7 * 1024 * 1024
    monkeypatch.delenv("REG_MEMORY_BUDGET_MB")
    assert cfg.budget_bytes() == 1024 * 1024 * 1024
    explicit = single_level(memory_budget_mb=3)
    monkeypatch.setenv("REG_MEMORY_BUDGET_MB", "7")
    assert explicit.budget_bytes() == 3 * 1024 * 1024
