"""Augmentation bounds, image ops and file format round trips."""

import numpy as np
import pytest

from mixcrypt.errors import DataError, DimensionError, ParameterError
from mixcrypt.imaging import (
    AugmentParams,
    AugmentedImage,
    DatasetRecord,
    OracleBlock,
    abs_image,
    apply_augment,
    augment,
    central_crop16,
    definition1_epsilon,
    downsample2,
    epsilon_distance,
    identity_params,
    image_variance,
    load_dataset_bin,
    pad_or_crop_center,
    point_map,
    sample_augment_params,
    save_dataset_bin,
    save_image_ppm,
)

W = H = 32


def _rand_image(rng, h=H, w=W):
    return rng.uniform(-1, 1, (3, h, w))


# ---------------------------------------------------------------------------
# augmentation


def test_epsilon_zero_gives_identity():
    rng = np.random.default_rng(0)
    img = _rand_image(rng)
    out = augment(img, 0.0, rng)
    assert out.params.kind == "identity"
    assert np.array_equal(out.image, np.clip(img, -1, 1))


def test_epsilon_outside_range_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ParameterError):
        augment(_rand_image(rng), 1.5, rng)
    with pytest.raises(ParameterError):
        augment(_rand_image(rng), -0.1, rng)


def test_half_epsilon_examples_from_the_definition():
    # shifting left by W/4 and cropping to 3W/4 x 3H/4 are both level 0.5
    shift = AugmentParams(kind="translation", dx=-W / 4, dy=0.0)
    assert abs(definition1_epsilon(shift, W, H) - 0.5) < 1e-9
    crop = AugmentParams(kind="crop_resize", crop=(0.0, 0.0, 3 * W / 4, 3 * H / 4))
    assert definition1_epsilon(crop, W, H) <= 0.5 + 1e-9
    assert definition1_epsilon(crop, W, H) > 0.4


def test_translation_by_w8_has_distance_quarter():
    a = identity_params()
    b = AugmentParams(kind="translation", dx=W / 8, dy=0.0)
    assert abs(epsilon_distance(a, b, W, H) - 0.25) < 1e-12


def test_sampled_params_respect_definition_bound():
    rng = np.random.default_rng(42)
    for _ in range(60):
        eps = float(rng.uniform(0.05, 1.0))
        params = sample_augment_params(eps, W, H, rng)
        assert definition1_epsilon(params, W, H) <= eps + 1e-9


def test_augment_output_in_range_and_filled():
    rng = np.random.default_rng(3)
    img = _rand_image(rng)
    shifted = apply_augment(img, AugmentParams(kind="translation", dx=10.2, dy=0.0))
    assert shifted.min() >= -1 and shifted.max() <= 1
    assert np.allclose(shifted[:, :, :10], 0.0)  # out-of-frame fill is mid-gray


def test_epsilon_distance_properties():
    rng = np.random.default_rng(5)
    params = [sample_augment_params(0.4, W, H, rng) for _ in range(6)]
    for a in params:
        assert epsilon_distance(a, a, W, H) == 0.0
        for b in params:
            dab = epsilon_distance(a, b, W, H)
            assert dab >= 0.0
            assert dab == epsilon_distance(b, a, W, H)
    # triangle inequality backs the post-filter 2 * t_eps guarantee
    for a in params:
        for b in params:
            for c in params:
                assert epsilon_distance(a, b, W, H) <= (
                    epsilon_distance(a, c, W, H) + epsilon_distance(c, b, W, H) + 1e-12
                )


def test_epsilon_distance_rotation_matches_pointwise_oracle():
    rot = AugmentParams(kind="rotation", rotation_degrees=90.0)
    got = epsilon_distance(identity_params(), rot, W, H)
    # independent double loop over every pixel
    cx = cy = (W - 1) / 2.0
    worst = 0.0
    for y in range(H):
        for x in range(W):
            nx = -(y - cy) + cx
            ny = (x - cx) + cy
            worst = max(worst, 2 * abs(nx - x) / W, 2 * abs(ny - y) / H)
    assert abs(got - worst) < 1e-12


def test_composite_point_map_chains_stages():
    p = AugmentParams(
        kind="composite", rotation_degrees=90.0, dx=2.0, dy=-1.0, crop=(0.0, 0.0, W / 2, H / 2)
    )
    xs, ys = point_map(p, np.array([10.0]), np.array([4.0]), W, H)
    rx, ry = point_map(AugmentParams(kind="rotation", rotation_degrees=90.0), 10.0, 4.0, W, H)
    ex, ey = (rx + 2.0) * 2.0, (ry - 1.0) * 2.0
    assert abs(xs[0] - ex) < 1e-12 and abs(ys[0] - ey) < 1e-12


def test_copy_index_zero_must_be_identity():
    with pytest.raises(DataError):
        AugmentedImage(
            image=None, params=AugmentParams(kind="translation", dx=1.0), source_id=0, copy_index=0
        )


# ---------------------------------------------------------------------------
# plain image ops


def test_abs_image_sign_mask_invariance_and_idempotence():
    rng = np.random.default_rng(7)
    v = _rand_image(rng)
    sigma = np.where(rng.uniform(size=v.shape) < 0.5, -1.0, 1.0)
    assert np.array_equal(abs_image(sigma * v), abs_image(v))
    assert np.array_equal(abs_image(abs_image(v)), abs_image(v))
    assert abs_image(v).min() >= 0 and abs_image(v).max() <= 1


def test_image_variance_analytic_cases():
    assert image_variance(np.full((3, 8, 8), 0.25)) == 0.0
    half = np.ones((3, 8, 8))
    half[:, :, :4] = -1.0
    assert abs(image_variance(half) - 1.0) < 1e-12


def test_variance_of_rescaled_mix_monte_carlo():
    # Var(x + d / lam) == Var(x) + Var(d) / lam^2 for independent x, d
    rng = np.random.default_rng(11)
    lam = 0.6
    n = 100_000
    x = rng.normal(0.0, 0.3, n)
    d = rng.normal(0.0, 0.2, n)
    mixed = x + d / lam
    expected = 0.3**2 + 0.2**2 / lam**2
    observed = float(np.var(mixed))
    se = np.sqrt(2.0 / (n - 1)) * expected
    assert abs(observed - expected) < 3 * se


def test_central_crop_and_downsample():
    rng = np.random.default_rng(13)
    img = _rand_image(rng)
    crop = central_crop16(img)
    assert crop.shape == (3, 16, 16)
    assert np.array_equal(crop, img[:, 8:24, 8:24])

    const = np.full((3, 32, 32), 0.4)
    assert np.array_equal(central_crop16(const), np.full((3, 16, 16), 0.4))
    assert np.allclose(downsample2(const), np.full((3, 16, 16), 0.4))

    checker = np.indices((32, 32)).sum(axis=0) % 2 * 2.0 - 1.0
    board = np.stack([checker] * 3)
    assert np.allclose(downsample2(board), 0.0)


def test_downsample_ceil_and_block_duplication_round_trip():
    rng = np.random.default_rng(17)
    odd = rng.uniform(-1, 1, (3, 9, 11))
    down = downsample2(odd)
    assert down.shape == (3, 5, 6)
    # block-constant images survive the down/duplicate round trip exactly
    block = np.repeat(np.repeat(rng.uniform(-1, 1, (3, 8, 8)), 2, axis=1), 2, axis=2)
    down = downsample2(block)
    up = np.repeat(np.repeat(down, 2, axis=1), 2, axis=2)
    assert np.allclose(up, block, atol=1e-12)


def test_crop_requires_16_pixels():
    with pytest.raises(DimensionError):
        central_crop16(np.zeros((3, 12, 12)))


def test_pad_or_crop_center():
    rng = np.random.default_rng(19)
    small = rng.uniform(-1, 1, (3, 8, 8))
    padded = pad_or_crop_center(small, 16)
    assert padded.shape == (3, 16, 16)
    assert np.array_equal(padded[:, 4:12, 4:12], small)
    assert padded[:, 0, 0].sum() == 0.0


# ---------------------------------------------------------------------------
# on-disk formats


def test_ppm_range_mapping(tmp_path):
    path = tmp_path / "img.ppm"
    save_image_ppm(np.full((3, 8, 8), -1.0), path)
    raw = path.read_bytes()
    header = b"P6\n8 8\n255\n"
    assert raw.startswith(header)
    assert set(raw[len(header):]) == {0}
    save_image_ppm(np.full((3, 8, 8), 1.0), path)
    assert set(path.read_bytes()[len(header):]) == {255}


def test_dataset_round_trip_with_oracle(tmp_path):
    rng = np.random.default_rng(23)
    params = sample_augment_params(0.3, W, H, rng)
    target = AugmentedImage(image=None, params=params, source_id=3, copy_index=2, class_id=1)
    partner = AugmentedImage(image=None, params=identity_params(), source_id=5, copy_index=1, class_id=4)
    oracle = OracleBlock(
        target=target,
        partner=partner,
        lambdas=np.array([0.5, 0.2, 0.2, 0.1]),
        sign_seed=123456789,
        public_ids=(7, 9),
    )
    records = [
        DatasetRecord(image=_rand_image(rng), label=np.array([0.5, 0.2, 0.0]), oracle=oracle),
        DatasetRecord(image=_rand_image(rng), label=np.zeros(0), oracle=None),
    ]
    path = tmp_path / "set.mxd"
    save_dataset_bin(records, path)
    loaded = load_dataset_bin(path)
    assert len(loaded) == 2
    assert np.array_equal(loaded[0].image, records[0].image)
    assert np.array_equal(loaded[0].label, records[0].label)
    assert np.array_equal(loaded[1].image, records[1].image)
    orc = loaded[0].oracle
    assert orc.sign_seed == 123456789 and orc.public_ids == (7, 9) and not orc.sign_free
    assert orc.target.source_id == 3 and orc.target.copy_index == 2 and orc.target.class_id == 1
    assert orc.target.params.kind == params.kind
    assert np.allclose(
        [orc.target.params.rotation_degrees, orc.target.params.dx, orc.target.params.dy],
        [params.rotation_degrees, params.dx, params.dy],
    )
    assert orc.target.params.crop == params.crop
    assert np.array_equal(orc.lambdas, oracle.lambdas)
    assert loaded[1].oracle is None


def test_dataset_truncation_detected(tmp_path):
    rng = np.random.default_rng(29)
    path = tmp_path / "set.mxd"
    save_dataset_bin([DatasetRecord(image=_rand_image(rng), label=np.zeros(2))], path)
    raw = path.read_bytes()
    bad = tmp_path / "trunc.mxd"
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(Exception):
        load_dataset_bin(bad)
    bad_magic = tmp_path / "magic.mxd"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(Exception):
        load_dataset_bin(bad_magic)
