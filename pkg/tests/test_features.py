import numpy as np
import pytest

from mdfsc import autoencoder as ae
from mdfsc import features as ft
from mdfsc import ndnum as nn
from mdfsc import pipeline as pl
from mdfsc.errors import ContractError, LoadError


@pytest.fixture(scope="module")
def desk():
    return ae.build(ae.ArchSpec(), np.random.default_rng(0))


def rec(side, seed=0, id_="im"):
    x = np.random.default_rng(seed).standard_normal((1, 3, side, side)).astype(np.float32)
    return pl.ImageRecord(id_, x, "normal")


def test_desk_dimension(desk):
    v = ft.multiscale_feature(desk, rec(16).pixels)
    assert v.values.shape == (448,) and ft.feature_dim(desk.arch) == 448
    assert np.all(np.isfinite(v.values))


def test_full_width_dimension():
    arch = ae.ArchSpec(stage_widths=ae.FULL_WIDTHS)
    assert ft.feature_dim(arch) == (128 + 256 + 512) * 4 == 3584
    m = ae.build(arch, np.random.default_rng(0))
    assert ft.multiscale_feature(m, rec(16).pixels).values.shape == (3584,)


def test_identical_patches_identical_features(desk):
    p = rec(16, 3).pixels
    assert np.array_equal(ft.multiscale_feature(desk, p).values,
                          ft.multiscale_feature(desk, p.copy()).values)


def test_matches_manual_composition(desk):
    p = rec(16, 4).pixels
    f1 = ae.encode_tap(desk, p, "stage4_last")
    f2 = ae.encode_tap(desk, nn.downscale(p, 2), "stage3_last")
    f3 = ae.encode_tap(desk, nn.downscale(p, 4), "stage2_last")
    manual = np.concatenate([f1, f2, f3], axis=1).reshape(-1)
    assert np.array_equal(ft.multiscale_feature(desk, p).values, manual)


def test_batched_equals_single(desk):
    ps = np.random.default_rng(5).standard_normal((7, 3, 16, 16)).astype(np.float32)
    batch = ft.multiscale_features(desk, ps, chunk=3)
    for i in range(7):
        np.testing.assert_allclose(batch[i], ft.multiscale_feature(desk, ps[i:i + 1]).values,
                                   rtol=1e-6, atol=1e-6)


def test_larger_patch_scales_dimension(desk):
    assert ft.multiscale_features(desk, rec(24).pixels).shape == (1, 112 * 9)


def test_patch_contract(desk):
    with pytest.raises(ContractError):
        ft.multiscale_feature(desk, rec(12).pixels)
    with pytest.raises(ContractError):
        ft.multiscale_features(desk, np.zeros((3, 16, 16), np.float32))


def test_build_matrix_counts(desk):
    F = ft.build_feature_matrix(desk, [rec(16)], budget_per_image=500, rng=0)
    assert (F.d, F.m) == (448, 1)
    imgs = [rec(24, 1, "a"), rec(24, 2, "b")]  # 25 grid patches each
    F = ft.build_feature_matrix(desk, imgs, budget_per_image=10, rng=0)
    assert F.m == 20 and F.image_ids == ["a"] * 10 + ["b"] * 10
    F = ft.build_feature_matrix(desk, imgs, budget_per_image=100, rng=0)
    assert F.m == 50


def test_build_matrix_columns_are_patch_features(desk):
    img = rec(24, 6)
    F = ft.build_feature_matrix(desk, [img], budget_per_image=5, rng=1)
    assert len({tuple(c) for c in F.coords.tolist()}) == 5  # without replacement
    for j, (r, c) in enumerate(F.coords.tolist()):
        ref = ft.multiscale_feature(desk, img.pixels[:, :, r:r + 16, c:c + 16]).values
        np.testing.assert_allclose(F.values[:, j], ref, rtol=1e-6, atol=1e-6)


def test_build_matrix_deterministic(desk):
    imgs = [rec(24, 1, "a"), rec(24, 2, "b")]
    a = ft.build_feature_matrix(desk, imgs, 7, rng=3)
    b = ft.build_feature_matrix(desk, imgs, 7, rng=3)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.coords, b.coords)


def test_build_matrix_contract(desk):
    with pytest.raises(ContractError):
        ft.build_feature_matrix(desk, [], 10, rng=0)
    with pytest.raises(ContractError):
        ft.build_feature_matrix(desk, [rec(16)], 0, rng=0)


def test_matrix_export(tmp_path, desk):
    F = ft.build_feature_matrix(desk, [rec(24)], 4, rng=0)
    ft.save_matrix(F, tmp_path / "f.bin")
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:7] == b"MDFSCF1"
    assert int.from_bytes(raw[7:11], "little") == 448 and int.from_bytes(raw[11:19], "little") == 4
    # column-major: the first d floats are column 0
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4", 448, 19), F.values[:, 0])
    assert np.array_equal(ft.load_matrix(tmp_path / "f.bin").values, F.values)
    (tmp_path / "g.bin").write_bytes(raw[:-4])
    with pytest.raises(LoadError):
        ft.load_matrix(tmp_path / "g.bin")
