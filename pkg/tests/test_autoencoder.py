import numpy as np
import pytest

from mdfsc import autoencoder as ae
from mdfsc import ndnum as nn
from mdfsc import pipeline as pl
from mdfsc.errors import ContractError, LoadError, NumericError

import gradcheck


@pytest.fixture(scope="module")
def desk():
    return ae.build(ae.ArchSpec(), np.random.default_rng(0))


def test_thirteen_convs_and_bottleneck(desk):
    enc = [k for k in desk.params if k.startswith("enc.") and k.endswith(".w")]
    assert len(enc) == 13
    assert desk.arch.bottleneck_side == 2
    assert desk.params["head.fc1.w"].shape == (256, 64 * 2 * 2)
    assert desk.params["head.fc2.w"].shape == (64 * 2 * 2, 256)


def test_forward_shape_and_finite(desk):
    x = np.random.default_rng(1).standard_normal((2, 3, 64, 64)).astype(np.float32)
    y = ae.forward(desk, x)
    assert y.shape == x.shape and np.all(np.isfinite(y))


def test_fullconv_preserves_any_divisible_size():
    m = ae.build(ae.ArchSpec(with_linear_head=False), np.random.default_rng(2))
    assert not any(k.startswith("head.") for k in m.params)
    for side in (32, 96):
        x = np.random.default_rng(3).standard_normal((1, 3, side, side)).astype(np.float32)
        assert ae.forward(m, x).shape == x.shape


def test_decoder_mirrors_encoder(desk):
    widths = desk.arch.stage_widths
    for s in range(5):
        last = desk.arch.convs_per_stage[s] - 1
        w, _ = desk.dec(s, 0)
        assert w.shape[1] == widths[s]
        w, _ = desk.dec(s, last)
        assert w.shape[0] == (3 if s == 0 else widths[s - 1])


def test_head_size_contract():
    with pytest.raises(ContractError):
        ae.build(ae.ArchSpec(input_size=48), np.random.default_rng(0))
    with pytest.raises(ContractError):
        ae.ArchSpec(latent_dim=0)


def test_build_deterministic():
    a = ae.build(ae.ArchSpec(), np.random.default_rng(7))
    b = ae.build(ae.ArchSpec(), np.random.default_rng(7))
    assert a.to_bytes() == b.to_bytes()


# -- taps ----------------------------------------------------------------------

def test_tap_shapes(desk):
    x = np.zeros((1, 3, 16, 16), np.float32)
    t4 = ae.encode_tap(desk, x, "stage4_last")
    assert t4.shape == (1, desk.arch.stage_widths[3], 2, 2)
    assert ae.encode_tap(desk, np.zeros((1, 3, 8, 8), np.float32), ae.TapName.stage3_last).shape[2:] == (2, 2)
    assert ae.encode_tap(desk, np.zeros((1, 3, 4, 4), np.float32), ae.TapName.stage2_last).shape[2:] == (2, 2)
    with pytest.raises(ContractError):
        ae.encode_tap(desk, np.zeros((1, 3, 4, 4), np.float32), "stage4_last")


def _manual_prefix(model, x, stop):
    """Encoder prefix composed directly from the kernel ops."""
    h = x
    for s in range(stop + 1):
        if s > 0:
            h, _ = nn.maxpool2(h)
        for j in range(model.arch.convs_per_stage[s]):
            w, b = model.enc(s, j)
            h = nn.relu(nn.conv2d(h, w, b))
    return h


@pytest.mark.parametrize("tap", list(ae.TapName))
def test_tap_equals_truncated_forward(desk, tap):
    for x in (np.zeros((1, 3, 16, 16), np.float32),
              np.random.default_rng(4).standard_normal((2, 3, 16, 16)).astype(np.float32)):
        assert np.array_equal(ae.encode_tap(desk, x, tap), _manual_prefix(desk, x, tap.stage))


# -- gradients -----------------------------------------------------------------

def test_end_to_end_gradient_float32():
    assert gradcheck.autoencoder_error(np.float32) <= 1e-3
    assert gradcheck.autoencoder_error(np.float32, with_head=False) <= 1e-3


def test_end_to_end_gradient_float64():
    assert gradcheck.autoencoder_error(np.float64, seed=1) <= 1e-4


# -- training ------------------------------------------------------------------

def _small_normals(n, seed=0):
    cfg = pl.SynthConfig(n_normal=n, n_anomalous=0, size=64, train_fraction=1.0)
    train, _ = pl.synth_dataset(cfg, seed)
    stats = pl.fit_norm_stats(train)
    return [pl.apply_norm(im, stats) for im in train]


def test_zero_epochs_changes_nothing():
    m = ae.build(ae.ArchSpec(), np.random.default_rng(0))
    rep = ae.train(m, _small_normals(2), 0, rng=0)
    assert rep.steps == 0 and rep.epoch_losses == []
    assert [p.value.tobytes() for p in m.parameters()] == \
           [p.value.tobytes() for p in ae.build(ae.ArchSpec(), np.random.default_rng(0)).parameters()]


def test_training_deterministic():
    imgs = _small_normals(3)
    reports, blobs = [], []
    for _ in range(2):
        m = ae.build(ae.ArchSpec(), np.random.default_rng(1))
        reports.append(ae.train(m, imgs, 2, batch_size=2, rng=5))
        blobs.append(m.to_bytes())
    assert reports[0] == reports[1] and blobs[0] == blobs[1]


@pytest.mark.parametrize("seed", range(5))
def test_training_reduces_heldout_loss(seed):
    imgs = _small_normals(10, seed)
    train_imgs, held = imgs[:8], imgs[8:]
    crops = ae.holdout_crops(held, 64, 2, np.random.default_rng(seed))
    m = ae.build(ae.ArchSpec(), np.random.default_rng(seed))
    before = ae.reconstruction_loss(m, crops)
    rep = ae.train(m, train_imgs, 4, batch_size=4, lr=1e-3, rng=seed, holdout=crops)
    assert rep.holdout_losses[-1] < before
    assert rep.holdout_losses[-1] < rep.holdout_losses[0] or rep.holdout_losses[0] < before


def _constant_image():
    return pl.ImageRecord("c", np.full((1, 3, 64, 64), 0.5, np.float32), "normal")


@pytest.mark.xfail(strict=True, reason="50 single-image Adam steps at lr 1e-4 reach ~2e-2, not 1e-3")
def test_memorize_constant_image_default_schedule():
    m = ae.build(ae.ArchSpec(), np.random.default_rng(0))
    rep = ae.train(m, [_constant_image()], 50, rng=0)
    assert rep.final_loss < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_memorize_constant_image_progress(seed):
    m = ae.build(ae.ArchSpec(), np.random.default_rng(seed))
    rep = ae.train(m, [_constant_image()], 50, lr=1e-3, rng=seed)
    assert rep.final_loss < min(rep.epoch_losses[0] / 10, 0.05)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_rejects_anomalous_and_nan():
    m = ae.build(ae.ArchSpec(), np.random.default_rng(0))
    bad = pl.ImageRecord("a", np.zeros((1, 3, 64, 64), np.float32), "anomalous")
    with pytest.raises(ContractError):
        ae.train(m, [bad], 1)
    m.params["enc.s0.c0.b"].value[:] = np.inf
    with pytest.raises(NumericError, match="learning rate"):
        ae.train(m, [_constant_image()], 1, rng=0)


# -- persistence ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, desk):
    desk.norm_stats = pl.NormStats(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    d1 = ae.save(desk, tmp_path / "a.ckpt")
    back = ae.load(tmp_path / "a.ckpt")
    d2 = ae.save(back, tmp_path / "b.ckpt")
    assert d1 == d2 and (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.arch == desk.arch
    assert np.array_equal(back.norm_stats.std, desk.norm_stats.std)
    x = np.random.default_rng(5).standard_normal((1, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(ae.encode_tap(back, x, "stage4_last"), ae.encode_tap(desk, x, "stage4_last"))


def test_checkpoint_corruption(tmp_path, desk):
    ae.save(desk, tmp_path / "a.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    for pos in (0, 20, len(data) // 2, len(data) - 1):
        bad = bytearray(data)
        bad[pos] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
        with pytest.raises(LoadError):
            ae.load(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(data[:-100])
    with pytest.raises(LoadError):
        ae.load(tmp_path / "short.ckpt")
