"""Network construction, forwards, losses, and checkpoint sidecars."""

import numpy as np
import pytest

from fisheyex import autodiff as ad
from fisheyex.distortion import DistortionLevelVector
from fisheyex.errors import CheckpointError, NumericError
from fisheyex.networks import (
    Critic,
    CriticConfig,
    DistortionPerceiver,
    GeneratorConfig,
    OutpaintGenerator,
    PerceptionConfig,
    RevisionConfig,
    SceneReviser,
    config_fingerprint,
    config_text,
    distortion_loss,
    load_net,
    outpaint_forward,
    perceive_distortion,
    pyramid_recon_loss,
    revise_scene,
    save_net,
    stage1_total_loss,
    wgan_losses,
)

GEN_CFG = GeneratorConfig(base_channels=4, dilation_rates=(2, 4))
PERC_CFG = PerceptionConfig(channels=(4, 8), hidden=16)
REV_CFG = RevisionConfig(base_channels=4, bottleneck_channels=8, residual_blocks=2)
CRIT_CFG = CriticConfig(base_channels=4)


def _polar_batch(seed, n=1, c=3, h=16, w=64):
    rng = np.random.default_rng(seed)
    return ad.Tensor((rng.random((n, c, h, w)) * 2 - 1).astype(np.float32))


# ------------------------------------------------------------ config text


def test_config_text_sorted_with_extras():
    text = config_text("critic", CriticConfig(), in_channels=4)
    lines = text.strip().split("\n")
    assert lines == sorted(lines)
    assert "kind=critic" in lines
    assert "in_channels=4" in lines
    assert text.endswith("\n")


def test_config_fingerprint_is_sha256_hex():
    fp = config_fingerprint("abc")
    assert len(fp) == 64
    assert fp == config_fingerprint("abc")
    assert fp != config_fingerprint("abd")


# ----------------------------------------------------------- construction


def test_same_seed_same_weights():
    a = OutpaintGenerator(GEN_CFG, seed=5)
    b = OutpaintGenerator(GEN_CFG, seed=5)
    assert a.params.names() == b.params.names()
    for name, p in a.params.items():
        assert np.array_equal(p.data, b.params[name].data)


def test_different_seed_different_weights():
    a = OutpaintGenerator(GEN_CFG, seed=5)
    b = OutpaintGenerator(GEN_CFG, seed=6)
    assert not np.array_equal(a.params["enc0c0.w"].data, b.params["enc0c0.w"].data)


def test_seed_tags_decorrelate_networks():
    # Same seed, different network kinds: the first conv must differ.
    gen = OutpaintGenerator(GeneratorConfig(base_channels=4), in_channels=4, seed=0)
    crit = Critic(CriticConfig(base_channels=4), in_channels=4, seed=0)
    assert not np.array_equal(
        gen.params["enc0c0.w"].data, crit.params["stage0.w"].data
    )
    c2 = Critic(CriticConfig(base_channels=4), in_channels=4, seed=0, seed_tag=9)
    assert not np.array_equal(crit.params["stage0.w"].data, c2.params["stage0.w"].data)


# -------------------------------------------------------------- generator


def test_generator_shape_and_range():
    gen = OutpaintGenerator(GEN_CFG, seed=1)
    x = _polar_batch(0, c=4)
    y = gen.forward(x)
    assert y.shape == (1, 3, 16, 64)
    assert np.all(np.abs(y.data) < 1.0)


def test_generator_input_validation():
    gen = OutpaintGenerator(GEN_CFG, seed=1)
    with pytest.raises(ValueError, match="expects 4 channels"):
        gen.forward(_polar_batch(0, c=3))
    with pytest.raises(ValueError, match="divisible by 4"):
        gen.forward(_polar_batch(0, c=4, h=18))


def test_generator_wrap_padding_changes_seam():
    x = _polar_batch(2, c=4)
    wrapped = OutpaintGenerator(GEN_CFG, seed=1).forward(x).data
    flat_cfg = GeneratorConfig(base_channels=4, dilation_rates=(2, 4), wrap_width=False)
    flat = OutpaintGenerator(flat_cfg, seed=1).forward(x).data
    assert not np.allclose(wrapped, flat)


def test_outpaint_forward_composites_bitwise():
    gen = OutpaintGenerator(GEN_CFG, seed=2)
    img = _polar_batch(3)
    mask = np.zeros((1, 1, 16, 64), np.float32)
    mask[:, :, 10:] = 1.0
    out = outpaint_forward(gen, img, ad.Tensor(mask))
    keep = mask[0, 0] == 0.0
    assert np.array_equal(out.data[0][:, keep], img.data[0][:, keep])
    filled = out.data[0][:, ~keep]
    assert np.all(np.abs(filled) < 1.0)
    assert not np.array_equal(filled, img.data[0][:, ~keep])


# -------------------------------------------------------------- perceiver


def test_perceiver_shape_and_vector():
    net = DistortionPerceiver(PERC_CFG, n_rho=16, rho_max=45.0, seed=3)
    y = net.forward(_polar_batch(4, n=2))
    assert y.shape == (2, 16)
    vec = perceive_distortion(net, _polar_batch(5).data[0])
    assert isinstance(vec, DistortionLevelVector)
    assert vec.values.shape == (16,)
    assert vec.rho_max == 45.0


def test_perceiver_input_validation():
    net = DistortionPerceiver(PERC_CFG, n_rho=16, rho_max=45.0, seed=3)
    with pytest.raises(ValueError, match="perceiver expects"):
        net.forward(_polar_batch(0, h=32))


def test_perceiver_theta_mean_gives_rotation_robustness():
    # Rolling the raster along theta changes nothing in the conv stack's
    # wrap-padded statistics after the theta mean, up to f32 noise.
    net = DistortionPerceiver(PERC_CFG, n_rho=16, rho_max=45.0, seed=3)
    x = _polar_batch(6).data
    rolled = np.roll(x, 8, axis=3)
    a = net.forward(ad.Tensor(x)).data
    b = net.forward(ad.Tensor(rolled)).data
    np.testing.assert_allclose(a, b, atol=1e-4)


# ---------------------------------------------------------------- reviser


def test_reviser_shape_and_validation():
    net = SceneReviser(REV_CFG, seed=4)
    x = ad.Tensor(np.random.default_rng(0).random((1, 4, 16, 16)).astype(np.float32))
    y = net.forward(x)
    assert y.shape == (1, 3, 16, 16)
    assert np.all(np.abs(y.data) < 1.0)
    with pytest.raises(ValueError, match="divisible by 4"):
        net.forward(ad.Tensor(np.zeros((1, 4, 18, 16), np.float32)))
    with pytest.raises(ValueError, match="expects 4 channels"):
        net.forward(ad.Tensor(np.zeros((1, 3, 16, 16), np.float32)))


def test_revise_scene_concatenates_level_map():
    net = SceneReviser(REV_CFG, seed=4)
    rng = np.random.default_rng(1)
    img = ad.Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
    lmap = ad.Tensor(rng.random((1, 1, 16, 16)).astype(np.float32))
    assert revise_scene(net, img, lmap).shape == (1, 3, 16, 16)


# ----------------------------------------------------------------- critic


def test_critic_scores_scalar_per_sample():
    net = Critic(CRIT_CFG, in_channels=4, seed=5)
    x = ad.Tensor(np.random.default_rng(2).random((3, 4, 16, 16)).astype(np.float32))
    assert net.forward(x).shape == (3, 1)


def test_critic_clip_bounds_weights():
    net = Critic(CRIT_CFG, in_channels=4, seed=5)
    net.params["stage0.w"].data[:] = 3.0
    net.clip()
    for _, p in net.params.items():
        assert np.all(np.abs(p.data) <= CRIT_CFG.clip_bound)


# ----------------------------------------------------------------- losses


def test_pyramid_loss_zero_for_identical():
    x = ad.Tensor(np.random.default_rng(3).random((1, 3, 8, 8)).astype(np.float32))
    assert pyramid_recon_loss(x, x.detach()).item() == 0.0


def test_pyramid_loss_hand_value():
    # Single hot pixel of unit error in a 4x4 plane: levels contribute
    # 1/16, 1/64, 1/256; equal level weights average to 21/768.
    pred = np.zeros((1, 1, 4, 4), np.float32)
    pred[0, 0, 1, 2] = 1.0
    loss = pyramid_recon_loss(ad.Tensor(pred), ad.Tensor(np.zeros_like(pred)))
    assert loss.item() == pytest.approx(21.0 / 768.0, rel=1e-6)


def test_pyramid_loss_constant_diff_is_mse():
    rng = np.random.default_rng(4)
    t = rng.random((2, 3, 8, 8)).astype(np.float32)
    pred = ad.Tensor(t + 0.5)
    loss = pyramid_recon_loss(pred, ad.Tensor(t), full_res_weight=2.0)
    assert loss.item() == pytest.approx(0.25, rel=1e-5)


def test_pyramid_loss_exclude_mask():
    pred = np.zeros((1, 1, 4, 4), np.float32)
    pred[0, 0, 0, 0] = 1.0
    excl = np.zeros((1, 1, 4, 4), np.float32)
    excl[0, 0, 0, 0] = 1.0  # hide the only error pixel at full res
    loss = pyramid_recon_loss(ad.Tensor(pred), ad.Tensor(np.zeros((1, 1, 4, 4), np.float32)), exclude_mask=excl)
    # full-res level contributes 0; coarser levels still see the blur
    assert 0.0 < loss.item() < 21.0 / 768.0
    with pytest.raises(ValueError, match="leaves no pixels"):
        pyramid_recon_loss(
            ad.Tensor(pred),
            ad.Tensor(np.zeros_like(pred)),
            exclude_mask=np.ones((1, 1, 4, 4), np.float32),
        )


def test_pyramid_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        pyramid_recon_loss(
            ad.Tensor(np.zeros((1, 1, 4, 4), np.float32)),
            ad.Tensor(np.zeros((1, 1, 4, 8), np.float32)),
        )


def test_stage1_total_loss_weights():
    assert stage1_total_loss(0.0, 1.0, 1.0).item() == pytest.approx(0.15)
    assert stage1_total_loss(0.5, 1.0, 1.0).item() == pytest.approx(0.65)
    assert stage1_total_loss(0.5).item() == pytest.approx(0.5)
    assert stage1_total_loss(0.5, None, 2.0).item() == pytest.approx(0.7)


def test_stage1_total_loss_rejects_non_finite():
    with pytest.raises(NumericError, match="l_ad"):
        stage1_total_loss(0.5, float("nan"), 1.0)
    with pytest.raises(NumericError, match="l_pr"):
        stage1_total_loss(ad.Tensor(np.float32(np.inf)))


def test_wgan_losses_sum_to_negative_real_score():
    critic = Critic(CRIT_CFG, in_channels=4, seed=6)
    rng = np.random.default_rng(5)
    real = ad.Tensor(rng.random((2, 3, 16, 16)).astype(np.float32))
    fake = ad.Tensor(rng.random((2, 3, 16, 16)).astype(np.float32))
    mask = np.zeros((2, 1, 16, 16), np.float32)
    c_loss, g_loss = wgan_losses(critic, real, fake, mask)
    with ad.no_grad():
        c_real = float(
            critic.forward(ad.concat([real, ad.Tensor(mask)], axis=1)).data.mean()
        )
    assert c_loss.item() + g_loss.item() == pytest.approx(-c_real, abs=1e-6)


def test_distortion_loss_is_mae():
    pred = ad.Tensor(np.array([[1.0, 2.0, 3.0, 4.0]], np.float32))
    gt = DistortionLevelVector(np.array([1.0, 1.0, 1.0, 1.0]), rho_max=10.0)
    assert distortion_loss(pred, gt).item() == pytest.approx(1.5)
    assert distortion_loss(pred, [1.0, 1.0, 1.0, 1.0]).item() == pytest.approx(1.5)


# ------------------------------------------------------------ persistence


def test_save_load_net_round_trip(tmp_path):
    net = OutpaintGenerator(GEN_CFG, seed=7)
    path = tmp_path / "gen.ckp"
    save_net(path, net)
    assert (tmp_path / "gen.ckp.cfg").exists()
    cfg_text = (tmp_path / "gen.ckp.cfg").read_text()
    assert f"fingerprint={net.fingerprint()}" in cfg_text

    other = OutpaintGenerator(GEN_CFG, seed=99)
    assert not np.array_equal(
        other.params["enc0c0.w"].data, net.params["enc0c0.w"].data
    )
    load_net(path, other)
    for name, p in net.params.items():
        assert np.array_equal(other.params[name].data, p.data)


def test_load_net_rejects_architecture_mismatch(tmp_path):
    net = OutpaintGenerator(GEN_CFG, seed=7)
    path = tmp_path / "gen.ckp"
    save_net(path, net)
    bigger = OutpaintGenerator(GeneratorConfig(base_channels=8, dilation_rates=(2, 4)), seed=7)
    with pytest.raises(CheckpointError, match="fingerprint mismatch"):
        load_net(path, bigger)


def test_load_net_missing_or_corrupt_sidecar(tmp_path):
    net = Critic(CRIT_CFG, in_channels=4, seed=8)
    path = tmp_path / "crit.ckp"
    save_net(path, net)
    (tmp_path / "crit.ckp.cfg").write_text("tampered\n")
    with pytest.raises(CheckpointError, match="fingerprint mismatch"):
        load_net(path, net)
    (tmp_path / "crit.ckp.cfg").unlink()
    with pytest.raises(CheckpointError, match="missing .cfg"):
        load_net(path, net)


# ----------------------------------------------- end-to-end gradient flow


def test_full_stage1_graph_backward_updates_all_params():
    gen = OutpaintGenerator(GEN_CFG, seed=9)
    perc = DistortionPerceiver(PERC_CFG, n_rho=16, rho_max=45.0, seed=9)
    img = _polar_batch(10)
    mask = np.zeros((1, 1, 16, 64), np.float32)
    mask[:, :, 12:] = 1.0
    out = outpaint_forward(gen, img, ad.Tensor(mask))
    l_pr = pyramid_recon_loss(out, _polar_batch(11))
    l_sd = distortion_loss(perc.forward(out), np.ones(16))
    total = stage1_total_loss(l_pr, None, l_sd)
    ad.backward(total)
    merged = ad.merge_params(gen.params, perc.params)
    missing = [name for name, p in merged.items() if p.grad is None]
    assert missing == []
