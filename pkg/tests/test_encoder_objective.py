import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrgeo import tensor as T
from mrgeo.config import ConfigError, EncoderConfig, LossConfig, RunConfig, apply_overrides
from mrgeo.data import SceneImage, generate_pair
from mrgeo.encoder import EncodeError, Encoder, encode, init_params, patchify
from mrgeo.gradcheck import TINY_ENCODER, encoder_suite, loss_suite
from mrgeo.maps import View
from mrgeo.objective import (
    AdamW,
    NormalizationError,
    cosine_lr,
    epoch_batches,
    info_nce,
    info_nce_batch,
    train,
    train_step,
)
from mrgeo.rgam import region_descriptor
from mrgeo.tensor import Tensor

SMALL = EncoderConfig(channels=8, patch=4, blocks=2, street_size=(8, 32), satellite_size=(16, 16))


def unit(v):
    v = np.asarray(v, dtype=float)
    return Tensor(v / np.linalg.norm(v))


def pair(cfg=SMALL, seed=0, scene=0):
    return generate_pair(seed, scene, cfg.street_size, cfg.satellite_size)


# -- encoder -------------------------------------------------------------------

@pytest.mark.parametrize("cfg", [SMALL, EncoderConfig(), TINY_ENCODER,
                                 EncoderConfig(channels=8, sarm=False, ccm="fc",
                                               street_size=(8, 32), satellite_size=(16, 16))])
def test_descriptor_length_and_norm(cfg):
    enc = Encoder.create(cfg, seed=1)
    street, sat = pair(cfg)
    for img in (street, sat):
        d = enc.encode(img)
        assert d.dim == 4 * cfg.channels == cfg.descriptor_dim
        assert abs(np.linalg.norm(d.values.data) - 1.0) <= 1e-9


def test_identical_images_identical_descriptors():
    enc = Encoder.create(SMALL, 0)
    a, _ = pair(scene=3)
    b, _ = pair(scene=3)
    assert np.array_equal(enc.encode(a).values.data, enc.encode(b).values.data)


def test_views_differ_only_by_grid():
    cfg = EncoderConfig(channels=8, street_size=(16, 16), satellite_size=(16, 16))
    enc = Encoder.create(cfg, 2)
    pixels = np.random.default_rng(0).random((3, 16, 16))
    street = enc.encode(SceneImage(pixels, 0, View.STREET)).values.data
    sat = enc.encode(SceneImage(pixels, 0, View.SATELLITE)).values.data
    fmap = enc.features(pixels[None], View.STREET)
    assert np.array_equal(fmap.data, enc.features(pixels[None], View.SATELLITE).data)
    np.testing.assert_array_equal(street, region_descriptor(fmap, cfg.street_grid).data[0])
    np.testing.assert_array_equal(sat, region_descriptor(fmap, cfg.satellite_grid).data[0])
    assert not np.allclose(street, sat)


def test_batch_encode_matches_single():
    enc = Encoder.create(SMALL, 3)
    imgs = [pair(scene=i)[0] for i in range(3)]
    batch = enc.encode_batch(imgs).values.data
    for i, img in enumerate(imgs):
        np.testing.assert_allclose(batch[i], enc.encode(img).values.data, atol=1e-14)


def test_module_level_encode_uses_given_params():
    params = init_params(SMALL, 4)
    img = pair()[1]
    np.testing.assert_array_equal(encode(img, SMALL, params).values.data,
                                  Encoder(SMALL, params).encode(img).values.data)


def test_shared_weights_visible_from_both_views():
    enc = Encoder.create(SMALL, 5)
    street, sat = pair()
    before = enc.encode(street).values.data, enc.encode(sat).values.data
    w = enc.params["embed.weight"]
    w.assign(w.data * 1.5 + 0.01)
    after = enc.encode(street).values.data, enc.encode(sat).values.data
    assert not np.allclose(before[0], after[0]) and not np.allclose(before[1], after[1])
    assert enc._sarm[0].wq_global is enc.params["blocks.0.sarm.wq_global"]


def test_wrong_image_size_names_stage():
    enc = Encoder.create(SMALL, 0)
    bad = SceneImage(np.zeros((3, 8, 30)), 0, View.STREET)
    with pytest.raises(EncodeError, match="patchify"):
        enc.encode(bad)


def test_patchify_order():
    px = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    out = patchify(px, 2)
    assert out.shape == (2, 4, 12)
    np.testing.assert_array_equal(out[1, 1], px[1, :, 0:2, 2:4].reshape(-1))


def test_param_mismatch_rejected():
    params = init_params(SMALL, 0)
    params.pop("embed.bias")
    with pytest.raises(ValueError, match="missing"):
        Encoder(SMALL, params)
    params = init_params(SMALL, 0)
    params["embed.bias"] = Tensor(np.zeros(3))
    with pytest.raises(ValueError, match="embed.bias"):
        Encoder(SMALL, params)


def test_disabled_blocks_are_identity_and_rgam_off_is_length_c():
    cfg = EncoderConfig(channels=8, sarm=False, ccm="off", rgam=False,
                        street_size=(8, 32), satellite_size=(16, 16))
    enc = Encoder.create(cfg, 0)
    assert set(enc.params) == {"embed.weight", "embed.bias"}
    assert enc.encode(pair(cfg)[0]).dim == 8 == cfg.descriptor_dim


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(channels=6)
    with pytest.raises(ConfigError):
        EncoderConfig(blocks=0)
    with pytest.raises(ConfigError):
        LossConfig(tau=0.0)


def test_encoder_gradients_pass_fd():
    results = encoder_suite()
    assert all(r.passed() for r in results), [r for r in results if not r.passed()]
    assert len(results) == len(init_params(TINY_ENCODER, 0))


# -- loss ----------------------------------------------------------------------

def test_info_nce_closed_forms():
    e1, e2, e3 = np.eye(3)
    one = LossConfig(tau=1.0)
    loss = info_nce(unit(e1), [unit(e1), unit(e2)], 0, one).item()
    assert abs(loss - math.log1p(math.exp(-1))) <= 1e-9
    assert info_nce(unit(e1), [unit(e1)], 0, one).item() == 0.0
    assert abs(info_nce(unit(e1), [unit(e2), unit(e3)], 0, one).item() - math.log(2)) <= 1e-9


def test_info_nce_rejects_unnormalized():
    with pytest.raises(NormalizationError):
        info_nce(Tensor([1.0, 1.0]), [unit([1, 0])], 0)
    with pytest.raises(NormalizationError):
        info_nce(unit([1, 0]), [Tensor([2.0, 0.0])], 0)
    with pytest.raises(IndexError):
        info_nce(unit([1, 0]), [unit([1, 0])], 1)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(2, 8), st.floats(0.01, 2.0), st.integers(0, 2**32 - 1))
def test_info_nce_nonnegative(n_refs, dim, tau, seed):
    rng = np.random.default_rng(seed)
    refs = [unit(rng.normal(size=dim)) for _ in range(n_refs)]
    loss = info_nce(unit(rng.normal(size=dim)), refs, int(rng.integers(n_refs)),
                    LossConfig(tau=tau)).item()
    assert loss >= 0.0


def test_batch_loss_is_mean_of_single_losses():
    rng = np.random.default_rng(0)
    q = T.l2_normalize(Tensor(rng.normal(size=(4, 6))))
    r = T.l2_normalize(Tensor(rng.normal(size=(4, 6))))
    cfg = LossConfig(tau=0.3)
    rows = [Tensor(r.data[i]) for i in range(4)]
    singles = [info_nce(Tensor(q.data[i]), rows, i, cfg).item() for i in range(4)]
    assert abs(info_nce_batch(q, r, cfg).item() - np.mean(singles)) <= 1e-12
    back = [info_nce(Tensor(r.data[i]), [Tensor(q.data[j]) for j in range(4)], i, cfg).item()
            for i in range(4)]
    sym = info_nce_batch(q, r, LossConfig(tau=0.3, symmetric=True)).item()
    assert abs(sym - 0.5 * (np.mean(singles) + np.mean(back))) <= 1e-12


def test_loss_gradients_pass_fd():
    results = loss_suite()
    assert all(r.passed() for r in results), [r for r in results if not r.passed()]
    assert any(r.tensor == "query" for r in results)


# -- optimisation --------------------------------------------------------------

def test_cosine_schedule():
    base, total, warm = 1e-3, 100, 10
    lrs = [cosine_lr(s, total, warm, base) for s in range(total + 1)]
    assert lrs[0] == pytest.approx(base / warm) and lrs[warm - 1] == pytest.approx(base)
    assert lrs[warm] == pytest.approx(base)
    assert lrs[total] == pytest.approx(0.0, abs=1e-18)
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1:]))
    assert cosine_lr(55, 100, 10, 1.0) == pytest.approx(0.5)


def test_adamw_single_step_matches_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -1.0])
    p.grad = g.copy()
    opt = AdamW({"p": p}, weight_decay=0.1)
    opt.step(0.01)
    m, v = 0.1 * g, 0.001 * g * g
    update = (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.01 * (update + 0.1 * np.array(
        [1.0, -2.0])), atol=1e-15)


def test_zero_learning_rate_leaves_params_bit_identical():
    enc = Encoder.create(SMALL, 0)
    before = {k: v.numpy() for k, v in enc.params.items()}
    pairs = [pair(scene=i) for i in range(3)]
    opt = AdamW(enc.params, weight_decay=0.5)
    train_step([p[0] for p in pairs], [p[1] for p in pairs], enc, opt, LossConfig(), lr=0.0)
    for k, v in enc.params.items():
        assert np.array_equal(v.data, before[k]), k


def test_single_pair_batch_rejected():
    enc = Encoder.create(SMALL, 0)
    street, sat = pair()
    with pytest.raises(ValueError, match=">= 2"):
        train_step([street], [sat], enc, AdamW(enc.params), LossConfig(), 1e-3)


def test_epoch_batches_partition_and_determinism():
    batches = epoch_batches(7, 0, 20, 8)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(20))
    assert [len(b) for b in batches] == [8, 8, 4]
    assert all(np.array_equal(a, b) for a, b in zip(batches, epoch_batches(7, 0, 20, 8)))
    assert not np.array_equal(flat, np.concatenate(epoch_batches(7, 1, 20, 8)))
    assert [len(b) for b in epoch_batches(0, 0, 9, 4)] == [4, 4]  # trailing singleton dropped


def test_loss_trend_decreases_over_50_steps():
    cfg = apply_overrides(RunConfig(), {"steps": "50", "train_scenes": "16"})
    losses = np.array(train(cfg, seed=0).losses)
    assert len(losses) == 50
    moving = np.convolve(losses, np.ones(10) / 10, mode="valid")
    blocks = moving[::10]
    assert np.all(np.diff(blocks) < 0), blocks


def test_training_is_deterministic():
    cfg = apply_overrides(RunConfig(), {"steps": "6", "train_scenes": "8", "batch": "4",
                                        "channels": "8"})
    a, b = train(cfg, 3), train(cfg, 3)
    assert a.losses == b.losses
    for k in a.encoder.params:
        assert np.array_equal(a.encoder.params[k].data, b.encoder.params[k].data)
