import numpy as np
import pytest

from repre import tensor as T
from repre.decoder import (Decoder, DecoderConfig, FuseBlock, decoder_cost_ratio, fuse_block, grid_to_tokens,
                           reconstruction_loss, tokens_to_grid)
from repre.encoder import Encoder, EncoderConfig, HierarchyFeatures
from repre.tensor import ShapeError, Tensor


def encoder(**kw):
    base = dict(image_size=16, patch_size=4, depth=4, width=16, heads=2, taps=2)
    base.update(kw)
    return Encoder(EncoderConfig(**base), np.random.default_rng(0))


def decoder_for(enc, **kw):
    cfg = DecoderConfig(taps=enc.config.taps, width=8, heads=2, **kw)
    return Decoder.for_encoder(enc, cfg, np.random.default_rng(1))


@pytest.mark.parametrize("variant,taps", [("vit", 1), ("vit", 2), ("vit", 3), ("hierarchical", 2)])
@pytest.mark.parametrize("op,layers", [("conv", 1), ("conv", 2), ("transformer", 1)])
def test_reconstruction_shape(variant, taps, op, layers, rng):
    enc = encoder(variant=variant, taps=taps)
    dec = decoder_for(enc, fusion_operator=op, fusion_layers=layers)
    images = rng.uniform(size=(2, 16, 16, 3))
    _, feats = enc(images)
    assert dec(feats).shape == images.shape


@pytest.mark.parametrize("variant", ["vit", "hierarchical"])
def test_gradients_reach_every_tap_and_decoder_parameter(variant, rng):
    enc = encoder(variant=variant, taps=2)
    dec = decoder_for(enc)
    images = rng.uniform(size=(2, 16, 16, 3))
    _, feats = enc(images)
    leaves = [Tensor(f.data, requires_grad=True) for f in feats.features]
    T.reset_tape()
    T.backward(reconstruction_loss(images, dec(HierarchyFeatures(leaves, feats.grids))))
    for leaf in leaves:
        assert np.abs(leaf.grad).max() > 0
    for name, p in dec.named_parameters():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


def test_reconstruction_loss_examples(rng):
    img = rng.uniform(size=(2, 4, 4, 3))
    assert float(reconstruction_loss(img, Tensor(img)).data) == 0.0
    assert float(reconstruction_loss(img, Tensor(img + 0.5)).data) == pytest.approx(0.5, abs=1e-15)
    signs = np.where(np.indices(img.shape).sum(axis=0) % 2 == 0, 1.0, -1.0)
    assert float(reconstruction_loss(img, Tensor(img + signs)).data) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ShapeError, match="reconstruction_loss"):
        reconstruction_loss(img, Tensor(img[:1]))


def test_single_tap_decoder_is_patchwise_translation_equivariant(rng):
    # with one tap there is no fusion: per-token projection, 1x1 head, unpatchify
    dec = Decoder(DecoderConfig(taps=1, width=8), [6], 2, np.random.default_rng(0))
    grid = rng.standard_normal((1, 3, 4, 6))
    shifted = np.roll(grid, 1, axis=2)
    out = dec(HierarchyFeatures([Tensor(grid.reshape(1, 12, 6))], [(3, 4)])).data
    out_s = dec(HierarchyFeatures([Tensor(shifted.reshape(1, 12, 6))], [(3, 4)])).data
    np.testing.assert_allclose(np.roll(out, 2, axis=2), out_s, atol=1e-12)


def test_zero_head_gives_bias_image(rng):
    enc = encoder()
    dec = decoder_for(enc)
    dec.head.weight.data = np.zeros_like(dec.head.weight.data)
    dec.head.bias.data = np.full_like(dec.head.bias.data, 0.25)
    _, feats = enc(rng.uniform(size=(1, 16, 16, 3)))
    np.testing.assert_array_equal(dec(feats).data, np.full((1, 16, 16, 3), 0.25))


def test_fuse_block_alignment(rng):
    cfg = DecoderConfig(width=4)
    blk = FuseBlock(6, 4, cfg, np.random.default_rng(0))
    assert blk.align is not None
    out = fuse_block(Tensor(rng.standard_normal((1, 2, 2, 6))), Tensor(rng.standard_normal((1, 4, 4, 4))), blk)
    assert out.shape == (1, 4, 4, 4)
    assert (out.data >= 0).all()  # conv fusion ends in ReLU
    with pytest.raises(ShapeError, match="cannot align"):
        fuse_block(Tensor(np.zeros((1, 3, 3, 6))), Tensor(np.zeros((1, 4, 4, 4))), blk)


def test_tokens_grid_round_trip(rng):
    tok = Tensor(rng.standard_normal((2, 6, 5)))
    grid = tokens_to_grid(tok, 2, 3)
    assert grid.shape == (2, 2, 3, 5)
    np.testing.assert_array_equal(grid.data[1, 1, 2], tok.data[1, 5])
    assert np.array_equal(grid_to_tokens(grid).data, tok.data)
    with pytest.raises(ShapeError):
        tokens_to_grid(tok, 2, 2)


def test_config_validation():
    with pytest.raises(ValueError, match="fusion_layers"):
        DecoderConfig(fusion_layers=3).validate()
    with pytest.raises(ValueError, match="operator"):
        DecoderConfig(fusion_operator="mlp").validate()
    enc = encoder(taps=2)
    with pytest.raises(ValueError, match="taps"):
        Decoder.for_encoder(enc, DecoderConfig(taps=3), np.random.default_rng(0))


def test_default_decoder_is_lightweight():
    enc = Encoder(EncoderConfig(), np.random.default_rng(0))
    dec = Decoder.for_encoder(enc, DecoderConfig(), np.random.default_rng(0))
    params, flops = decoder_cost_ratio(enc, dec)
    assert params < 0.10
    assert 0 < flops < 1


def test_transformer_fusion_outweighs_single_conv():
    enc = Encoder(EncoderConfig(), np.random.default_rng(0))

    def count(**kw):
        return Decoder.for_encoder(enc, DecoderConfig(**kw), np.random.default_rng(0)).num_parameters()

    conv1 = count(fusion_operator="conv", fusion_layers=1)
    assert count(fusion_operator="transformer", fusion_layers=1) > conv1
    assert count(fusion_layers=4) > count(fusion_layers=2) > conv1


def test_no_decoder_has_zero_cost():
    assert decoder_cost_ratio(encoder(), None) == (0.0, 0.0)
