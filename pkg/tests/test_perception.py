import math

import numpy as np
import pytest
import torch

from lorl.encoding import SceneEncoding, check_partition_of_unity
from lorl.perception import build_model, compose_image, loss_monet, loss_slot
from lorl.perception.monet import MONetConfig, MONetModel, monet_decompose
from lorl.perception.slot_attention import (
    SlotAttentionConfig,
    SlotAttentionModel,
)


@pytest.fixture(scope="module")
def sa_model():
    torch.manual_seed(0)
    return SlotAttentionModel(SlotAttentionConfig(num_slots=4, image_size=16))


@pytest.fixture(scope="module")
def monet_model():
    torch.manual_seed(0)
    return MONetModel(MONetConfig(num_slots=4, image_size=16))


def rand_image(seed=0, size=16):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(size, size, 3, generator=g)


class TestConfigs:
    def test_sa_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            SlotAttentionConfig(num_slots=1, image_size=16)
        with pytest.raises(ValueError):
            SlotAttentionConfig(num_slots=4, image_size=17)

    def test_monet_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            MONetConfig(num_slots=1, image_size=16)
        with pytest.raises(ValueError):
            MONetConfig(num_slots=4, image_size=20)

    def test_build_model_dispatch(self):
        assert isinstance(build_model("slot-attention", 16, 4), SlotAttentionModel)
        assert isinstance(build_model("monet", 16, 4), MONetModel)
        with pytest.raises(ValueError):
            build_model("resnet", 16, 4)


class TestEncodingContracts:
    @pytest.mark.parametrize("tag", ["slot-attention", "monet"])
    def test_scene_encoding_shapes(self, tag, sa_model, monet_model):
        model = sa_model if tag == "slot-attention" else monet_model
        with torch.no_grad():
            enc = model.encode_scene(rand_image(), torch.Generator().manual_seed(1))
        K = 4
        assert enc.z.ndim == 2 and enc.z.shape[0] == K
        assert enc.x.shape == (K, 16, 16, 3)
        assert enc.m.shape == (K, 16, 16)
        assert enc.s.shape == (K,)
        assert enc.model_tag == tag
        assert float(enc.s.min()) >= 0.0 and float(enc.s.max()) <= 1.0
        assert float(enc.x.min()) >= 0.0 and float(enc.x.max()) <= 1.0

    @pytest.mark.parametrize("tag", ["slot-attention", "monet"])
    def test_partition_of_unity(self, tag, sa_model, monet_model):
        model = sa_model if tag == "slot-attention" else monet_model
        for seed in range(5):
            enc = model.encode_scene(rand_image(seed), torch.Generator().manual_seed(seed))
            assert check_partition_of_unity(enc, tol=1e-5)

    def test_objectness_near_one_at_init(self, sa_model, monet_model):
        """The objectness head starts optimistic (zero weights, positive bias),
        so untrained slots are treated as objects."""
        for model in (sa_model, monet_model):
            enc = model.encode_scene(rand_image(3), torch.Generator().manual_seed(3))
            expected = torch.sigmoid(torch.tensor(3.0))
            assert torch.allclose(enc.s, expected.expand_as(enc.s), atol=1e-6)


class TestSlotAttention:
    def test_attention_normalized_over_slots(self, sa_model):
        images = rand_image(5).permute(2, 0, 1).unsqueeze(0)
        feats = sa_model.features(images)
        slots = sa_model.init_slots(1, torch.Generator().manual_seed(5))
        _, attns = sa_model.attend(feats, slots, return_attn=True)
        # softmax is across slots: each input location's attention sums to 1
        for attn in attns:
            sums = attn.sum(dim=1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_decoder_permutation_equivariance(self, sa_model):
        from lorl.perception.slot_attention import decode_slots

        g = torch.Generator().manual_seed(9)
        slots = torch.randn(4, 64, generator=g)
        perm = torch.tensor([2, 0, 3, 1])
        enc = decode_slots(slots, sa_model)
        enc_p = decode_slots(slots[perm], sa_model)
        assert torch.allclose(enc.x[perm], enc_p.x, atol=1e-5)
        assert torch.allclose(enc.m[perm], enc_p.m, atol=1e-5)
        assert torch.allclose(enc.s[perm], enc_p.s, atol=1e-5)

    def test_same_generator_is_deterministic(self, sa_model):
        img = rand_image(6)
        a = sa_model.encode_scene(img, torch.Generator().manual_seed(4))
        b = sa_model.encode_scene(img, torch.Generator().manual_seed(4))
        assert torch.equal(a.z, b.z) and torch.equal(a.m, b.m)


class TestMONet:
    def test_attention_masks_partition(self, monet_model):
        images = rand_image(7).permute(2, 0, 1).unsqueeze(0)
        masks = monet_model.attention_masks(images)
        total = masks.sum(dim=1)
        assert torch.allclose(total, torch.ones_like(total), atol=1e-6)
        assert float(masks.min()) >= 0.0

    def test_single_step_mask_is_full_scope(self, monet_model):
        images = rand_image(8).permute(2, 0, 1).unsqueeze(0)
        masks = monet_model.attention_masks(images, num_steps=1)
        assert torch.allclose(masks[:, 0], torch.ones_like(masks[:, 0]))

    def test_kl_closed_form(self, monet_model):
        """KL(N(mu, sigma) || N(0, 1)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma)."""
        images = rand_image(9).permute(2, 0, 1).unsqueeze(0)
        mask = torch.full((1, 16, 16), 0.25)
        _, kl, _ = monet_model.encode_component(
            images, mask, torch.Generator().manual_seed(0)
        )
        with torch.no_grad():
            h = monet_model.encoder(torch.cat([images, mask.unsqueeze(1)], dim=1))
        mu, logsigma = h.chunk(2, dim=1)
        sigma = torch.exp(logsigma)
        manual = 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * logsigma).sum(dim=-1)
        assert torch.allclose(kl, manual, atol=1e-6)

    def test_kl_zero_at_standard_normal(self):
        mu = torch.zeros(1, 8)
        logsigma = torch.zeros(1, 8)
        kl = 0.5 * (mu**2 + torch.exp(logsigma) ** 2 - 1.0 - 2.0 * logsigma).sum(dim=-1)
        assert float(kl) == 0.0


class TestComposition:
    def test_compose_image_matches_loop(self, sa_model):
        enc = sa_model.encode_scene(rand_image(10), torch.Generator().manual_seed(10))
        composite = compose_image(enc)
        manual = torch.zeros(16, 16, 3)
        for k in range(4):
            manual += enc.s[k] * enc.m[k].unsqueeze(-1) * enc.x[k]
        assert torch.allclose(composite, manual, atol=1e-6)

    def test_loss_slot_is_summed_squared_error(self, sa_model):
        img = rand_image(11)
        enc = sa_model.encode_scene(img, torch.Generator().manual_seed(11))
        loss = loss_slot(enc, img)
        manual = float(((compose_image(enc) - img) ** 2).sum())
        assert math.isclose(float(loss), manual, rel_tol=1e-6)

    def test_loss_monet_adds_weighted_kl(self, monet_model):
        img = rand_image(12)
        enc, kl = monet_decompose(img, monet_model, torch.Generator().manual_seed(12))
        beta = 0.7
        loss = loss_monet(enc, kl, img, beta)
        manual = float(((compose_image(enc) - img) ** 2).sum()) + beta * float(kl.sum())
        assert math.isclose(float(loss), manual, rel_tol=1e-6)

    def test_profiles_roundtrip(self, sa_model):
        enc = sa_model.encode_scene(rand_image(13), torch.Generator().manual_seed(13))
        rebuilt = SceneEncoding.from_profiles(enc.profiles, model_tag=enc.model_tag)
        assert torch.equal(rebuilt.z, enc.z)
        assert torch.equal(rebuilt.m, enc.m)
        assert torch.equal(rebuilt.s, enc.s)
